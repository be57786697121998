"""Offline dataset collection, returns-to-go, normalisation and the on-disk format.

File layout (JSON Lines, UTF-8):

* line 1 is a header object: format tag, version, tier, gamma, state_mean,
  state_std, return_scale, source_seed, n_trajectories;
* each following line is one trajectory with parallel arrays ``states``,
  ``actions``, ``rewards``, ``rtg`` and ``timesteps``.

A ``<file>.sha256`` sidecar holds the digest of the data file.
"""

from __future__ import annotations

import enum
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import envsim
from .envsim import ACTION_DIM, STATE_DIM, EnvConfig

FORMAT_TAG = "qdtlab-dataset"
FORMAT_VERSION = "1"
STD_FLOOR = 1e-8
SCALE_FLOOR = 1e-8
DEFAULT_GAMMA = 0.99


class Tier(str, enum.Enum):
    MEDIUM = "medium"
    EXPERT = "expert"
    RANDOM = "random"


@dataclass(frozen=True)
class TierSpec:
    name: Tier
    n_trajectories: int
    noise_std: float

    @classmethod
    def default(cls, tier) -> "TierSpec":
        tier = Tier(tier)
        n, sigma = TIER_DEFAULTS[tier]
        return cls(tier, n, sigma)


TIER_DEFAULTS = {
    Tier.MEDIUM: (500, 0.3),
    Tier.EXPERT: (300, 0.05),
    Tier.RANDOM: (300, 0.8),
}


@dataclass
class Trajectory:
    states: np.ndarray      # [T, 11]
    actions: np.ndarray     # [T, 3]
    rewards: np.ndarray     # [T]
    rtg: np.ndarray         # [T]
    timesteps: np.ndarray   # [T] int

    def __len__(self):
        return len(self.rewards)

    def validate(self, gamma: float):
        T = len(self.rewards)
        if not 1 <= T <= 1000:
            raise ValueError(f"trajectory length {T} outside [1, 1000]")
        if (self.states.shape != (T, STATE_DIM) or self.actions.shape != (T, ACTION_DIM)
                or self.rtg.shape != (T,) or self.timesteps.shape != (T,)):
            raise ValueError("trajectory arrays have inconsistent lengths")
        if not np.allclose(self.rtg, compute_rtg(self.rewards, gamma), rtol=0, atol=1e-9):
            raise ValueError("rtg does not satisfy the discounted recursion")

    def undiscounted_return(self) -> float:
        return float(self.rewards.sum())


@dataclass
class OfflineDataset:
    trajectories: list
    tier: Tier
    state_mean: np.ndarray
    state_std: np.ndarray
    return_scale: float
    gamma: float = DEFAULT_GAMMA
    source_seed: int = 0

    @property
    def stats(self) -> "DatasetStats":
        return DatasetStats(self.state_mean, self.state_std, self.return_scale)

    @property
    def total_steps(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def mean_return(self) -> float:
        return float(np.mean([t.undiscounted_return() for t in self.trajectories]))


@dataclass(frozen=True)
class DatasetStats:
    """Normalisation statistics carried from a training dataset to evaluation."""

    state_mean: np.ndarray
    state_std: np.ndarray
    return_scale: float


def behavior_policy(s) -> np.ndarray:
    """Stabilising reward-seeking controller: a_i = clip(0.8[i=0] - 0.5 s_i, -1, 1)."""
    s = np.asarray(s, dtype=np.float64)
    base = -0.5 * s[:ACTION_DIM]
    base[0] += 0.8
    return np.clip(base, -1.0, 1.0)


def compute_rtg(rewards, gamma: float = DEFAULT_GAMMA) -> np.ndarray:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    r = np.asarray(rewards, dtype=np.float64)
    out = np.empty_like(r)
    acc = 0.0
    for t in range(len(r) - 1, -1, -1):
        acc = r[t] + gamma * acc
        out[t] = acc
    return out


def compute_stats(trajectories) -> tuple[np.ndarray, np.ndarray, float]:
    states = np.concatenate([t.states for t in trajectories], axis=0)
    mean = states.mean(axis=0)
    std = np.maximum(states.std(axis=0), STD_FLOOR)
    scale = max(max(float(np.abs(t.rtg).max()) for t in trajectories), SCALE_FLOOR)
    return mean, std, scale


def rollout_behavior(env: EnvConfig, noise_std: float, rng: np.random.Generator,
                     gamma: float = DEFAULT_GAMMA) -> Trajectory:
    state = envsim.reset(env, rng)
    states, actions, rewards = [], [], []
    while not state.done:
        a = behavior_policy(state.s)
        if noise_std > 0:
            a = np.clip(a + rng.normal(0.0, noise_std, ACTION_DIM), -1.0, 1.0)
        states.append(state.s)
        actions.append(a)
        state, r = envsim.step(state, a, env, rng)
        rewards.append(r)
    rewards = np.asarray(rewards)
    return Trajectory(
        states=np.asarray(states),
        actions=np.asarray(actions),
        rewards=rewards,
        rtg=compute_rtg(rewards, gamma),
        timesteps=np.arange(len(rewards), dtype=np.int64),
    )


def episode_rngs(seed: int, n: int) -> list:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(n)]


def collect(tier: TierSpec, env: EnvConfig | None = None, seed: int = 42,
            gamma: float = DEFAULT_GAMMA) -> OfflineDataset:
    """Roll out the noisy behaviour policy ``tier.n_trajectories`` times.

    Each episode draws from its own child stream of ``seed``, so the result
    does not depend on the order episodes are generated in.
    """
    if isinstance(tier, (str, Tier)):
        tier = TierSpec.default(tier)
    env = env or EnvConfig()
    trajs = [rollout_behavior(env, tier.noise_std, rng, gamma)
             for rng in episode_rngs(seed, tier.n_trajectories)]
    mean, std, scale = compute_stats(trajs)
    return OfflineDataset(trajs, Tier(tier.name), mean, std, scale, gamma, seed)


def normalize_batch(stats, raw_states, raw_rtg):
    """Return ((s - mean) / std, rtg / return_scale)."""
    if isinstance(stats, OfflineDataset):
        stats = stats.stats
    norm = (np.asarray(raw_states, dtype=np.float64) - stats.state_mean) / stats.state_std
    return norm, np.asarray(raw_rtg, dtype=np.float64) / stats.return_scale


# --- persistence ---------------------------------------------------------

class DatasetFormatError(ValueError):
    pass


class DatasetParseError(DatasetFormatError):
    def __init__(self, path, line: int, offset: int, msg: str):
        self.line, self.offset = line, offset
        super().__init__(f"{path}: line {line}, offset {offset}: {msg}")


class DatasetVersionError(DatasetFormatError):
    def __init__(self, found, expected):
        self.found, self.expected = found, expected
        super().__init__(f"dataset format version {found!r} is not supported "
                         f"(this build reads version {expected!r})")


class ChecksumError(DatasetFormatError):
    pass


def checksum_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".sha256")


def _dumps(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False)


def save(dataset: OfflineDataset, path) -> Path:
    path = Path(path)
    header = {
        "format": FORMAT_TAG,
        "version": FORMAT_VERSION,
        "tier": Tier(dataset.tier).value,
        "gamma": dataset.gamma,
        "state_mean": dataset.state_mean.tolist(),
        "state_std": dataset.state_std.tolist(),
        "return_scale": dataset.return_scale,
        "source_seed": dataset.source_seed,
        "n_trajectories": len(dataset.trajectories),
    }
    lines = [_dumps(header)]
    for i, tr in enumerate(dataset.trajectories):
        lines.append(_dumps({
            "index": i,
            "states": tr.states.tolist(),
            "actions": tr.actions.tolist(),
            "rewards": tr.rewards.tolist(),
            "rtg": tr.rtg.tolist(),
            "timesteps": tr.timesteps.tolist(),
        }))
    blob = ("\n".join(lines) + "\n").encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)
    digest = hashlib.sha256(blob).hexdigest()
    checksum_path(path).write_text(f"{digest}  {path.name}\n")
    return path


def _parse_line(path, text: str, lineno: int, offset: int):
    try:
        return json.loads(text)
    except json.JSONDecodeError as e:
        raise DatasetParseError(path, lineno, offset + e.pos, e.msg) from None


def load(path, verify_checksum: bool = True) -> OfflineDataset:
    path = Path(path)
    blob = path.read_bytes()
    try:
        text = blob.decode("utf-8")
    except UnicodeDecodeError as e:
        raise DatasetParseError(path, 1, e.start, "not UTF-8 text") from None
    if not text:
        raise DatasetParseError(path, 1, 0, "empty file")
    if not text.endswith("\n"):
        raise DatasetParseError(path, text.count("\n") + 1, len(text), "truncated record (no trailing newline)")
    lines = text.split("\n")[:-1]
    offsets = np.cumsum([0] + [len(l) + 1 for l in lines])

    header = _parse_line(path, lines[0], 1, 0)
    if not isinstance(header, dict) or header.get("format") != FORMAT_TAG:
        raise DatasetParseError(path, 1, 0, "missing dataset header")
    if str(header.get("version")) != FORMAT_VERSION:
        raise DatasetVersionError(str(header.get("version")), FORMAT_VERSION)
    n = header["n_trajectories"]
    if len(lines) - 1 != n:
        raise DatasetParseError(path, len(lines) + 1, len(text),
                                f"expected {n} trajectory records, found {len(lines) - 1}")
    trajs = []
    for i, line in enumerate(lines[1:]):
        rec = _parse_line(path, line, i + 2, int(offsets[i + 1]))
        try:
            tr = Trajectory(
                states=np.array(rec["states"], dtype=np.float64).reshape(-1, STATE_DIM),
                actions=np.array(rec["actions"], dtype=np.float64).reshape(-1, ACTION_DIM),
                rewards=np.array(rec["rewards"], dtype=np.float64),
                rtg=np.array(rec["rtg"], dtype=np.float64),
                timesteps=np.array(rec["timesteps"], dtype=np.int64),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise DatasetParseError(path, i + 2, int(offsets[i + 1]), f"bad trajectory record: {e}") from None
        trajs.append(tr)

    if verify_checksum:
        side = checksum_path(path)
        if side.exists():
            want = side.read_text().split()[0]
            got = hashlib.sha256(blob).hexdigest()
            if want != got:
                raise ChecksumError(f"{path}: checksum mismatch (sidecar {want[:12]}..., file {got[:12]}...)")

    return OfflineDataset(
        trajectories=trajs,
        tier=Tier(header["tier"]),
        state_mean=np.array(header["state_mean"], dtype=np.float64),
        state_std=np.array(header["state_std"], dtype=np.float64),
        return_scale=float(header["return_scale"]),
        gamma=float(header["gamma"]),
        source_seed=int(header["source_seed"]),
    )


def datasets_equal(a: OfflineDataset, b: OfflineDataset) -> bool:
    """Bit-level equality of two datasets."""
    if (a.tier != b.tier or a.gamma != b.gamma or a.source_seed != b.source_seed
            or a.return_scale != b.return_scale or len(a.trajectories) != len(b.trajectories)):
        return False
    if not (np.array_equal(a.state_mean, b.state_mean) and np.array_equal(a.state_std, b.state_std)):
        return False
    for x, y in zip(a.trajectories, b.trajectories):
        for f in ("states", "actions", "rewards", "rtg", "timesteps"):
            u, v = getattr(x, f), getattr(y, f)
            if u.dtype != v.dtype or not np.array_equal(u, v):
                return False
    return True
