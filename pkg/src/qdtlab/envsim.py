"""Synthetic 11-d linear control task with a 3-d action.

    s' = 0.9 s + 0.3 C a + eps,   eps ~ N(0, noise_std^2 I)
    r  = clip(2 s[0] - 0.01 |a|^2 - 0.1 |s|^2, -10, 10)

The reward uses the pre-transition state.  ``C`` embeds the action into the
first three state components.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

STATE_DIM = 11
ACTION_DIM = 3


def default_coupling() -> np.ndarray:
    c = np.zeros((STATE_DIM, ACTION_DIM))
    c[:ACTION_DIM, :ACTION_DIM] = np.eye(ACTION_DIM)
    return c


class EnvError(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    noise_std: float = 0.05
    max_steps: int = 1000
    state_norm_limit: float = 100.0
    reward_clip: tuple[float, float] = (-10.0, 10.0)
    action_coupling: np.ndarray = field(default_factory=default_coupling, compare=False, repr=False)
    rng_seed: int = 0

    def __post_init__(self):
        if self.noise_std < 0:
            raise ValueError(f"noise_std must be >= 0, got {self.noise_std}")
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")
        if np.shape(self.action_coupling) != (STATE_DIM, ACTION_DIM):
            raise ValueError("action_coupling must be 11x3")

    def noiseless(self) -> "EnvConfig":
        return replace(self, noise_std=0.0)


@dataclass(frozen=True)
class EnvState:
    s: np.ndarray
    t: int = 0
    done: bool = False
    clamped: int = 0  # running count of out-of-range action components

    def __post_init__(self):
        if np.shape(self.s) != (STATE_DIM,):
            raise ValueError(f"state must have {STATE_DIM} components, got shape {np.shape(self.s)}")


def reset(config: EnvConfig, seed=None) -> EnvState:
    """Initial state s0 ~ N(0, noise_std^2 I); exactly zero with noise off.

    ``seed`` may be an int or a numpy Generator (consumed in place); ``None``
    falls back to ``config.rng_seed``.
    """
    if config.noise_std == 0:
        return EnvState(np.zeros(STATE_DIM))
    rng = np.random.default_rng(config.rng_seed if seed is None else seed)
    return EnvState(rng.normal(0.0, config.noise_std, STATE_DIM))


def reward_fn(s: np.ndarray, a: np.ndarray, config: EnvConfig) -> float:
    raw = 2.0 * s[0] - 0.01 * float(a @ a) - 0.1 * float(s @ s)
    lo, hi = config.reward_clip
    return float(min(max(raw, lo), hi))


def step(state: EnvState, action, config: EnvConfig, rng=None) -> tuple[EnvState, float]:
    """Advance one step.  ``rng`` supplies the process noise (unused when noise is off)."""
    if state.done:
        raise EnvError(f"step called on a finished episode (t={state.t})")
    a = np.asarray(action, dtype=np.float64).reshape(ACTION_DIM)
    n_out = int(np.count_nonzero(np.abs(a) > 1.0))
    a = np.clip(a, -1.0, 1.0)
    r = reward_fn(state.s, a, config)
    nxt = 0.9 * state.s + 0.3 * (config.action_coupling @ a)
    if config.noise_std > 0:
        if rng is None:
            raise EnvError("a noise generator is required when noise_std > 0")
        nxt = nxt + rng.normal(0.0, config.noise_std, STATE_DIM)
    t = state.t + 1
    done = t >= config.max_steps or float(np.linalg.norm(nxt)) > config.state_norm_limit
    return EnvState(nxt, t, done, state.clamped + n_out), r
