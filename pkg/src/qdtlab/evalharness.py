"""Return-conditioned rollouts, evaluation reports, ablation and generalisation runs."""

from __future__ import annotations

import zlib
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import envsim
from . import gradcore as gc
from .datagen import DatasetStats, OfflineDataset
from .envsim import ACTION_DIM, EnvConfig
from .model import (
    DISPLAY_NAMES,
    VARIANT_KEYS,
    ModelConfig,
    Window,
    forward,
    param_count,
)
from .trainer import TrainConfig, make_window, mse_loss, stack_windows, train

Policy = Callable[[Window], np.ndarray]

DEFAULT_TARGETS = (30.0, 50.0, 70.0, 90.0)


@dataclass(frozen=True)
class EvalConfig:
    targets: tuple = DEFAULT_TARGETS
    episodes_per_target: int = 20
    max_steps: int = 1000
    context_len: int = 20
    eval_seed: int = 0
    noise_enabled: bool = True
    noise_std: float = 0.05

    def __post_init__(self):
        object.__setattr__(self, "targets", tuple(float(t) for t in self.targets))
        if not self.targets:
            raise ValueError("targets must be non-empty")
        if self.episodes_per_target < 1:
            raise ValueError("episodes_per_target must be >= 1")

    def env_config(self) -> EnvConfig:
        return EnvConfig(noise_std=self.noise_std if self.noise_enabled else 0.0,
                         max_steps=self.max_steps)


def model_policy(params, config: ModelConfig) -> Policy:
    def act(window: Window) -> np.ndarray:
        with gc.no_grad():
            return forward(window, params, config).data
    return act


def constant_policy(action) -> Policy:
    a = np.asarray(action, dtype=np.float64)

    def act(window: Window) -> np.ndarray:
        B, K = window.rtg.shape
        return np.broadcast_to(a, (B, K, a.shape[-1])).copy()
    return act


def episode_seed(eval_seed: int, target: float, index: int) -> np.random.SeedSequence:
    tag = zlib.crc32(repr(float(target)).encode())
    return np.random.SeedSequence([int(eval_seed), tag, int(index)])


@dataclass
class Episode:
    target: float
    index: int
    ret: float
    length: int
    rtg_trace: np.ndarray | None = None     # raw RTG fed at each step
    reward_trace: np.ndarray | None = None


def rollout_batch(policy: Policy, stats: DatasetStats, targets: Sequence[float], seeds: Sequence,
                  env: EnvConfig, context_len: int, trace: bool = False) -> list[Episode]:
    """Run len(targets) episodes in lockstep, batching the policy call.

    At step t each live episode feeds the last K steps of (RTG, state, action)
    with the step-t action slot zeroed, takes the prediction at the final
    state token, steps the environment and sets RTG = target - cumulative reward.
    """
    n = len(targets)
    K = context_len
    T = env.max_steps
    rngs = [np.random.default_rng(s) for s in seeds]
    states = [envsim.reset(env, rng) for rng in rngs]
    buf_s = np.zeros((n, T, envsim.STATE_DIM))
    buf_a = np.zeros((n, T, ACTION_DIM))
    buf_R = np.zeros((n, T))
    buf_r = np.zeros((n, T))
    target = np.asarray(targets, dtype=np.float64)
    cum = np.zeros(n)
    length = np.zeros(n, dtype=int)
    for t in range(T):
        live = [i for i in range(n) if not states[i].done]
        if not live:
            break
        for i in live:
            buf_s[i, t] = states[i].s
            buf_R[i, t] = target[i] - cum[i]
        lo = max(0, t - K + 1)
        pad = K - (t - lo + 1)
        B = len(live)
        w_s = np.zeros((B, K, envsim.STATE_DIM))
        w_a = np.zeros((B, K, ACTION_DIM))
        w_R = np.zeros((B, K))
        w_t = np.zeros((B, K), dtype=np.int64)
        valid = np.zeros((B, K), dtype=bool)
        w_s[:, pad:] = (buf_s[live, lo:t + 1] - stats.state_mean) / stats.state_std
        w_R[:, pad:] = buf_R[live, lo:t + 1] / stats.return_scale
        w_a[:, pad:K - 1] = buf_a[live, lo:t]  # step-t slot stays zero
        w_t[:, pad:] = np.arange(lo, t + 1)
        valid[:, pad:] = True
        pred = np.asarray(policy(Window(w_R, w_s, w_a, w_t, valid)))[:, -1]
        for j, i in enumerate(live):
            states[i], r = envsim.step(states[i], pred[j], env, rngs[i])
            buf_a[i, t] = np.clip(pred[j], -1.0, 1.0)
            buf_r[i, t] = r
            cum[i] += r
            length[i] = t + 1
    out = []
    for i in range(n):
        L = length[i]
        out.append(Episode(float(target[i]), i, float(cum[i]), int(L),
                           buf_R[i, :L].copy() if trace else None,
                           buf_r[i, :L].copy() if trace else None))
    return out


def rollout(policy: Policy, stats: DatasetStats, target_return: float, seed, env: EnvConfig | None = None,
            context_len: int = 20, trace: bool = False) -> Episode:
    """Single return-conditioned episode; see ``rollout_batch``."""
    env = env or EnvConfig()
    return rollout_batch(policy, stats, [target_return], [seed], env, context_len, trace)[0]


# --- reports -------------------------------------------------------------

@dataclass
class EvalReport:
    variant: str
    targets: list
    per_target_mean: list
    per_target_std: list
    grand_mean: float
    grand_std: float             # mean of per-target stds, the table's "avg std"
    overall_std: float           # std over all episodes pooled
    episode_returns: list        # [n_targets][episodes]
    param_count: int | None = None
    final_loss: float | None = None
    improvement_pct: float | None = None
    return_per_million_params: float | None = None

    @property
    def n_episodes(self) -> int:
        return sum(len(r) for r in self.episode_returns)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)


def improvement_pct(value: float, baseline: float) -> float:
    """Relative gain over the baseline in percent, (v - b) / |b| * 100."""
    if baseline == 0:
        return float("nan")
    return (value - baseline) / abs(baseline) * 100.0


def summarize(variant: str, records: Sequence[tuple], param_count_: int | None = None,
              final_loss: float | None = None, baseline_mean: float | None = None) -> EvalReport:
    """Aggregate (target, episode_index, return) rows into an EvalReport.

    Pure function of its inputs, so reports can be rebuilt from stored rows.
    """
    targets = sorted({float(r[0]) for r in records})
    returns = [[float(r[2]) for r in sorted(records, key=lambda r: int(r[1])) if float(r[0]) == tg]
               for tg in targets]
    means = [float(np.mean(x)) for x in returns]
    stds = [float(np.std(x)) for x in returns]
    pooled = np.concatenate([np.asarray(x) for x in returns])
    grand = float(np.mean(pooled))
    rep = EvalReport(variant, targets, means, stds, grand, float(np.mean(stds)),
                     float(np.std(pooled)), returns, param_count_, final_loss)
    if baseline_mean is not None:
        rep.improvement_pct = improvement_pct(grand, baseline_mean)
    if param_count_:
        rep.return_per_million_params = grand / (param_count_ / 1e6)
    return rep


def episode_records(report: EvalReport) -> list[tuple]:
    return [(tg, i, r) for tg, rs in zip(report.targets, report.episode_returns) for i, r in enumerate(rs)]


def evaluate(policy: Policy, eval_config: EvalConfig, stats: DatasetStats, variant: str = "",
             param_count_: int | None = None, final_loss: float | None = None,
             baseline_mean: float | None = None) -> EvalReport:
    """episodes_per_target rollouts for every target, all run as one lockstep batch."""
    targets, seeds = [], []
    for tg in eval_config.targets:
        for i in range(eval_config.episodes_per_target):
            targets.append(tg)
            seeds.append(episode_seed(eval_config.eval_seed, tg, i))
    eps = rollout_batch(policy, stats, targets, seeds, eval_config.env_config(), eval_config.context_len)
    per_target_idx: dict = {}
    records = []
    for ep in eps:
        k = per_target_idx.setdefault(ep.target, 0)
        per_target_idx[ep.target] = k + 1
        records.append((ep.target, k, ep.ret))
    return summarize(variant, records, param_count_, final_loss, baseline_mean)


def evaluate_params(params, model_config: ModelConfig, eval_config: EvalConfig, stats: DatasetStats,
                    final_loss: float | None = None, baseline_mean: float | None = None) -> EvalReport:
    ec = replace(eval_config, context_len=model_config.context_len)
    return evaluate(model_policy(params, model_config), ec, stats, model_config.variant.key,
                    param_count(params), final_loss, baseline_mean)


# --- ablation ------------------------------------------------------------

@dataclass
class AblationResult:
    reports: dict                 # variant key -> EvalReport
    histories: dict               # variant key -> TrainHistory
    synergy: dict
    train_seconds: dict = field(default_factory=dict)

    def table(self) -> list[dict]:
        return table_rows(self.reports)


def synergy_summary(reports: dict) -> dict:
    """Combined-vs-individual deltas over the standard baseline (any sign)."""
    base = reports["standard"].grand_mean
    d_att = reports["q-attn"].grand_mean - base
    d_ff = reports["q-ff"].grand_mean - base
    d_both = reports["quantum"].grand_mean - base
    return {
        "baseline_mean": base,
        "delta_q_attention": d_att,
        "delta_q_ff": d_ff,
        "delta_combined": d_both,
        "synergy": d_both - (d_att + d_ff),
        "combined_exceeds_sum": bool(d_both > d_att + d_ff),
    }


def table_rows(reports: dict) -> list[dict]:
    rows = []
    for key in VARIANT_KEYS:
        if key not in reports:
            continue
        r = reports[key]
        rows.append({
            "variant": key,
            "model": DISPLAY_NAMES[key],
            "avg_return": r.grand_mean,
            "avg_std": r.grand_std,
            "parameters": r.param_count,
            "final_loss": r.final_loss,
            "improvement_pct": r.improvement_pct,
            "return_per_million_params": r.return_per_million_params,
        })
    return rows


def ablation_matrix(dataset: OfflineDataset, train_config: TrainConfig, eval_config: EvalConfig,
                    model_config: ModelConfig | None = None, progress: Callable | None = None) -> AblationResult:
    """Train and evaluate all four variants with identical seeds and settings."""
    model_config = model_config or ModelConfig()
    trained = {}
    for key in VARIANT_KEYS:
        cfg = model_config.with_variant(key)
        params, hist = train(cfg, dataset, train_config)
        trained[key] = (cfg, params, hist)
        if progress:
            progress(key, hist)
    return evaluate_trained(trained, dataset.stats, eval_config)


def evaluate_trained(trained: dict, stats: DatasetStats, eval_config: EvalConfig) -> AblationResult:
    """trained: variant key -> (ModelConfig, params, TrainHistory or None)."""
    reports = {}
    for key in ("standard",) + tuple(k for k in VARIANT_KEYS if k != "standard"):
        if key not in trained:
            continue
        cfg, params, hist = trained[key]
        base = reports["standard"].grand_mean if "standard" in reports else None
        final = hist.final_loss if hist is not None and hist.epoch_loss else None
        reports[key] = evaluate_params(params, cfg, eval_config, stats, final, base)
    if "standard" in reports:
        reports["standard"].improvement_pct = 0.0
    ordered = {k: reports[k] for k in VARIANT_KEYS if k in reports}
    syn = synergy_summary(ordered) if len(ordered) == 4 else {}
    hists = {k: v[2] for k, v in trained.items()}
    secs = {k: h.total_seconds for k, h in hists.items() if h is not None}
    return AblationResult(ordered, hists, syn, secs)


def cost_report(train_seconds: dict) -> dict:
    """Measured Quantum DT / Standard DT training wall-clock ratio."""
    out = {"train_seconds": dict(train_seconds), "reference_ratio": 1.8}
    if train_seconds.get("standard") and "quantum" in train_seconds:
        out["quantum_over_standard"] = train_seconds["quantum"] / train_seconds["standard"]
    return out


# --- generalisation ------------------------------------------------------

def coverage_windows(dataset: OfflineDataset, K: int, stats: DatasetStats) -> list[tuple]:
    """Windows whose valid steps partition every trajectory exactly once.

    Windows end at T-1, T-1-K, ... so only the earliest one can be padded.
    """
    items = []
    for tr in dataset.trajectories:
        for end in range(len(tr) - 1, -1, -K):
            items.append(make_window(tr, end, K, stats))
    return items


def offline_mse(policy: Policy, dataset: OfflineDataset, stats: DatasetStats, K: int,
                batch_size: int = 256) -> tuple[float, int]:
    """Action-prediction MSE over every step of ``dataset``; returns (mse, n_steps)."""
    items = coverage_windows(dataset, K, stats)
    total, count = 0.0, 0
    for s in range(0, len(items), batch_size):
        w = stack_windows(items[s:s + batch_size])
        pred = policy(w)
        n = int(w.valid.sum())
        total += float(mse_loss(pred, w.actions, w.valid).data) * n
        count += n
    return total / count, count


@dataclass
class GeneralizationReport:
    variant: str
    blocks: list   # one dict per (tier, measurement)

    def to_dict(self) -> dict:
        return asdict(self)


def generalization_test(params, model_config: ModelConfig, train_stats: DatasetStats,
                        tier_datasets: dict, eval_config: EvalConfig,
                        policy: Policy | None = None) -> GeneralizationReport:
    """Both readings per tier: offline MSE under the training statistics, and
    environment returns with the tier's own statistics swapped in."""
    policy = policy or model_policy(params, model_config)
    K = model_config.context_len
    ec = replace(eval_config, context_len=K)
    blocks = []
    for tier, ds in tier_datasets.items():
        mse, n = offline_mse(policy, ds, train_stats, K)
        blocks.append({"tier": str(getattr(tier, "value", tier)), "measurement": "offline_mse",
                       "mse": mse, "n_steps": n})
        rep = evaluate(policy, ec, ds.stats, model_config.variant.key)
        blocks.append({"tier": str(getattr(tier, "value", tier)), "measurement": "rollout_tier_stats",
                       "report": rep.to_dict()})
    return GeneralizationReport(model_config.variant.key, blocks)
