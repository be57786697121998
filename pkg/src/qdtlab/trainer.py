"""Supervised action-prediction training: window sampling, masked MSE, AdamW."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import gradcore as gc
from .datagen import OfflineDataset, normalize_batch
from .model import (
    ModelConfig,
    Window,
    forward,
    init_params,
    interference_weights,
    param_kind,
    save_checkpoint,
)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    batch_size: int = 64
    epochs: int = 20
    grad_clip_norm: float = 1.0
    seed: int = 42
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    steps_per_epoch: int | None = None  # None: ceil(dataset steps / (batch * K))

    def __post_init__(self):
        if self.learning_rate <= 0 or self.grad_clip_norm <= 0 or self.adam_eps <= 0:
            raise ValueError("learning_rate, grad_clip_norm and adam_eps must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")

    def resolve_steps(self, dataset: OfflineDataset, context_len: int) -> int:
        if self.steps_per_epoch is not None:
            return self.steps_per_epoch
        return math.ceil(dataset.total_steps / (self.batch_size * context_len))


@dataclass
class TrainHistory:
    epoch_loss: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    epoch_grad_norm: list = field(default_factory=list)  # (mean, max) pre-clip
    step_loss: list = field(default_factory=list)
    step_grad_norm: list = field(default_factory=list)
    step_clipped_norm: list = field(default_factory=list)
    interference: dict = field(default_factory=dict)

    @property
    def final_loss(self) -> float:
        return self.epoch_loss[-1] if self.epoch_loss else float("nan")

    @property
    def total_seconds(self) -> float:
        return float(sum(self.epoch_seconds))


class TrainingAborted(RuntimeError):
    def __init__(self, step: int, reason: str, param_norms: dict):
        self.step = step
        self.param_norms = param_norms
        worst = sorted(param_norms.items(), key=lambda kv: -kv[1])[:5]
        shown = ", ".join(f"{k}={v:.3g}" for k, v in worst)
        super().__init__(f"non-finite value at step {step}: {reason}; largest parameter norms: {shown}")


# --- batching ------------------------------------------------------------

def make_window(traj, end: int, K: int, stats) -> tuple:
    """K-step window ending at ``end`` (inclusive), left padded with zeros.

    Returns (rtg, states, actions, timesteps, valid) with normalised states and
    scaled RTG; padded slots are zero with timestep 0.
    """
    start = max(0, end - K + 1)
    n = end - start + 1
    pad = K - n
    s, r = normalize_batch(stats, traj.states[start:end + 1], traj.rtg[start:end + 1])
    states = np.zeros((K, traj.states.shape[1]))
    actions = np.zeros((K, traj.actions.shape[1]))
    rtg = np.zeros(K)
    ts = np.zeros(K, dtype=np.int64)
    valid = np.zeros(K, dtype=bool)
    states[pad:] = s
    actions[pad:] = traj.actions[start:end + 1]
    rtg[pad:] = r
    ts[pad:] = traj.timesteps[start:end + 1]
    valid[pad:] = True
    return rtg, states, actions, ts, valid


def stack_windows(items) -> Window:
    rtg, states, actions, ts, valid = (np.stack(x) for x in zip(*items))
    return Window(rtg, states, actions, ts, valid)


def sample_batch(dataset: OfflineDataset, K: int, batch_size: int, rng: np.random.Generator,
                 stats=None) -> Window:
    """Uniform trajectory, uniform end index; the window is the K steps ending there."""
    if not dataset.trajectories:
        raise ValueError("cannot sample from an empty dataset")
    stats = stats or dataset.stats
    trajs = dataset.trajectories
    items = []
    for _ in range(batch_size):
        tr = trajs[int(rng.integers(len(trajs)))]
        end = int(rng.integers(len(tr)))
        items.append(make_window(tr, end, K, stats))
    return stack_windows(items)


def mse_loss(pred, target, valid) -> gc.Tensor:
    """Mean squared action error over valid (batch, step) pairs."""
    return gc.mse(pred, target, valid)


# --- optimisation --------------------------------------------------------

def clip_gradients(grads: dict, max_norm: float) -> tuple[dict, float]:
    """Scale every gradient by max_norm / global_norm when the norm exceeds max_norm."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    if norm > max_norm:
        f = max_norm / norm
        grads = {k: g * f for k, g in grads.items()}
    return grads, norm


def decays(name: str) -> bool:
    return param_kind(name) == "weight"


@dataclass
class AdamWState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(params: dict, grads: dict, state: AdamWState, config: TrainConfig,
                   decay_filter: Callable[[str], bool] = decays) -> dict:
    """One AdamW update in place; decay is decoupled from the adaptive step."""
    state.step += 1
    t = state.step
    b1, b2, lr = config.beta1, config.beta2, config.learning_rate
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        if config.weight_decay and decay_filter(name):
            p.data *= 1.0 - lr * config.weight_decay
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
    return params


# --- loop ----------------------------------------------------------------

def _param_norms(params) -> dict:
    return {k: float(np.linalg.norm(p.data)) for k, p in params.items()}


def train_step(params, window: Window, model_config: ModelConfig, config: TrainConfig,
               opt: AdamWState, step_index: int = 0) -> tuple[float, float, float]:
    """Forward, backward, clip, update.  Returns (loss, pre-clip norm, post-clip norm)."""
    for p in params.values():
        p.zero_grad()
    try:
        pred = forward(window, params, model_config)
        loss = mse_loss(pred, window.actions, window.valid)
        gc.backward(loss)
    except gc.NumericError as e:
        raise TrainingAborted(step_index, str(e), _param_norms(params)) from None
    grads, norm = clip_gradients({k: p.grad for k, p in params.items()}, config.grad_clip_norm)
    post = math.sqrt(sum(float(np.vdot(g, g)) for g in grads.values()))
    optimizer_step(params, grads, opt, config)
    for name, p in params.items():
        if not np.isfinite(p.data).all():
            raise TrainingAborted(step_index, f"parameter {name} became non-finite", _param_norms(params))
    return float(loss.data), norm, post


def train(model_config: ModelConfig, dataset: OfflineDataset, config: TrainConfig = TrainConfig(),
          checkpoint_path=None, log_path=None, params=None, max_steps: int | None = None,
          stop_below: float | None = None, progress: Callable | None = None):
    """Train one model variant; returns (params, TrainHistory).

    ``max_steps`` caps the total number of updates and ``stop_below`` ends
    training at the first batch loss under that value (both for smoke runs).
    Training data, initialisation and batch order are all derived from
    ``config.seed``.
    """
    K = model_config.context_len
    params = params if params is not None else init_params(model_config, config.seed)
    sample_rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    steps = config.resolve_steps(dataset, K)
    opt = AdamWState()
    hist = TrainHistory()
    log = None
    if log_path is not None:
        log_path = Path(log_path)
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log = log_path.open("w")
    done = False
    try:
        for epoch in range(config.epochs):
            t0 = time.perf_counter()
            losses, norms = [], []
            for _ in range(steps):
                batch = sample_batch(dataset, K, config.batch_size, sample_rng)
                loss, norm, post = train_step(params, batch, model_config, config, opt, opt.step)
                losses.append(loss)
                norms.append(norm)
                hist.step_loss.append(loss)
                hist.step_grad_norm.append(norm)
                hist.step_clipped_norm.append(post)
                if progress:
                    progress(epoch, opt.step, loss)
                if (stop_below is not None and loss < stop_below) or (max_steps and opt.step >= max_steps):
                    done = True
                    break
            secs = time.perf_counter() - t0
            hist.epoch_loss.append(float(np.mean(losses)))
            hist.epoch_seconds.append(secs)
            hist.epoch_grad_norm.append((float(np.mean(norms)), float(np.max(norms))))
            weights = interference_weights(params)
            if log:
                log.write(json.dumps({
                    "epoch": epoch + 1,
                    "mean_loss": hist.epoch_loss[-1],
                    "steps": len(losses),
                    "wall_clock_s": secs,
                    "grad_norm_mean": hist.epoch_grad_norm[-1][0],
                    "grad_norm_max": hist.epoch_grad_norm[-1][1],
                    "interference_weights": weights,
                }) + "\n")
                log.flush()
            if done:
                break
    finally:
        if log:
            log.close()
    hist.interference = interference_weights(params)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, params, model_config, {
            "train_config": asdict(config),
            "final_loss": hist.final_loss,
            "epoch_loss": hist.epoch_loss,
        })
    return params, hist


def read_epoch_log(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]
