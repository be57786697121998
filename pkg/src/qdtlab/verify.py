"""Self-check suite behind ``qdtlab verify``.

Each check returns (passed, detail).  ``faults`` lets a caller inject known
defects to confirm the suite catches them:

* ``standard_alpha``: entanglement strength wrongly applied in the standard
  attention path.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import datagen, envsim
from . import gradcore as gc
from .envsim import EnvConfig, EnvState
from .model import (
    ModelConfig,
    Window,
    attention,
    causal_mask,
    feedforward,
    forward,
    init_params,
    variant_delta,
)

GRAD_TOL = 1e-4
EXPECTED_ENTANGLEMENT_DELTA = 49_536


def _rand_window(rng, B, K, cfg):
    return Window(rng.normal(size=(B, K)), rng.normal(size=(B, K, cfg.state_dim)),
                  rng.uniform(-1, 1, (B, K, cfg.action_dim)), rng.integers(0, cfg.t_max, (B, K)))


def primitive_cases(rng) -> dict[str, tuple[Callable, list]]:
    """Scalar test functions (primitive composed with an MSE read-out) and their inputs."""
    tgt = {s: rng.normal(size=s) for s in [(3, 4), (4, 3), (2, 3, 5), (3, 5), (6, 4), (2, 3)]}
    idx = np.array([[0, 2], [1, 2], [3, 0]])
    return {
        "matmul": (lambda a, b: gc.mse(gc.matmul(a, b), tgt[(3, 5)]), [(3, 4), (4, 5)]),
        "transpose": (lambda a: gc.mse(gc.transpose(a), tgt[(4, 3)]), [(3, 4)]),
        "add": (lambda a, b: gc.mse(gc.add(a, b), tgt[(2, 3, 5)]), [(2, 3, 5), (5,)]),
        "scale": (lambda a: gc.mse(gc.scale(a, -1.7), tgt[(3, 4)]), [(3, 4)]),
        "softmax": (lambda a: gc.mse(gc.softmax(a), tgt[(2, 3, 5)]), [(2, 3, 5)]),
        "layer_norm": (lambda x, g, b: gc.mse(gc.layer_norm(x, g, b), tgt[(2, 3, 5)]), [(2, 3, 5), (5,), (5,)]),
        "gelu": (lambda a: gc.mse(gc.gelu(a), tgt[(3, 4)]), [(3, 4)]),
        "tanh": (lambda a: gc.mse(gc.tanh(a), tgt[(3, 4)]), [(3, 4)]),
        "embedding": (lambda t: gc.mse(gc.embedding(t, idx), rng_fixed_target(idx.shape + (4,))), [(5, 4)]),
        "take": (lambda a: gc.mse(gc.take(a, [2, 0, 2], axis=1), tgt[(2, 3)].reshape(2, 3, 1).repeat(5, 2)), [(2, 4, 5)]),
        "concat": (lambda a, b: gc.mse(gc.concat([a, b], axis=0), tgt[(6, 4)]), [(2, 4), (4, 4)]),
        "linear": (lambda x, w, b: gc.mse(gc.linear(x, w, b), tgt[(2, 3, 5)]), [(2, 3, 4), (5, 4), (5,)]),
        "weighted_sum": (lambda a, b, w: gc.mse(gc.weighted_sum([a, b], gc.softmax(w)), tgt[(3, 4)]),
                         [(3, 4), (3, 4), (2,)]),
        "mse": (lambda a: gc.mse(a, tgt[(3, 4)], np.array([1, 0, 1.0])), [(3, 4)]),
    }


def rng_fixed_target(shape):
    return np.linspace(-1, 1, int(np.prod(shape))).reshape(shape)


def check_primitive_gradients(points: int = 20, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = {}
    for name, (f, shapes) in primitive_cases(rng).items():
        err = 0.0
        for _ in range(points):
            args = [rng.normal(size=s) for s in shapes]
            err = max(err, gc.grad_check(f, args, 1e-5))
        worst[name] = err
    bad = {k: v for k, v in worst.items() if not v < GRAD_TOL}
    top = max(worst.values())
    return not bad, f"max rel error {top:.2e} over {len(worst)} primitives" + (f"; failing {bad}" if bad else "")


def small_model_config(variant="quantum") -> ModelConfig:
    return ModelConfig(d_model=8, n_layers=1, n_heads=2, context_len=3, n_channels=3,
                       t_max=6, variant=variant)


def check_model_gradient(seed: int = 0) -> tuple[bool, str]:
    cfg = small_model_config()
    params = init_params(cfg, seed)
    rng = np.random.default_rng(seed + 1)
    # larger weights than init so every path contributes measurably
    for p in params.values():
        p.data[...] = p.data + rng.normal(0, 0.3, p.shape)
    w = _rand_window(rng, 2, cfg.context_len, cfg)
    target = rng.uniform(-1, 1, (2, cfg.context_len, cfg.action_dim))
    names = list(params)

    def loss(*tensors):
        return gc.mse(forward(w, dict(zip(names, tensors)), cfg), target, w.valid)

    err = gc.grad_check(loss, [params[n].data for n in names], 1e-5)
    return err < GRAD_TOL, f"max rel error {err:.2e} over {sum(p.size for p in params.values())} parameters"


def check_alpha_zero_reduction(trials: int = 50, seed: int = 0, faults: dict | None = None) -> tuple[bool, str]:
    faults = faults or {}
    cfg = ModelConfig(d_model=16, n_layers=1, n_heads=4, context_len=4, t_max=10)
    params = init_params(cfg, seed)
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.data[...] = rng.normal(0, 0.5, p.shape)
    worst = 0.0
    std_alpha = faults.get("standard_alpha")
    with gc.no_grad():
        for _ in range(trials):
            T = int(rng.integers(1, 12))
            X = gc.Tensor(rng.normal(size=(2, T, 16)))
            m = causal_mask(T)
            q = attention(X, m, params, "layers.0.attn", 4, 0.0).data
            s = attention(X, m, params, "layers.0.attn", 4, std_alpha).data
            worst = max(worst, float(np.abs(q - s).max()))
    return worst < 1e-12, f"max |quantum(alpha=0) - standard| = {worst:.2e}"


def check_uniform_interference(trials: int = 20, seed: int = 0) -> tuple[bool, str]:
    cfg = ModelConfig(d_model=8, n_layers=1, n_heads=2, context_len=2, t_max=4)
    params = init_params(cfg, seed)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with gc.no_grad():
        for _ in range(trials):
            for p in params.values():
                p.data[...] = rng.normal(0, 0.5, p.shape)
            params["layers.0.ff.theta"].data[...] = rng.normal()
            X = gc.Tensor(rng.normal(size=(2, 5, 8)))
            out = feedforward(X, params, "layers.0.ff", 3, quantum=True).data
            chans = []
            for c in range(3):
                W1, b1 = params[f"layers.0.ff.{c}.W1"].data, params[f"layers.0.ff.{c}.b1"].data
                W2, b2 = params[f"layers.0.ff.{c}.W2"].data, params[f"layers.0.ff.{c}.b2"].data
                h = X.data @ W1.T + b1
                h = gc.gelu(h).data
                chans.append(h @ W2.T + b2)
            worst = max(worst, float(np.abs(out - np.mean(chans, axis=0)).max()))
    return worst < 1e-12, f"max |equal-logit mix - channel mean| = {worst:.2e}"


def check_causality(trials: int = 10, seed: int = 0) -> tuple[bool, str]:
    cfg = ModelConfig(d_model=16, n_layers=2, n_heads=4, context_len=5, t_max=50)
    params = init_params(cfg, seed)
    rng = np.random.default_rng(seed)
    for p in params.values():
        p.data[...] = p.data + rng.normal(0, 0.2, p.shape)
    worst = 0.0
    with gc.no_grad():
        for _ in range(trials):
            w = _rand_window(rng, 1, cfg.context_len, cfg)
            base = forward(w, params, cfg).data
            t = int(rng.integers(cfg.context_len))
            w2 = Window(w.rtg.copy(), w.states.copy(), w.actions.copy(), w.timesteps.copy())
            w2.rtg[:, t + 1:] += rng.normal(size=w2.rtg[:, t + 1:].shape) * 5
            w2.states[:, t + 1:] += rng.normal(size=w2.states[:, t + 1:].shape) * 5
            w2.actions[:, t:] = rng.uniform(-1, 1, w2.actions[:, t:].shape)
            w2.timesteps[:, t + 1:] = rng.integers(0, cfg.t_max, w2.timesteps[:, t + 1:].shape)
            out = forward(w2, params, cfg).data
            worst = max(worst, float(np.abs(out[:, :t + 1] - base[:, :t + 1]).max()))
    return worst < 1e-10, f"max change of earlier predictions = {worst:.2e}"


def check_rtg_oracle(n: int = 200, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n):
        L = int(rng.integers(1, 51))
        r = rng.normal(size=L) * 5
        g = float(rng.uniform(0, 1))
        brute = np.array([sum(g ** (k - t) * r[k] for k in range(t, L)) for t in range(L)])
        worst = max(worst, float(np.abs(datagen.compute_rtg(r, g) - brute).max()))
    return worst < 1e-10, f"max |recursion - double sum| = {worst:.2e}"


def check_env_closed_form(seed: int = 0) -> tuple[bool, str]:
    env = EnvConfig(noise_std=0.0)
    rng = np.random.default_rng(seed)
    s0 = rng.normal(size=11)
    acts = rng.uniform(-1, 1, (50, 3))
    st = EnvState(s0.copy())
    C = envsim.default_coupling()
    worst = 0.0
    for t in range(50):
        st, _ = envsim.step(st, acts[t], env)
        closed = 0.9 ** (t + 1) * s0 + sum(0.9 ** (t - k) * 0.3 * (C @ acts[k]) for k in range(t + 1))
        worst = max(worst, float(np.abs(st.s - closed).max()))
    s1 = np.zeros(11)
    s1[0] = 1.0
    _, r1 = envsim.step(EnvState(s1), np.zeros(3), env)
    s2 = np.zeros(11)
    s2[0] = -10.0
    _, r2 = envsim.step(EnvState(s2), np.zeros(3), env)
    ok = worst < 1e-12 and r1 == 1.9 and r2 == -10.0
    return ok, f"max recursion error {worst:.2e}; r(s1=1) = {r1!r}; r(s1=-10) = {r2!r}"


def check_parameter_delta() -> tuple[bool, str]:
    d = variant_delta("q-attn", "standard", ModelConfig())
    d2 = variant_delta("quantum", "q-ff", ModelConfig())
    return d == d2 == EXPECTED_ENTANGLEMENT_DELTA, f"entanglement delta {d} (quantum - q-ff: {d2})"


def check_simplex(seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(100):
        w = gc.softmax(rng.normal(size=3) * 5).data
        if not ((w > 0) & (w < 1)).all():
            return False, f"weight outside (0, 1): {w}"
        worst = max(worst, abs(float(w.sum()) - 1.0))
    return worst < 1e-15, f"max |sum w - 1| = {worst:.2e}"


def all_checks(faults: dict | None = None) -> dict[str, Callable[[], tuple[bool, str]]]:
    return {
        "primitive gradients": check_primitive_gradients,
        "full-model gradient": check_model_gradient,
        "alpha=0 attention reduction": lambda: check_alpha_zero_reduction(faults=faults),
        "uniform interference reduction": check_uniform_interference,
        "interference weights on simplex": check_simplex,
        "causality": check_causality,
        "rtg oracle": check_rtg_oracle,
        "environment closed form": check_env_closed_form,
        "entanglement parameter delta": check_parameter_delta,
    }


def run(faults: dict | None = None, out=print) -> bool:
    results = []
    for name, fn in all_checks(faults).items():
        try:
            ok, detail = fn()
        except Exception as e:  # a crashing check counts as a failure
            ok, detail = False, f"{type(e).__name__}: {e}"
        ok = bool(ok)
        results.append((name, ok))
        out(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    failed = [n for n, ok in results if not ok]
    if failed:
        out(f"{len(failed)} check(s) failed: {', '.join(failed)}")
    else:
        out(f"all {len(results)} checks passed")
    return not failed

