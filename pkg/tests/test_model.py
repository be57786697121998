from math import erf, sqrt

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import tiny_model
from qdtlab import gradcore as gc
from qdtlab.model import (
    CheckpointError,
    ModelConfig,
    Window,
    attention,
    causal_mask,
    embed_window,
    feedforward,
    forward,
    init_params,
    interference_weights,
    load_checkpoint,
    param_count,
    save_checkpoint,
    state_token_index,
    variant_delta,
)

_erf = np.vectorize(erf)


def np_gelu(x):
    return x * 0.5 * (1 + _erf(x / sqrt(2)))


def np_ln(x, g, b):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * g + b


def P(params):
    return {k: v.data for k, v in params.items()}


def np_forward(w, p, cfg):
    """Plain-numpy forward for one unbatched window, one head per layer."""
    K = len(w.rtg[0])
    T = 3 * K
    rows = []
    for t in range(K):
        e_t = p["embed.timestep"][w.timesteps[0, t]]
        rows.append(p["embed.W_R"][:, 0] * w.rtg[0, t] + p["embed.b_R"] + e_t)
        rows.append(p["embed.W_s"] @ w.states[0, t] + p["embed.b_s"] + e_t)
        rows.append(p["embed.W_a"] @ w.actions[0, t] + p["embed.b_a"] + e_t)
    X = np.array(rows)
    for l in range(cfg.n_layers):
        a = f"layers.{l}.attn"
        q = X @ p[f"{a}.W_Q"].T + p[f"{a}.b_Q"]
        k = X @ p[f"{a}.W_K"].T + p[f"{a}.b_K"]
        v = X @ p[f"{a}.W_V"].T + p[f"{a}.b_V"]
        H = np.zeros_like(X)
        for i in range(T):
            s = np.array([q[i] @ k[j] / sqrt(cfg.d_model) for j in range(i + 1)])
            e = np.exp(s - s.max())
            H[i] = (e / e.sum()) @ v[: i + 1]
        if cfg.quantum_attention:
            H = H + cfg.entanglement_strength * (H @ p[f"{a}.W_E"].T + p[f"{a}.b_E"])
        att = H @ p[f"{a}.W_O"].T + p[f"{a}.b_O"]
        Z = np_ln(X + att, p[f"layers.{l}.ln1.gamma"], p[f"layers.{l}.ln1.beta"])
        n = cfg.n_channels if cfg.quantum_ff else 1
        chans = [np_gelu(Z @ p[f"layers.{l}.ff.{c}.W1"].T + p[f"layers.{l}.ff.{c}.b1"])
                 @ p[f"layers.{l}.ff.{c}.W2"].T + p[f"layers.{l}.ff.{c}.b2"] for c in range(n)]
        if cfg.quantum_ff:
            th = p[f"layers.{l}.ff.theta"]
            wts = np.exp(th) / np.exp(th).sum()
            ff = sum(wi * c for wi, c in zip(wts, chans))
        else:
            ff = chans[0]
        X = np_ln(Z + ff, p[f"layers.{l}.ln2.gamma"], p[f"layers.{l}.ln2.beta"])
    h = X[1::3]
    h = np_gelu(h @ p["head.W1"].T + p["head.b1"])
    h = np_gelu(h @ p["head.W2"].T + p["head.b2"])
    return np.tanh(h @ p["head.W3"].T + p["head.b3"])


def jitter(params, rng, scale=0.3):
    for v in params.values():
        v.data[...] = v.data + rng.normal(0, scale, v.shape)
    return params


def rand_window(rng, B, K, t_max=1000):
    return Window(rng.normal(size=(B, K)), rng.normal(size=(B, K, 11)),
                  rng.uniform(-1, 1, (B, K, 3)), rng.integers(0, t_max, (B, K)))


# --- counts ----------------------------------------------------------------

def test_entanglement_delta_is_49536():
    assert variant_delta("q-attn", "standard") == 49_536
    assert variant_delta("quantum", "q-ff") == 49_536


def test_qff_delta_closed_form():
    d, dff, L, n = 128, 512, 3, 3
    extra_channels = (n - 1) * L * (2 * d * dff + dff + d)
    assert extra_channels == 790_272
    # the interference logits add n per layer on top of the extra channels
    assert variant_delta("q-ff", "standard") == extra_channels + L * n == 790_281


def test_default_counts():
    counts = {v: param_count(ModelConfig(variant=v)) for v in ("standard", "quantum", "q-attn", "q-ff")}
    assert counts == {"standard": 758_531, "quantum": 1_598_348, "q-attn": 808_067, "q-ff": 1_548_812}


def test_variant_specific_parameters():
    std = init_params(ModelConfig(d_model=8, n_heads=2, variant="standard"))
    q = init_params(ModelConfig(d_model=8, n_heads=2, variant="quantum"))
    assert not any(k.endswith((".W_E", ".theta")) for k in std)
    assert any(k.endswith(".W_E") for k in q) and any(k.endswith(".theta") for k in q)


# --- init ------------------------------------------------------------------

def test_init_is_seeded_and_shaped():
    cfg = ModelConfig()
    a, b = init_params(cfg, 3), init_params(cfg, 3)
    assert all(np.array_equal(a[k].data, b[k].data) for k in a)
    w = a["layers.0.attn.W_Q"].data
    assert abs(w.std() - 0.02) < 0.002
    assert np.all(a["layers.0.ln1.gamma"].data == 1) and np.all(a["layers.0.attn.b_Q"].data == 0)
    for ws in interference_weights(a).values():
        np.testing.assert_allclose(ws, [1 / 3] * 3, rtol=0, atol=1e-15)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(variant="gold")


# --- embedding and mask -------------------------------------------------------

def test_zero_embedding_gives_zero_tokens():
    cfg = tiny_model(context_len=1)
    params = init_params(cfg)
    for k in ("embed.W_R", "embed.W_s", "embed.W_a", "embed.timestep"):
        params[k].data[...] = 0
    w = Window(np.zeros(1), np.zeros((1, 11)), np.zeros((1, 3)), np.zeros(1, dtype=int))
    out = embed_window(w, params, cfg).data
    assert out.shape == (1, 3, 8) and not out.any()


@pytest.mark.parametrize("K", [1, 7, 20])
def test_embedding_length(K, rng):
    cfg = tiny_model(context_len=K)
    assert embed_window(rand_window(rng, 2, K), init_params(cfg), cfg).shape == (2, 3 * K, 8)


def test_timestep_embedding_is_a_per_step_offset(rng):
    cfg = tiny_model(context_len=2)
    params = jitter(init_params(cfg), rng)
    s, a = rng.normal(size=11), rng.uniform(-1, 1, 3)
    w = Window(np.array([0.4, 0.4]), np.stack([s, s]), np.stack([a, a]), np.array([3, 9]))
    X = embed_window(w, params, cfg).data[0]
    diff = params["embed.timestep"].data[9] - params["embed.timestep"].data[3]
    for j in range(3):
        np.testing.assert_allclose(X[3 + j] - X[j], diff, atol=1e-14)


def test_timestep_out_of_range(rng):
    cfg = tiny_model(t_max=10)
    w = Window(np.zeros(3), np.zeros((3, 11)), np.zeros((3, 3)), np.array([0, 5, 10]))
    with pytest.raises(IndexError):
        forward(w, init_params(cfg), cfg)


def test_causal_mask_shape():
    assert causal_mask(1).tolist() == [[0.0]]
    m = causal_mask(6)
    assert [(row == 0).sum() for row in m] == [1, 2, 3, 4, 5, 6]


def test_forbidden_attention_mass_is_negligible(rng):
    logits = rng.uniform(-100, 100, (8, 8)) + causal_mask(8)
    A = gc.softmax(logits).data
    assert A[np.triu_indices(8, 1)].max() < 1e-30


# --- attention and feedforward ---------------------------------------------

def test_single_token_attention_oracle(rng):
    cfg = ModelConfig(d_model=8, n_heads=2, n_layers=1, variant="quantum", t_max=4)
    p = jitter(init_params(cfg), rng)
    x = rng.normal(size=8)
    out = attention(gc.Tensor(x[None, None]), causal_mask(1), p, "layers.0.attn", 2, 0.3).data[0, 0]
    q = P(p)
    I = np.eye(8)
    v = q["layers.0.attn.W_V"] @ x + q["layers.0.attn.b_V"]
    expected = q["layers.0.attn.W_O"] @ ((I + 0.3 * q["layers.0.attn.W_E"]) @ v + 0.3 * q["layers.0.attn.b_E"]) \
        + q["layers.0.attn.b_O"]
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-10)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 9))
def test_alpha_zero_matches_standard_attention(seed, T):
    r = np.random.default_rng(seed)
    cfg = ModelConfig(d_model=8, n_heads=2, n_layers=1, variant="quantum", t_max=4)
    p = jitter(init_params(cfg), r, 0.5)
    X = gc.Tensor(r.normal(size=(2, T, 8)))
    q = attention(X, causal_mask(T), p, "layers.0.attn", 2, 0.0).data
    s = attention(X, causal_mask(T), p, "layers.0.attn", 2, None).data
    assert np.abs(q - s).max() < 1e-12


def test_attention_rows_ignore_later_tokens(rng):
    cfg = ModelConfig(d_model=8, n_heads=2, n_layers=1, variant="quantum", t_max=4)
    p = jitter(init_params(cfg), rng)
    X = rng.normal(size=(1, 6, 8))
    base = attention(gc.Tensor(X), causal_mask(6), p, "layers.0.attn", 2, 0.3).data
    X[0, 4:] += 50 * rng.normal(size=(2, 8))
    out = attention(gc.Tensor(X), causal_mask(6), p, "layers.0.attn", 2, 0.3).data
    assert np.abs(out[0, :4] - base[0, :4]).max() < 1e-12


def _ff_setup(rng):
    cfg = ModelConfig(d_model=8, n_heads=2, n_layers=1, variant="q-ff", t_max=4)
    p = jitter(init_params(cfg), rng, 0.5)
    X = gc.Tensor(rng.normal(size=(2, 5, 8)))
    chans = [feedforward(X, {**p, "layers.0.ff.0.W1": p[f"layers.0.ff.{c}.W1"],
                             "layers.0.ff.0.b1": p[f"layers.0.ff.{c}.b1"],
                             "layers.0.ff.0.W2": p[f"layers.0.ff.{c}.W2"],
                             "layers.0.ff.0.b2": p[f"layers.0.ff.{c}.b2"]},
                         "layers.0.ff", 1, quantum=False).data for c in range(3)]
    return p, X, chans


def test_equal_logits_average_channels(rng):
    p, X, chans = _ff_setup(rng)
    p["layers.0.ff.theta"].data[...] = 1.7
    out = feedforward(X, p, "layers.0.ff", 3, quantum=True).data
    assert np.abs(out - np.mean(chans, axis=0)).max() < 1e-12


def test_dominant_logit_selects_channel(rng):
    p, X, chans = _ff_setup(rng)
    p["layers.0.ff.theta"].data[...] = [40.0, 0.0, 0.0]
    out = feedforward(X, p, "layers.0.ff", 3, quantum=True).data
    assert np.abs(out - chans[0]).max() < 1e-10


@settings(max_examples=100, deadline=None)
# beyond a logit spread of about 36 the largest weight rounds to exactly 1.0 in float64
@given(st.lists(st.floats(-10, 10), min_size=3, max_size=3))
def test_interference_weights_on_simplex(theta):
    w = gc.softmax(np.array(theta)).data
    assert np.all((w > 0) & (w < 1)) and abs(w.sum() - 1) < 1e-15


# --- full forward ----------------------------------------------------------

@pytest.mark.parametrize("variant", ["standard", "quantum", "q-attn", "q-ff"])
def test_forward_matches_numpy_oracle(variant, rng):
    cfg = ModelConfig(d_model=8, n_heads=1, n_layers=1, context_len=1, t_max=10, variant=variant)
    p = jitter(init_params(cfg), rng, 0.2)
    w = rand_window(rng, 1, 1, 10)
    np.testing.assert_allclose(forward(w, p, cfg).data[0], np_forward(w, P(p), cfg), rtol=0, atol=1e-9)


def test_forward_matches_numpy_oracle_multi_step(rng):
    cfg = ModelConfig(d_model=8, n_heads=1, n_layers=2, context_len=4, t_max=10, variant="quantum")
    p = jitter(init_params(cfg), rng, 0.2)
    w = rand_window(rng, 1, 4, 10)
    np.testing.assert_allclose(forward(w, p, cfg).data[0], np_forward(w, P(p), cfg), rtol=0, atol=1e-9)


def test_outputs_strictly_inside_unit_box(rng):
    cfg = tiny_model(context_len=4)
    # float64 tanh rounds to exactly 1.0 past |x| of about 19, so keep weights moderate
    for _ in range(50):
        p = jitter(init_params(cfg, int(rng.integers(1000))), rng, 0.3)
        out = forward(rand_window(rng, 2, 4), p, cfg).data
        assert np.all(np.abs(out) < 1)


@pytest.mark.parametrize("variant", ["standard", "quantum"])
def test_prediction_ignores_later_steps_and_own_action(variant, rng):
    cfg = ModelConfig(d_model=16, n_heads=4, n_layers=2, context_len=5, t_max=50, variant=variant)
    p = jitter(init_params(cfg), rng, 0.2)
    for t in range(5):
        w = rand_window(rng, 1, 5, 50)
        base = forward(w, p, cfg).data
        w.rtg[:, t + 1:] = rng.normal(size=(1, 4 - t)) * 9
        w.states[:, t + 1:] = rng.normal(size=(1, 4 - t, 11)) * 9
        w.actions[:, t:] = rng.uniform(-1, 1, (1, 5 - t, 3))
        w.timesteps[:, t + 1:] = rng.integers(0, 50, (1, 4 - t))
        out = forward(w, p, cfg).data
        assert np.abs(out[:, : t + 1] - base[:, : t + 1]).max() < 1e-10


def test_head_reads_state_tokens_only(rng):
    cfg = tiny_model(context_len=4)
    p = init_params(cfg)
    pred, X = forward(rand_window(rng, 2, 4), p, cfg, return_hidden=True)
    X.retain_grad()
    gc.backward(gc.sum(pred))
    touched = np.flatnonzero(np.abs(X.grad).sum(axis=(0, 2)))
    np.testing.assert_array_equal(touched, state_token_index(4))
    np.testing.assert_array_equal(state_token_index(4), [1, 4, 7, 10])


def test_forward_is_deterministic(rng):
    cfg = tiny_model()
    p = jitter(init_params(cfg), rng)
    w = rand_window(rng, 3, 3)
    assert np.array_equal(forward(w, p, cfg).data, forward(w, p, cfg).data)


def test_full_model_gradient_check(rng):
    cfg = tiny_model(t_max=6)
    p = jitter(init_params(cfg), rng)
    w = rand_window(rng, 2, 3, 6)
    target = rng.uniform(-1, 1, (2, 3, 3))
    names = list(p)
    err = gc.grad_check(lambda *ts: gc.mse(forward(w, dict(zip(names, ts)), cfg), target),
                        [p[n].data for n in names])
    assert err < 1e-4


# --- checkpoints -----------------------------------------------------------

def test_checkpoint_round_trip(tmp_path, rng):
    cfg = tiny_model(variant="q-attn")
    p = jitter(init_params(cfg), rng)
    path = save_checkpoint(tmp_path / "m.ckpt", p, cfg, {"final_loss": 0.5})
    q, cfg2, extra = load_checkpoint(path)
    assert cfg2 == cfg and extra == {"final_loss": 0.5}
    assert list(q) == list(p) and all(np.array_equal(q[k].data, p[k].data) for k in p)


def test_checkpoint_corruption_detected(tmp_path):
    cfg = tiny_model()
    path = save_checkpoint(tmp_path / "m.ckpt", init_params(cfg), cfg)
    blob = bytearray(path.read_bytes())
    blob[100] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="checksum"):
        load_checkpoint(path)
    path.write_bytes(b"garbage" * 10)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)
