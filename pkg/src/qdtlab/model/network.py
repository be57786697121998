"""Decision Transformer forward pass with switchable attention / feedforward kinds."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .. import gradcore as gc
from ..gradcore import Tensor
from .config import ModelConfig

MASK_VALUE = -1e9


@dataclass
class Window:
    """A batch of K-step context windows (raw arrays, already normalised).

    Shapes: rtg [B, K], states [B, K, S], actions [B, K, A], timesteps [B, K]
    (int), valid [B, K] (bool).  Padded steps are zero with timestep 0.
    """

    rtg: np.ndarray
    states: np.ndarray
    actions: np.ndarray
    timesteps: np.ndarray
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.rtg = np.asarray(self.rtg, dtype=np.float64)
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.timesteps = np.asarray(self.timesteps, dtype=np.int64)
        if self.rtg.ndim == 1:  # unbatched
            self.rtg = self.rtg[None]
            self.states = self.states[None]
            self.actions = self.actions[None]
            self.timesteps = self.timesteps[None]
            if self.valid is not None:
                self.valid = np.asarray(self.valid)[None]
        if self.valid is None:
            self.valid = np.ones(self.rtg.shape, dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        B, K = self.rtg.shape
        if (self.states.shape[:2] != (B, K) or self.actions.shape[:2] != (B, K)
                or self.timesteps.shape != (B, K) or self.valid.shape != (B, K)):
            raise gc.DimensionError("window", self.rtg.shape, self.states.shape,
                                    self.actions.shape, self.timesteps.shape)

    @property
    def batch_size(self) -> int:
        return self.rtg.shape[0]

    @property
    def length(self) -> int:
        return self.rtg.shape[1]


def causal_mask(seq_len: int) -> np.ndarray:
    """Additive mask: 0 where j <= i, -1e9 above the diagonal."""
    if seq_len < 1:
        raise ValueError("seq_len must be >= 1")
    allowed = np.tril(np.ones((seq_len, seq_len), dtype=bool))
    return np.where(allowed, 0.0, MASK_VALUE)


def embed_window(window: Window, params, config: ModelConfig) -> Tensor:
    """Interleave (R, s, a) token embeddings into a [B, 3K, d] sequence."""
    B, K = window.rtg.shape
    if window.timesteps.size and window.timesteps.max() >= config.t_max:
        raise IndexError(f"timestep {int(window.timesteps.max())} >= t_max={config.t_max}")
    d = config.d_model
    e_t = gc.embedding(params["embed.timestep"], window.timesteps)
    e_R = gc.linear(window.rtg[..., None], params["embed.W_R"], params["embed.b_R"])
    e_s = gc.linear(window.states, params["embed.W_s"], params["embed.b_s"])
    e_a = gc.linear(window.actions, params["embed.W_a"], params["embed.b_a"])
    toks = [gc.reshape(gc.add(e, e_t), (B, K, 1, d)) for e in (e_R, e_s, e_a)]
    return gc.reshape(gc.concat(toks, axis=2), (B, 3 * K, d))


def _split_heads(x: Tensor, n_heads: int) -> Tensor:
    B, T, d = x.shape
    return gc.permute(gc.reshape(x, (B, T, n_heads, d // n_heads)), (0, 2, 1, 3))


def attention(X: Tensor, mask: np.ndarray, params, prefix: str, n_heads: int,
              alpha: float | None) -> Tensor:
    """Multi-head causal attention; ``alpha`` set enables the entanglement mix.

    H_ent = H + alpha * (W_E H + b_E), then the output projection.  With
    ``alpha=None`` the mix is skipped entirely (the standard block).
    """
    B, T, d = X.shape
    if d % n_heads:
        raise gc.DimensionError("attention", X.shape, (n_heads,))
    if mask.shape != (T, T):
        raise gc.DimensionError("attention", X.shape, mask.shape)
    q = _split_heads(gc.linear(X, params[f"{prefix}.W_Q"], params[f"{prefix}.b_Q"]), n_heads)
    k = _split_heads(gc.linear(X, params[f"{prefix}.W_K"], params[f"{prefix}.b_K"]), n_heads)
    v = _split_heads(gc.linear(X, params[f"{prefix}.W_V"], params[f"{prefix}.b_V"]), n_heads)
    scores = gc.scale(gc.matmul(q, gc.transpose(k)), 1.0 / math.sqrt(d // n_heads))
    A = gc.softmax(gc.add(scores, mask))
    H = gc.reshape(gc.permute(gc.matmul(A, v), (0, 2, 1, 3)), (B, T, d))
    if alpha is not None:
        E = gc.linear(H, params[f"{prefix}.W_E"], params[f"{prefix}.b_E"])
        H = gc.add(H, gc.scale(E, alpha))
    return gc.linear(H, params[f"{prefix}.W_O"], params[f"{prefix}.b_O"])


def channel(X: Tensor, params, prefix: str) -> Tensor:
    h = gc.gelu(gc.linear(X, params[f"{prefix}.W1"], params[f"{prefix}.b1"]))
    return gc.linear(h, params[f"{prefix}.W2"], params[f"{prefix}.b2"])


def feedforward(X: Tensor, params, prefix: str, n_channels: int, quantum: bool) -> Tensor:
    """Single channel, or softmax(theta)-weighted sum of parallel channels."""
    if not quantum:
        return channel(X, params, f"{prefix}.0")
    outs = [channel(X, params, f"{prefix}.{c}") for c in range(n_channels)]
    w = gc.softmax(params[f"{prefix}.theta"])
    return gc.weighted_sum(outs, w)


def block(X: Tensor, mask, params, layer: int, config: ModelConfig,
          attention_alpha: float | None = None) -> Tensor:
    p = f"layers.{layer}"
    if attention_alpha is None and config.quantum_attention:
        attention_alpha = config.entanglement_strength
    att = attention(X, mask, params, f"{p}.attn", config.n_heads, attention_alpha)
    Z = gc.layer_norm(gc.add(X, att), params[f"{p}.ln1.gamma"], params[f"{p}.ln1.beta"])
    ff = feedforward(Z, params, f"{p}.ff", config.n_channels, config.quantum_ff)
    return gc.layer_norm(gc.add(Z, ff), params[f"{p}.ln2.gamma"], params[f"{p}.ln2.beta"])


def state_token_index(K: int) -> np.ndarray:
    """Positions 1, 4, 7, ... of the state tokens in the interleaved sequence."""
    return np.arange(1, 3 * K, 3)


def action_head(h: Tensor, params) -> Tensor:
    z = gc.gelu(gc.linear(h, params["head.W1"], params["head.b1"]))
    z = gc.gelu(gc.linear(z, params["head.W2"], params["head.b2"]))
    return gc.tanh(gc.linear(z, params["head.W3"], params["head.b3"]))


def forward(window: Window, params, config: ModelConfig, return_hidden: bool = False):
    """Predicted actions [B, K, action_dim] for a batch of windows.

    With ``return_hidden`` also returns the final-layer token sequence.
    """
    if not isinstance(window, Window):
        window = Window(*window)
    K = window.length
    X = embed_window(window, params, config)
    mask = causal_mask(3 * K)
    for l in range(config.n_layers):
        X = block(X, mask, params, l, config)
    h = gc.take(X, state_token_index(K), axis=1)
    pred = action_head(h, params)
    return (pred, X) if return_hidden else pred
