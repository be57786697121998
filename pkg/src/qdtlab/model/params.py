"""Parameter sets, initialisation, counting and the binary checkpoint container."""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from ..gradcore import Tensor
from .config import ModelConfig, ModelVariant

INIT_STD = 0.02

CKPT_MAGIC = b"QDTCKPT\0"
CKPT_VERSION = 1


def param_shapes(config: ModelConfig) -> dict[str, tuple]:
    """Ordered name -> shape map; weights are stored [out, in]."""
    d, dff = config.d_model, config.d_ff
    shapes = {
        "embed.W_R": (d, 1), "embed.b_R": (d,),
        "embed.W_s": (d, config.state_dim), "embed.b_s": (d,),
        "embed.W_a": (d, config.action_dim), "embed.b_a": (d,),
        "embed.timestep": (config.t_max, d),
    }
    n_ch = config.n_channels if config.quantum_ff else 1
    for l in range(config.n_layers):
        p = f"layers.{l}"
        for m in ("Q", "K", "V", "O"):
            shapes[f"{p}.attn.W_{m}"] = (d, d)
            shapes[f"{p}.attn.b_{m}"] = (d,)
        if config.quantum_attention:
            shapes[f"{p}.attn.W_E"] = (d, d)
            shapes[f"{p}.attn.b_E"] = (d,)
        for c in range(n_ch):
            shapes[f"{p}.ff.{c}.W1"] = (dff, d)
            shapes[f"{p}.ff.{c}.b1"] = (dff,)
            shapes[f"{p}.ff.{c}.W2"] = (d, dff)
            shapes[f"{p}.ff.{c}.b2"] = (d,)
        if config.quantum_ff:
            shapes[f"{p}.ff.theta"] = (config.n_channels,)
        for ln in ("ln1", "ln2"):
            shapes[f"{p}.{ln}.gamma"] = (d,)
            shapes[f"{p}.{ln}.beta"] = (d,)
    shapes.update({
        "head.W1": (d, d), "head.b1": (d,),
        "head.W2": (d, d), "head.b2": (d,),
        "head.W3": (config.action_dim, d), "head.b3": (config.action_dim,),
    })
    return shapes


def param_kind(name: str) -> str:
    """One of 'weight', 'bias', 'norm', 'interference' (drives weight decay)."""
    leaf = name.rsplit(".", 1)[-1]
    if leaf == "theta":
        return "interference"
    if leaf in ("gamma", "beta"):
        return "norm"
    if leaf.startswith("b"):
        return "bias"
    return "weight"


def init_params(config: ModelConfig, seed: int = 42) -> dict[str, Tensor]:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        kind = param_kind(name)
        if kind == "weight":
            data = rng.normal(0.0, INIT_STD, shape)
        elif name.endswith(".gamma"):
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


def param_count(params) -> int:
    if isinstance(params, ModelConfig):
        return sum(int(np.prod(s)) for s in param_shapes(params).values())
    return sum(p.size for p in params.values())


def variant_delta(variant_a, variant_b, config: ModelConfig | None = None) -> int:
    """count(variant_a) - count(variant_b) under otherwise identical config."""
    config = config or ModelConfig()
    return (param_count(config.with_variant(variant_a))
            - param_count(config.with_variant(variant_b)))


def interference_weights(params) -> dict[str, list]:
    out = {}
    for name, p in params.items():
        if name.endswith(".ff.theta"):
            th = p.data - p.data.max()
            w = np.exp(th) / np.exp(th).sum()
            out[name.rsplit(".ff.theta", 1)[0]] = w.tolist()
    return out


def clone_params(params) -> dict[str, Tensor]:
    return {k: Tensor(v.data, requires_grad=True, name=k) for k, v in params.items()}


# --- checkpoint container ------------------------------------------------
#
# magic(8) | version u32 | config-json length u32 | config json |
# tensor count u32 | per tensor: name length u16, name, ndim u8, dims u64*,
# float64 little-endian data | sha256 of everything before it (32 bytes)

class CheckpointError(ValueError):
    pass


def save_checkpoint(path, params, config: ModelConfig, extra: dict | None = None) -> Path:
    path = Path(path)
    meta = json.dumps({"model": config.to_dict(), "extra": extra or {}}, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(meta)), meta,
             struct.pack("<I", len(params))]
    for name, t in params.items():
        nb = name.encode()
        parts.append(struct.pack("<HB", len(nb), t.ndim) + nb)
        parts.append(struct.pack(f"<{t.ndim}Q", *t.shape))
        parts.append(np.ascontiguousarray(t.data, dtype="<f8").tobytes())
    body = b"".join(parts)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(body + hashlib.sha256(body).digest())
    return path


def load_checkpoint(path) -> tuple[dict[str, Tensor], ModelConfig, dict]:
    blob = Path(path).read_bytes()
    if len(blob) < 48 or blob[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError(f"{path}: checksum mismatch")
    version, mlen = struct.unpack_from("<II", body, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    pos = 16
    meta = json.loads(body[pos:pos + mlen])
    pos += mlen
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    params = {}
    for _ in range(count):
        nlen, ndim = struct.unpack_from("<HB", body, pos)
        pos += 3
        name = body[pos:pos + nlen].decode()
        pos += nlen
        shape = struct.unpack_from(f"<{ndim}Q", body, pos)
        pos += 8 * ndim
        n = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(body, dtype="<f8", count=n, offset=pos).reshape(shape)
        pos += 8 * n
        params[name] = Tensor(data.astype(np.float64), requires_grad=True, name=name)
    if pos != len(body):
        raise CheckpointError(f"{path}: trailing bytes after tensor records")
    config = ModelConfig.from_dict(meta["model"])
    expected = param_shapes(config)
    if list(expected) != list(params) or any(params[k].shape != v for k, v in expected.items()):
        raise CheckpointError(f"{path}: tensors do not match the stored model config")
    return params, config, meta.get("extra", {})


__all__ = [
    "ModelVariant", "init_params", "param_count", "param_shapes", "param_kind",
    "variant_delta", "interference_weights", "save_checkpoint", "load_checkpoint",
    "CheckpointError", "clone_params",
]
