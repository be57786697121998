from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field, replace

from ..envsim import ACTION_DIM, STATE_DIM


class Kind(str, enum.Enum):
    STANDARD = "standard"
    QUANTUM = "quantum"


@dataclass(frozen=True)
class ModelVariant:
    attention_kind: Kind = Kind.QUANTUM
    ff_kind: Kind = Kind.QUANTUM

    def __post_init__(self):
        object.__setattr__(self, "attention_kind", Kind(self.attention_kind))
        object.__setattr__(self, "ff_kind", Kind(self.ff_kind))

    @property
    def key(self) -> str:
        return _KEYS[(self.attention_kind, self.ff_kind)]

    @property
    def display_name(self) -> str:
        return DISPLAY_NAMES[self.key]

    @classmethod
    def from_key(cls, key: str) -> "ModelVariant":
        for (att, ff), k in _KEYS.items():
            if k == key:
                return cls(att, ff)
        raise ValueError(f"unknown variant {key!r}; expected one of {', '.join(VARIANT_KEYS)}")


_KEYS = {
    (Kind.STANDARD, Kind.STANDARD): "standard",
    (Kind.QUANTUM, Kind.QUANTUM): "quantum",
    (Kind.QUANTUM, Kind.STANDARD): "q-attn",
    (Kind.STANDARD, Kind.QUANTUM): "q-ff",
}
VARIANT_KEYS = ("standard", "quantum", "q-attn", "q-ff")
DISPLAY_NAMES = {
    "standard": "Standard DT",
    "quantum": "Quantum DT",
    "q-attn": "DT + Q-Attention",
    "q-ff": "DT + Q-FF",
}


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_layers: int = 3
    n_heads: int = 4
    context_len: int = 20
    d_ff: int | None = None
    entanglement_strength: float = 0.3
    n_channels: int = 3
    t_max: int = 1000
    state_dim: int = STATE_DIM
    action_dim: int = ACTION_DIM
    variant: ModelVariant = field(default_factory=ModelVariant)

    def __post_init__(self):
        if self.d_ff is None:
            object.__setattr__(self, "d_ff", 4 * self.d_model)
        if isinstance(self.variant, str):
            object.__setattr__(self, "variant", ModelVariant.from_key(self.variant))
        elif isinstance(self.variant, dict):
            object.__setattr__(self, "variant", ModelVariant(**self.variant))
        if self.d_model % self.n_heads:
            raise ValueError(f"d_model={self.d_model} is not divisible by n_heads={self.n_heads}")
        if self.entanglement_strength < 0:
            raise ValueError("entanglement_strength must be >= 0")
        if self.n_channels < 1 or self.context_len < 1 or self.n_layers < 1 or self.t_max < 1:
            raise ValueError("n_channels, context_len, n_layers and t_max must all be >= 1")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    @property
    def quantum_attention(self) -> bool:
        return self.variant.attention_kind is Kind.QUANTUM

    @property
    def quantum_ff(self) -> bool:
        return self.variant.ff_kind is Kind.QUANTUM

    def with_variant(self, variant) -> "ModelConfig":
        if isinstance(variant, str):
            variant = ModelVariant.from_key(variant)
        return replace(self, variant=variant)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.key
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)
