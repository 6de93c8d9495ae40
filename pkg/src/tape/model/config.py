from __future__ import annotations

import dataclasses
from dataclasses import dataclass


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Hyperparameters of a TAPE (or rotary baseline) decoder.

    ``blocks`` (M) defaults to ``dim / (heads * L)`` so that the per-block
    channel count B equals L, which the identity ``phi`` requires. ``inter``
    (I) defaults to ``4 * heads``.
    """

    vocab: int = 16
    n_ctx: int = 64
    dim: int = 128
    heads: int = 2
    depth: int = 2
    L: int = 2
    R: int = 2
    blocks: int | None = None
    inter: int | None = None
    ffn_mult: int = 4
    variant: str = "tape"  # "tape" | "rope" (classical rotary baseline, no PE path)
    pe_init: str = "rope"  # "rope" | "fourier"
    phi: str = "identity"  # "identity" | "bilinear"
    attn_path: bool = True
    mlp_path: bool = True
    pos_attn_residual: bool = False
    shared_mlp: bool = True
    rotation_equivariant: bool = True
    zero_init_w2: bool = False
    rope_base: float = 10000.0
    theta_sign: float = -1.0
    fourier_freq_std: float = 1.0
    init_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.blocks is None:
            if self.dim % (self.heads * self.L):
                raise ConfigError(f"dim {self.dim} not divisible by heads*L = {self.heads * self.L}")
            object.__setattr__(self, "blocks", self.dim // (self.heads * self.L))
        if self.inter is None:
            object.__setattr__(self, "inter", 4 * self.heads)
        if min(self.vocab, self.n_ctx, self.dim, self.heads, self.L, self.R, self.blocks, self.inter) < 1:
            raise ConfigError("all model dimensions must be positive")
        if self.depth < 0:
            raise ConfigError("depth must be non-negative")
        if self.dim % (self.heads * self.blocks):
            raise ConfigError(f"dim {self.dim} not divisible by heads*blocks = {self.heads * self.blocks}")
        if self.variant not in ("tape", "rope"):
            raise ConfigError(f"unknown variant {self.variant!r}")
        if self.pe_init not in ("rope", "fourier"):
            raise ConfigError(f"unknown pe_init {self.pe_init!r}")
        if self.phi not in ("identity", "bilinear"):
            raise ConfigError(f"unknown phi {self.phi!r}")
        if self.phi == "identity" and self.B != self.L:
            raise ConfigError(f"identity phi needs B == L, got B={self.B}, L={self.L}")
        if self.pe_init == "rope" and (self.L, self.R) != (2, 2):
            raise ConfigError("rotary initialization needs L = R = 2")
        if self.pe_init == "fourier" and self.R % 2:
            raise ConfigError(f"Fourier initialization needs even R, got {self.R}")
        if self.variant == "rope" and self.head_dim % 2:
            raise ConfigError("rotary baseline needs an even head dimension")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    @property
    def B(self) -> int:
        return self.dim // (self.heads * self.blocks)

    def replace(self, **changes) -> "ModelConfig":
        if "heads" in changes or "dim" in changes or "L" in changes:
            changes.setdefault("blocks", None)
        if "heads" in changes:
            changes.setdefault("inter", None)
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for k, v in d.items():
            if k not in fields:
                raise ConfigError(f"unknown model config key {k!r}")
            kwargs[k] = _coerce(v, fields[k].type)
        return cls(**kwargs)


def _coerce(value, type_name: str):
    if not isinstance(value, str):
        return value
    t = str(type_name)
    if value in ("None", ""):
        return None
    if t.startswith("bool"):
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    if t.startswith("int"):
        return int(value)
    if t.startswith("float"):
        return float(value)
    return value
