"""Parameter initialization, counting and checkpoint files.

Parameter names (``l`` is the layer index)::

    embed                       (vocab, C)   tied with the output head
    ln_f.w, ln_f.b              (C,)
    layers.l.ln1.w / .b         (C,)
    layers.l.wq / wk / wv / wo  (C, C)       applied as ``x @ W``
    layers.l.ln2.w / .b         (C,)
    layers.l.ffn.w1 (C, 4C), ffn.b1 (4C,), ffn.w2 (4C, C), ffn.b2 (C,)
    layers.l.pos.w1 / pos.w2    (H, I) shared, (H, M, L, I) full, (H, R, I) ablation
    layers.l.psi.w1 (C, I), psi.b1 (I,), psi.w2 (I, I), psi.b2 (I,)
    layers.l.phi.u              (B, L)       only with the bilinear phi

The rotary baseline variant has no ``pos.*``, ``psi.*`` or ``phi.*`` entries.
"""
from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from ..numcore.io import load_archive, save_archive
from ..numcore.rng import Rng
from .config import ConfigError, ModelConfig


def _pos_shape(cfg: ModelConfig) -> tuple[int, ...]:
    if not cfg.rotation_equivariant:
        return (cfg.heads, cfg.R, cfg.inter)
    if cfg.shared_mlp:
        return (cfg.heads, cfg.inter)
    return (cfg.heads, cfg.blocks, cfg.L, cfg.inter)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    c, f, i = cfg.dim, cfg.ffn_mult * cfg.dim, cfg.inter
    shapes: dict[str, tuple[int, ...]] = {"embed": (cfg.vocab, c)}
    for layer in range(cfg.depth):
        p = f"layers.{layer}."
        shapes.update({
            p + "ln1.w": (c,), p + "ln1.b": (c,),
            p + "wq": (c, c), p + "wk": (c, c), p + "wv": (c, c), p + "wo": (c, c),
            p + "ln2.w": (c,), p + "ln2.b": (c,),
            p + "ffn.w1": (c, f), p + "ffn.b1": (f,), p + "ffn.w2": (f, c), p + "ffn.b2": (c,),
        })
        if cfg.variant == "tape":
            shapes.update({
                p + "pos.w1": _pos_shape(cfg), p + "pos.w2": _pos_shape(cfg),
                p + "psi.w1": (c, i), p + "psi.b1": (i,), p + "psi.w2": (i, i), p + "psi.b2": (i,),
            })
            if cfg.phi == "bilinear":
                shapes[p + "phi.u"] = (cfg.B, cfg.L)
    shapes["ln_f.w"] = (c,)
    shapes["ln_f.b"] = (c,)
    return shapes


def init_params(cfg: ModelConfig, rng: Rng | None = None) -> dict[str, np.ndarray]:
    """Gaussian init (std ``init_std``); output projections scaled by 1/sqrt(2 depth)."""
    rng = rng or Rng(cfg.seed, 0)
    out_scale = 1.0 / math.sqrt(2 * max(cfg.depth, 1))
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.endswith(("ln1.w", "ln2.w", "ln_f.w")):
            params[name] = np.ones(shape)
        elif leaf.startswith("b") and len(shape) == 1 and not name.endswith("phi.u"):
            params[name] = np.zeros(shape)
        elif name.endswith("pos.w2") and cfg.zero_init_w2:
            params[name] = np.zeros(shape)
        elif name.endswith("phi.u"):
            params[name] = np.eye(*shape) + rng.normal(shape, cfg.init_std)
        else:
            std = cfg.init_std
            if name.endswith(("wo", "ffn.w2")):
                std *= out_scale
            params[name] = rng.normal(shape, std)
    return params


def count_params(cfg: ModelConfig) -> int:
    return sum(int(np.prod(s)) for s in param_shapes(cfg).values())


def added_params(cfg: ModelConfig) -> int:
    """Parameters TAPE adds on top of the same-size rotary transformer."""
    return count_params(cfg.replace(variant="tape")) - count_params(cfg.replace(variant="rope"))


def added_params_formula(cfg: ModelConfig) -> int:
    """Closed form: per layer ``2 |W| + psi`` (+ the bilinear phi when enabled)."""
    i, c = cfg.inter, cfg.dim
    w = int(np.prod(_pos_shape(cfg)))
    psi = c * i + i + i * i + i
    phi = cfg.B * cfg.L if cfg.phi == "bilinear" else 0
    return cfg.depth * (2 * w + psi + phi)


def check_params(cfg: ModelConfig, params: Mapping[str, np.ndarray]) -> None:
    expected = param_shapes(cfg)
    missing = set(expected) - set(params)
    extra = set(params) - set(expected)
    if missing or extra:
        raise ConfigError(f"parameter names mismatch: missing={sorted(missing)} extra={sorted(extra)}")
    for k, s in expected.items():
        if tuple(params[k].shape) != s:
            raise ConfigError(f"parameter {k} has shape {params[k].shape}, expected {s}")


def save_checkpoint(path, cfg: ModelConfig, params: Mapping[str, np.ndarray], extra: Mapping[str, str] | None = None) -> None:
    header = {f"model.{k}": str(v) for k, v in cfg.to_dict().items()}
    header.update(extra or {})
    save_archive(path, {k: np.asarray(v) for k, v in params.items()}, header)


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, np.ndarray], dict[str, str]]:
    tensors, header = load_archive(path)
    model_keys = {k[len("model."):]: v for k, v in header.items() if k.startswith("model.")}
    cfg = ModelConfig.from_dict(model_keys)
    params = {k: v for k, v in tensors.items() if not k.startswith("state.")}
    check_params(cfg, params)
    return cfg, params, header
