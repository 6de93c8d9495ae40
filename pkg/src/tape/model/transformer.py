"""Decoder-only stack: embedding, TAPE (or rotary) layers, final norm, tied head."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from ..numcore import tensor as T
from ..numcore.rng import Rng
from ..numcore.tensor import Tensor, as_tensor, no_grad
from ..posenc import FourierSchedule, PosTensor, RopeSchedule, fourier_init, rope_init
from .config import ConfigError, ModelConfig
from .layers import causal_mask, rope_block, tape_block
from .params import init_params

FOURIER_STREAM = 7  # rng stream reserved for sampling Fourier frequencies


class ContextLengthError(ValueError):
    pass


def layer_params(params: Mapping, layer: int) -> dict:
    prefix = f"layers.{layer}."
    return {k[len(prefix):]: v for k, v in params.items() if k.startswith(prefix)}


def pe_schedule(cfg: ModelConfig):
    if cfg.pe_init == "rope":
        return RopeSchedule(cfg.blocks, cfg.head_dim, cfg.rope_base, cfg.theta_sign)
    return FourierSchedule.sample(cfg.blocks, cfg.L, cfg.R, Rng(cfg.seed, FOURIER_STREAM), cfg.fourier_freq_std)


def initial_pe(cfg: ModelConfig, positions, schedule=None) -> PosTensor:
    schedule = schedule if schedule is not None else pe_schedule(cfg)
    if isinstance(schedule, RopeSchedule):
        return rope_init(positions, cfg.heads, schedule)
    return fourier_init(positions, cfg.heads, schedule)


def _prepare(tokens, cfg: ModelConfig, positions, mask):
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None]
    if tokens.ndim != 2:
        raise ValueError(f"tokens must be (N,) or (batch, N), got shape {tokens.shape}")
    n = tokens.shape[1]
    if n > cfg.n_ctx:
        raise ContextLengthError(f"sequence length {n} exceeds context {cfg.n_ctx}")
    if n == 0:
        raise ValueError("empty token sequence")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab:
        raise ValueError(f"token ids must lie in [0, {cfg.vocab})")
    positions = np.arange(n, dtype=np.float64) if positions is None else np.asarray(positions, dtype=np.float64)
    if positions.shape != (n,):
        raise ValueError(f"positions must have shape ({n},), got {positions.shape}")
    mask = causal_mask(n) if mask is None else np.asarray(mask)
    return tokens, positions, mask


def forward(params: Mapping, tokens, cfg: ModelConfig, positions=None, mask=None,
            schedule=None, return_states: bool = False):
    """Differentiable forward pass; ``params`` values may be Tensors or arrays.

    Returns logits (batch, N, vocab) as a Tensor, plus the per-layer ``(X, E)``
    states (E is ``None`` for the rotary baseline) when ``return_states``.
    """
    tokens, positions, mask = _prepare(tokens, cfg, positions, mask)
    X = T.embedding(params["embed"], tokens)
    E = None
    if cfg.variant == "tape":
        E = as_tensor(initial_pe(cfg, positions, schedule).values[None])
    states = [(X, E)]
    for layer in range(cfg.depth):
        p = layer_params(params, layer)
        if cfg.variant == "tape":
            X, E = tape_block(X, E, mask, p, cfg)
        else:
            X = rope_block(X, positions, mask, p, cfg)
        states.append((X, E))
    h = T.layer_norm(X, params["ln_f.w"], params["ln_f.b"])
    logits = h @ T.transpose(as_tensor(params["embed"]), (1, 0))
    return (logits, states) if return_states else logits


def model_forward(tokens, cfg: ModelConfig, params: Mapping, positions=None, mask=None,
                  schedule=None, return_states: bool = False):
    """Plain-array forward: logits (batch, N, vocab) for (batch, N) tokens, (N, vocab) for (N,)."""
    single = np.asarray(tokens).ndim == 1
    with no_grad():
        out = forward(params, tokens, cfg, positions, mask, schedule, return_states)
    logits, states = out if return_states else (out, None)
    logits = logits.data[0] if single else logits.data
    if not return_states:
        return logits
    arr = [(x.data, None if e is None else e.data) for x, e in states]
    return logits, arr


@dataclass
class TapeModel:
    """Config plus parameters; the PE schedule is rebuilt from ``cfg.seed``."""

    cfg: ModelConfig
    params: dict = field(default_factory=dict)

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int | None = None) -> "TapeModel":
        if seed is not None:
            cfg = cfg.replace(seed=seed)
        return cls(cfg, init_params(cfg, Rng(cfg.seed, 0)))

    @property
    def schedule(self):
        return pe_schedule(self.cfg)

    def __call__(self, tokens, positions=None, mask=None):
        return model_forward(tokens, self.cfg, self.params, positions, mask)

    def states(self, tokens, positions=None, mask=None):
        return model_forward(tokens, self.cfg, self.params, positions, mask, return_states=True)

    def initial_pe(self, positions) -> PosTensor:
        return initial_pe(self.cfg, positions)


def rope_attention_baseline(X, mask, W_Q, W_K, schedule, heads: int, positions=None) -> np.ndarray:
    """Classical rotary attention logits (N, N, heads), scaled by 1/sqrt(head_dim).

    Channel pairs ``(2m, 2m+1)`` of each head are read as complex numbers and
    multiplied by ``exp(1j * w_m * pos)``; ``w`` comes from ``schedule`` (a
    RopeSchedule, whose magnitudes are used, or an array of frequencies).
    Masked entries are ``-inf``.
    """
    X = np.asarray(X, dtype=np.float64)
    n, c = X.shape
    d = c // heads
    if c % heads or d % 2:
        raise ConfigError(f"rotary baseline needs an even head dimension, got C={c}, H={heads}")
    w = schedule.magnitudes if isinstance(schedule, RopeSchedule) else np.asarray(schedule, dtype=np.float64)
    if w.shape != (d // 2,):
        raise ValueError(f"expected {d // 2} frequencies, got {w.shape}")
    pos = np.arange(n, dtype=np.float64) if positions is None else np.asarray(positions, dtype=np.float64)
    q = (X @ W_Q).reshape(n, heads, d // 2, 2)
    k = (X @ W_K).reshape(n, heads, d // 2, 2)
    phase = np.exp(1j * pos[:, None] * w[None])[:, None]  # (N, 1, d/2)
    qc = (q[..., 0] + 1j * q[..., 1]) * phase
    kc = (k[..., 0] + 1j * k[..., 1]) * phase
    logits = np.einsum("ihm,jhm->ijh", np.conj(qc), kc).real / math.sqrt(d)
    if mask is not None:
        logits = np.where(np.asarray(mask)[..., None] != 0, logits, -np.inf)
    return logits
