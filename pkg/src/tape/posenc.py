"""Tensorial positional encodings of shape (N, H, M, L, R).

Each token carries, per head ``h`` and block ``m``, an ``L x R`` matrix whose rows
are the ``L`` position vectors. Everything downstream touches these only through
row-space inner products (``e_i e_j^T``) or left multiplications, so a right
multiplication by an orthogonal ``R x R`` matrix is a symmetry of the model.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numcore.io import write_csv
from .numcore.rng import Rng


@dataclass
class PosTensor:
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 5:
            raise ValueError(f"PosTensor needs shape (N, H, M, L, R), got {self.values.shape}")
        if min(self.values.shape) < 1:
            raise ValueError(f"empty axis in PosTensor shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("PosTensor has non-finite entries")

    @property
    def meta(self) -> tuple[int, int, int, int, int]:
        return self.values.shape

    N = property(lambda self: self.values.shape[0])
    H = property(lambda self: self.values.shape[1])
    M = property(lambda self: self.values.shape[2])
    L = property(lambda self: self.values.shape[3])
    R = property(lambda self: self.values.shape[4])

    @property
    def D(self) -> int:
        return self.M * self.L * self.R

    def rotate(self, o: np.ndarray) -> "PosTensor":
        """Right-multiply by ``o``: one R x R matrix, or one per block (M, R, R)."""
        o = np.asarray(o)
        if o.ndim == 2:
            return PosTensor(self.values @ o)
        return PosTensor(np.einsum("nhmlr,mrs->nhmls", self.values, o))

    def flatten_blocks(self) -> np.ndarray:
        """View as (N, H*M*L, R)."""
        return self.values.reshape(self.N, -1, self.R)


@dataclass(frozen=True)
class RopeSchedule:
    """Angles ``theta_m = sign * base ** (-2m / dim)`` for ``m = 0..M-1``.

    ``sign=-1`` reproduces the minus sign printed for the schedule; with it,
    the position-gram logits equal classical rotary logits that rotate by
    ``+|theta_m| * i``. ``sign=+1`` only reverses the rotation direction.
    """

    blocks: int
    dim: int
    base: float = 10000.0
    sign: float = -1.0

    @property
    def magnitudes(self) -> np.ndarray:
        m = np.arange(self.blocks)
        return self.base ** (-2.0 * m / self.dim)

    @property
    def thetas(self) -> np.ndarray:
        return self.sign * self.magnitudes


@dataclass(frozen=True)
class FourierSchedule:
    """Reweighted random Fourier features.

    ``freqs`` is (M, R/2), ``weights`` is (M, L, R/2).
    """

    freqs: np.ndarray
    weights: np.ndarray

    @property
    def R(self) -> int:
        return 2 * self.freqs.shape[1]

    @property
    def L(self) -> int:
        return self.weights.shape[1]

    @property
    def M(self) -> int:
        return self.freqs.shape[0]

    @classmethod
    def sample(cls, blocks: int, vectors: int, rdim: int, rng: Rng, freq_std: float = 1.0) -> "FourierSchedule":
        if rdim % 2:
            raise ValueError(f"Fourier features need an even rotation dimension, got R={rdim}")
        freqs = rng.normal((blocks, rdim // 2), std=freq_std)
        weights = rng.normal((blocks, vectors, rdim // 2))
        return cls(freqs, weights)


def _rotation(angle) -> np.ndarray:
    """Stack of 2x2 matrices ``[[cos, -sin], [sin, cos]]`` over ``angle``'s shape."""
    c, s = np.cos(angle), np.sin(angle)
    return np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)


def rope_init(positions, heads: int, schedule: RopeSchedule) -> PosTensor:
    """Rotary encoding as a PosTensor with ``L = R = 2``.

    Slice ``(i, h, m)`` is the rotation by ``theta_m * positions[i]``; its rows are
    ``[cos, -sin]`` and ``[sin, cos]``.
    """
    pos = np.asarray(positions, dtype=np.float64)
    rot = _rotation(pos[:, None] * schedule.thetas[None, :])  # (N, M, 2, 2)
    vals = np.broadcast_to(rot[:, None], (len(pos), heads) + rot.shape[1:])
    return PosTensor(vals.copy())


def fourier_init(positions, heads: int, schedule: FourierSchedule) -> PosTensor:
    pos = np.asarray(positions, dtype=np.float64)
    ang = pos[:, None, None] * schedule.freqs[None]  # (N, M, R/2)
    w = schedule.weights[None]  # (1, M, L, R/2)
    cos = w * np.cos(ang)[:, :, None, :]
    sin = w * np.sin(ang)[:, :, None, :]
    vals = np.sqrt(2.0 / schedule.R) * np.stack([cos, sin], -1).reshape(
        len(pos), schedule.M, schedule.L, schedule.R)
    vals = np.broadcast_to(vals[:, None], (len(pos), heads) + vals.shape[1:])
    return PosTensor(vals.copy())


def phase_shift(schedule, delta: float) -> np.ndarray:
    """Per-block orthogonal ``O`` (M, R, R) with ``init(p + delta) = init(p) @ O``."""
    if isinstance(schedule, RopeSchedule):
        return _rotation(schedule.thetas * delta)
    if isinstance(schedule, FourierSchedule):
        # row vectors [cos, sin] advance by right-multiplying the transposed rotation
        blocks = np.swapaxes(_rotation(schedule.freqs * delta), -1, -2)  # (M, R/2, 2, 2)
        m, k = schedule.freqs.shape
        out = np.zeros((m, 2 * k, 2 * k))
        for r in range(k):
            out[:, 2 * r:2 * r + 2, 2 * r:2 * r + 2] = blocks[:, r]
        return out
    raise TypeError(f"phase shift undefined for schedule type {type(schedule).__name__}")


def gram(e_i: np.ndarray, e_j: np.ndarray) -> np.ndarray:
    """Per-block ``L x L`` inner products ``e_i[m] @ e_j[m].T`` for (..., L, R) slices."""
    e_i, e_j = np.asarray(e_i), np.asarray(e_j)
    if e_i.shape != e_j.shape:
        raise ValueError(f"gram shape mismatch: {e_i.shape} vs {e_j.shape}")
    return np.einsum("...lr,...kr->...lk", e_i, e_j)


def pe_dot_products(E: PosTensor | np.ndarray) -> np.ndarray:
    """N x N grid of ``trace(e_i e_j^T)`` averaged over heads and blocks."""
    vals = E.values if isinstance(E, PosTensor) else np.asarray(E)
    return np.einsum("ihmlr,jhmlr->ij", vals, vals) / (vals.shape[1] * vals.shape[2])


def export_pe_dot_products(E: PosTensor | np.ndarray, path, tag: str = "", positions=None) -> np.ndarray:
    """Write the dot-product grid to ``path`` as CSV; the corner cell holds ``tag``."""
    grid = pe_dot_products(E)
    labels = list(range(grid.shape[0])) if positions is None else list(positions)
    path = Path(path)
    write_csv(path, grid, row_labels=labels, col_labels=labels)
    if tag:
        text = path.read_text()
        path.write_text(tag + text)
    return grid
