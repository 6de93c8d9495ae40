"""Plain-array kernels: products, masked softmax, triangular solves, group samplers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .rng import Rng


class DegenerateRowError(ValueError):
    """A softmax row has no unmasked entry."""


class SingularMatrixError(np.linalg.LinAlgError):
    pass


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return a @ b


def masked_softmax(logits, mask=None, axis: int = -1, allow_empty: bool = False) -> np.ndarray:
    """Numerically stable softmax where ``mask == 0`` entries come out exactly 0.

    Rows with no unmasked entry raise :class:`DegenerateRowError` unless
    ``allow_empty`` is set, in which case they are all zero.
    """
    logits = np.asarray(logits)
    if logits.dtype != np.float32:
        logits = logits.astype(np.float64, copy=False)
    if mask is None:
        z = logits - logits.max(axis=axis, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=axis, keepdims=True)
    keep_small = np.asarray(mask) != 0
    empty_small = ~keep_small.any(axis=axis, keepdims=True)
    if not empty_small.any():
        # common case: one pass with -inf fill, no empty-row bookkeeping
        z = np.where(keep_small, logits, -np.inf)
        z -= z.max(axis=axis, keepdims=True)
        np.exp(z, out=z)
        z /= z.sum(axis=axis, keepdims=True)
        return z
    if not allow_empty:
        raise DegenerateRowError("softmax row with every entry masked")
    keep = np.broadcast_to(keep_small, logits.shape)
    empty = ~keep.any(axis=axis, keepdims=True)
    filled = np.where(keep, logits, -np.inf)
    m = filled.max(axis=axis, keepdims=True)
    m = np.where(empty, 0.0, m)
    e = np.where(keep, np.exp(np.where(keep, logits, 0.0) - m), 0.0)
    s = e.sum(axis=axis, keepdims=True)
    return e / np.where(empty, 1.0, s)


def unit_lower_solve(a: np.ndarray, b: np.ndarray, tol: float = 1e-12) -> np.ndarray:
    """Solve ``a @ x = b`` for lower-triangular ``a`` by forward substitution.

    ``a`` is (..., n, n) and ``b`` is (..., n) or (..., n, k); leading axes
    broadcast. Only the lower triangle of ``a`` is read.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    n = a.shape[-1]
    if a.shape[-2] != n:
        raise ValueError(f"triangular solve needs a square matrix, got {a.shape}")
    vec = b.ndim == a.ndim - 1
    if vec:
        b = b[..., None]
    if b.shape[-2] != n:
        raise ValueError(f"triangular solve shape mismatch: {a.shape} vs {b.shape}")
    diag = np.diagonal(a, axis1=-2, axis2=-1)
    bad = np.abs(diag) < tol
    if bad.any():
        row = int(np.argwhere(bad.reshape(-1, n).any(axis=0))[0, 0])
        raise SingularMatrixError(f"near-zero pivot at row {row}")
    lead = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    x = np.zeros(lead + (n, b.shape[-1]))
    for i in range(n):
        acc = b[..., i, :]
        if i:
            acc = acc - np.einsum("...j,...jk->...k", a[..., i, :i], x[..., :i, :])
        x[..., i, :] = acc / diag[..., i, None]
    return x[..., 0] if vec else x


def random_orthogonal(r: int, rng: Rng) -> np.ndarray:
    """Haar-distributed orthogonal ``r x r`` matrix (QR of a Gaussian, sign fixed)."""
    if r < 1:
        raise ValueError("dimension must be >= 1")
    g = rng.normal((r, r))
    q, upper = np.linalg.qr(g)
    return q * np.sign(np.where(np.diag(upper) == 0, 1.0, np.diag(upper)))


@dataclass(frozen=True)
class Permutation:
    """A permutation ``i -> perm[i]`` of ``range(n)``.

    Its matrix acts on row-stacked data as ``(P @ X)[i] = X[perm[i]]``.
    """

    perm: np.ndarray

    @property
    def n(self) -> int:
        return len(self.perm)

    def matrix(self) -> np.ndarray:
        p = np.zeros((self.n, self.n))
        p[np.arange(self.n), self.perm] = 1.0
        return p

    def inverse(self) -> "Permutation":
        inv = np.empty_like(self.perm)
        inv[self.perm] = np.arange(self.n)
        return Permutation(inv)

    def compose(self, other: "Permutation") -> "Permutation":
        """Map ``i -> self[other[i]]``."""
        return Permutation(self.perm[other.perm])

    def apply(self, x: np.ndarray, axis: int = 0) -> np.ndarray:
        """Permute ``x`` along ``axis`` (same as ``P @ x`` for axis 0)."""
        return np.take(x, self.perm, axis=axis)

    def conjugate_mask(self, mask: np.ndarray) -> np.ndarray:
        """``P M P^T``."""
        return mask[np.ix_(self.perm, self.perm)]


def random_permutation(n: int, rng: Rng) -> Permutation:
    """Uniform permutation by Fisher-Yates."""
    if n < 1:
        raise ValueError("n must be >= 1")
    perm = np.arange(n)
    for i in range(n - 1, 0, -1):
        j = rng.integer(0, i + 1)
        perm[i], perm[j] = perm[j], perm[i]
    return Permutation(perm)
