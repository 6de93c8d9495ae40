"""Explicit four-layer equivariant network for the Pi(5) word problem.

Tokens: ids 1..10 are the transpositions of [5] in a fixed order, 11 is BOS.
Sequence positions are 1-based in the docstrings and 0-based in the arrays.

Each layer maps ``(X, E, mask) -> (X', E')`` with E a stack of per-token
``L x 6`` matrices; L changes across layers (17, 8, 12, 6). Right-multiplying
every E slice by one orthogonal 6x6 matrix is a symmetry of every layer, and so
is any token permutation applied together with the matching mask conjugation.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .numcore.linalg import Permutation, masked_softmax, unit_lower_solve
from .numcore.rng import Rng

BOS = 11
VOCAB = 11
R = 6
THRESHOLD = 54.5
DECISION_EPS = 1e-9


@dataclass(frozen=True)
class SwapTable:
    """Transposition ``n`` (1-based) swaps ``pairs[n-1] = (src, dst)``, ``src < dst``, both 1-based."""

    pairs: tuple = tuple(itertools.combinations(range(1, 6), 2))

    def __post_init__(self):
        if sorted(self.pairs) != sorted(itertools.combinations(range(1, 6), 2)):
            raise ValueError("swap table must list each pair of [5] exactly once")

    def __len__(self):
        return len(self.pairs)

    def pair(self, n: int) -> tuple[int, int]:
        if not 1 <= n <= 10:
            raise ValueError(f"transposition id must be in 1..10, got {n}")
        return self.pairs[n - 1]

    def xi(self) -> np.ndarray:
        """11 x 6 matrix whose row n-1 is ``delta_src - delta_dst`` (row 10, BOS, is 0)."""
        out = np.zeros((VOCAB, R))
        for n in range(1, 11):
            s, d = self.pair(n)
            out[n - 1, s - 1] = 1.0
            out[n - 1, d - 1] = -1.0
        return out


SWAPS = SwapTable()


def swap_matrix(n: int, table: SwapTable = SWAPS) -> np.ndarray:
    """5x5 transposition ``I - (d_src - d_dst)(d_src - d_dst)^T``."""
    s, d = table.pair(n)
    v = np.zeros(5)
    v[s - 1], v[d - 1] = 1.0, -1.0
    return np.eye(5) - np.outer(v, v)


@dataclass(frozen=True)
class WordProblemInstance:
    u: np.ndarray  # token ids, u[0] == BOS

    def __post_init__(self):
        u = np.asarray(self.u, dtype=np.int64)
        if u.ndim != 1 or len(u) < 1 or u[0] != BOS or np.any((u[1:] < 1) | (u[1:] > 10)):
            raise ValueError("instance must start with BOS (11) followed by ids in 1..10")
        object.__setattr__(self, "u", u)

    @property
    def N(self) -> int:
        return len(self.u)


def oracle_labels(inst: WordProblemInstance, table: SwapTable = SWAPS) -> np.ndarray:
    """``y[i] = [S_u[1] ... S_u[i] == I]`` by integer matrix products (S_BOS = I)."""
    acc = np.eye(5, dtype=np.int64)
    out = np.zeros(inst.N, dtype=bool)
    for i, t in enumerate(inst.u):
        if t != BOS:
            acc = acc @ swap_matrix(int(t), table).astype(np.int64)
        out[i] = np.array_equal(acc, np.eye(5, dtype=np.int64))
    return out


def oracle_labels_permmap(inst: WordProblemInstance, table: SwapTable = SWAPS) -> np.ndarray:
    """Second route: compose the transpositions as index maps on ``[0, 1, 2, 3, 4]``."""
    state = list(range(5))
    out = np.zeros(inst.N, dtype=bool)
    for i, t in enumerate(inst.u):
        if t != BOS:
            s, d = table.pair(int(t))
            state[s - 1], state[d - 1] = state[d - 1], state[s - 1]
        out[i] = state == [0, 1, 2, 3, 4]
    return out


def gen_word_problem(N: int, rng: Rng, table: SwapTable = SWAPS) -> tuple[WordProblemInstance, np.ndarray]:
    if N < 1:
        raise ValueError("N must be >= 1")
    u = np.concatenate([[BOS], rng.integers(1, 11, N - 1)]).astype(np.int64)
    inst = WordProblemInstance(u)
    return inst, oracle_labels(inst, table)


def householder_product(xi: np.ndarray) -> np.ndarray:
    """Prefix products ``prod_{j<=i} (I - xi_j xi_j^T)`` (N, R, R), left to right."""
    n, r = xi.shape
    out = np.empty((n, r, r))
    acc = np.eye(r)
    for i in range(n):
        acc = acc - np.outer(acc @ xi[i], xi[i])
        out[i] = acc
    return out


def wy_factor(xi: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """``W = (I + mask * Xi Xi^T)^{-1} Xi`` with a strictly lower mask by default."""
    n = xi.shape[0]
    mask = np.tril(np.ones((n, n)), -1) if mask is None else np.asarray(mask, dtype=np.float64)
    a = np.eye(n) + mask * (xi @ xi.T)
    if np.array_equal(mask, np.tril(mask, -1)):
        return unit_lower_solve(a, xi)
    return np.linalg.solve(a, xi)


def wy_check(xi: np.ndarray, mask: np.ndarray | None = None) -> float:
    """Residual of ``prod_{j<=i} (I - xi_j xi_j^T) = I - sum_{j<=i} w_j xi_j^T`` over all prefixes.

    Reported as ``max |LHS - RHS| / max(1, max |LHS|)``: the absolute error when
    the products stay bounded (reflections, swap rows), and a relative one when
    unnormalized Gaussian rows make them grow geometrically.
    """
    xi = np.asarray(xi, dtype=np.float64)
    w = wy_factor(xi, mask)
    lhs = householder_product(xi)
    rhs = np.eye(xi.shape[1]) - np.cumsum(np.einsum("ir,is->irs", w, xi), axis=0)
    return float(np.abs(lhs - rhs).max() / max(1.0, np.abs(lhs).max()))


# ---------------------------------------------------------------------------
# the construction


def hard_sigmoid(x):
    return np.minimum(1.0, np.maximum(0.0, x))


def _avg_weights(mask: np.ndarray) -> np.ndarray:
    """Attention with all-zero logits: uniform over each row's unmasked keys."""
    return masked_softmax(np.zeros(mask.shape), mask)


@dataclass
class ConstructedNet:
    """Fixed weights of the four layers (no learned parameters).

    All layer maps accept leading batch axes: X (..., N, C), E (..., N, L, 6),
    mask (N, N) or (..., N, N).

    ``bos_fix`` adds the BOS indicator to the output read-out. Without it the
    first position (a lone BOS, whose prefix is the identity) scores exactly 0.
    """

    table: SwapTable = SWAPS
    threshold: float = THRESHOLD
    bos_fix: bool = True
    xi: np.ndarray = field(init=False)

    def __post_init__(self):
        self.xi = self.table.xi()
        c = VOCAB
        # layer 2 token FFN: identity, ReLU, then prepend a zero channel
        self.ffn2_w1 = np.eye(c)
        self.ffn2_w2 = np.vstack([np.zeros((1, c)), np.eye(c)])  # (12, 11)
        # layer 2 value map on E rows: row 1 -> row 2
        self.u_v2 = np.zeros((8, 8))
        self.u_v2[1, 0] = 1.0
        # layer 3 value map: first channel <- BOS indicator
        self.w_v3 = np.zeros((c + 1, c + 1))
        self.w_v3[0, BOS] = 1.0
        # layer 4
        vq = np.array([1, 2, 3, 4, 5, self.threshold], dtype=np.float64)
        vk = np.array([1, 2, 3, 4, 5, -1], dtype=np.float64)
        lower = np.hstack([np.zeros((c, 1)), np.eye(c)])  # [0_C I_C] drops the first channel
        onehot_bos = np.eye(c)[BOS - 1]
        self.w_q4 = np.outer(vq, np.ones(c)) @ lower
        self.w_k4 = np.outer(vk, onehot_bos) @ lower
        self.w_v4 = -np.outer(np.eye(c + 1)[0], onehot_bos) @ lower
        self.head_w = -np.eye(c + 1)[0]
        if self.bos_fix:
            self.head_w = self.head_w + np.eye(c + 1)[BOS]

    # psi maps: per token, x -> left multiplier of e

    def psi1(self, x: np.ndarray) -> np.ndarray:
        """(..., 11) -> (..., 8, 17): rows [x^T 0; 0; 0 I_6]."""
        out = np.zeros(x.shape[:-1] + (8, VOCAB + R))
        out[..., 0, :VOCAB] = x
        out[..., 2:, VOCAB:] = np.eye(R)
        return out

    def psi2(self, x: np.ndarray) -> np.ndarray:
        """(..., 11) -> (..., 12, 8): rows (Xi^T x)_k delta_2^T for k <= 6, then delta_3..delta_8."""
        out = np.zeros(x.shape[:-1] + (2 * R, 8))
        out[..., :R, 1] = x @ self.xi
        out[..., R:, 2:] = np.eye(R)
        return out

    def psi3(self, x: np.ndarray) -> np.ndarray:
        """(..., 12) -> (..., 6, 12): ``[-(x_1)^{-1} I_6, I_6]``."""
        if np.any(x[..., 0] == 0):
            raise FloatingPointError("psi3 needs a nonzero first channel (row without BOS?)")
        out = np.zeros(x.shape[:-1] + (R, 2 * R))
        out[..., :, :R] = -np.eye(R) / x[..., 0, None, None]
        out[..., :, R:] = np.eye(R)
        return out

    # layers

    def initial_pe(self, shape) -> np.ndarray:
        """E^0 for token array shape (..., N): every slice is [Xi; I_6] (17 x 6)."""
        e0 = np.vstack([self.xi, np.eye(R)])
        return np.broadcast_to(e0, tuple(np.atleast_1d(shape)) + e0.shape).copy()

    def layer1(self, X, E, mask):
        return X.copy(), np.einsum("...ab,...br->...ar", self.psi1(X), E)

    def layer2(self, X, E, mask):
        n = X.shape[-2]
        rows = E[..., 0, :]  # U_Q = U_K = delta_1^T picks row 1
        strict = np.asarray(mask, dtype=np.float64) * (1.0 - np.eye(n))
        a = np.eye(n) + strict * (rows @ np.swapaxes(rows, -1, -2))
        moved = np.einsum("ab,...nbr->...nar", self.u_v2, E)  # (..., N, 8, 6)
        flat = moved.reshape(moved.shape[:-2] + (-1,))
        if np.array_equal(strict, np.tril(strict, -1)):
            mixed = unit_lower_solve(a, flat)
        else:
            mixed = np.linalg.solve(a, flat)
        Et = mixed.reshape(moved.shape) + E
        E_out = np.einsum("...ab,...br->...ar", self.psi2(X), Et)
        X_out = np.maximum(X @ self.ffn2_w1.T, 0.0) @ self.ffn2_w2.T
        return X_out, E_out

    def layer3(self, X, E, mask):
        w = _avg_weights(np.broadcast_to(mask, X.shape[:-2] + (X.shape[-2],) * 2))
        Xt = w @ (X @ self.w_v3.T) + X
        Et = np.einsum("...ij,...jlr->...ilr", w, E)
        return Xt, np.einsum("...ab,...br->...ar", self.psi3(Xt), Et)

    def attn4_logits(self, X, E):
        """``(W_Q x_i)^T phi(e_i, e_j) (W_K x_j)`` with ``phi(e_i, e_j) = e_j e_i^T``."""
        q = X @ self.w_q4.T
        k = X @ self.w_k4.T
        left = np.einsum("...ia,...jar->...ijr", q, E)  # q_i^T e_j
        right = np.einsum("...icr,...jc->...ijr", E, k)  # e_i k_j
        return np.einsum("...ijr,...ijr->...ij", left, right)

    def layer4(self, X, E, mask):
        a = masked_softmax(self.attn4_logits(X, E), mask)
        Xt = a @ (X @ self.w_v4.T) + X
        return hard_sigmoid(Xt @ self.head_w)[..., None], E

    def layers(self):
        return [self.layer1, self.layer2, self.layer3, self.layer4]


def one_hot(u: np.ndarray) -> np.ndarray:
    u = np.asarray(u)
    return np.eye(VOCAB)[u - 1]


@dataclass
class ConstructionRun:
    scores: np.ndarray       # (..., N) hard-sigmoid outputs
    decisions: np.ndarray    # scores > eps
    logits_bos: np.ndarray   # layer-4 logit of each query against the BOS key
    pre_sigmoid: np.ndarray
    e3: np.ndarray           # (..., N, 6, 6) third-layer encodings


def build_construction(threshold: float = THRESHOLD, bos_fix: bool = True) -> ConstructedNet:
    return ConstructedNet(threshold=threshold, bos_fix=bos_fix)


def run_construction(net: ConstructedNet, inst, mask: np.ndarray | None = None,
                     eps: float = DECISION_EPS) -> ConstructionRun:
    """Run all four layers on one instance or a (batch, N) array of token ids (BOS first)."""
    u = inst.u if isinstance(inst, WordProblemInstance) else np.asarray(inst, dtype=np.int64)
    n = u.shape[-1]
    mask = np.tril(np.ones((n, n))) if mask is None else mask
    X = one_hot(u)
    E = net.initial_pe(u.shape)
    X, E = net.layer1(X, E, mask)
    X, E = net.layer2(X, E, mask)
    X, E = net.layer3(X, E, mask)
    logits = net.attn4_logits(X, E)
    a = masked_softmax(logits, mask)
    Xt = a @ (X @ net.w_v4.T) + X
    pre = Xt @ net.head_w
    scores = hard_sigmoid(pre)
    if not np.all(np.isfinite(scores)):
        raise FloatingPointError("non-finite score in construction")
    return ConstructionRun(scores, scores > eps, logits[..., 0], pre, E)


def batch_instances(N: int, count: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    """``count`` instances of length N as arrays (tokens, labels)."""
    u = np.concatenate([np.full((count, 1), BOS), rng.integers(1, 11, (count, N - 1))], axis=1)
    labels = np.stack([oracle_labels(WordProblemInstance(row)) for row in u])
    return u.astype(np.int64), labels


def evaluate_construction(net: ConstructedNet, N: int, count: int, rng: Rng, chunk: int = 250) -> dict:
    """Agreement with the oracle over ``count`` random instances of length N."""
    agree = 0
    min_score = np.inf
    max_wrong = 0.0
    for start in range(0, count, chunk):
        u, y = batch_instances(N, min(chunk, count - start), rng.spawn(N * 1_000_003 + start))
        run = run_construction(net, u)
        agree += int(np.all(run.decisions == y, axis=1).sum())
        if y.any():
            min_score = min(min_score, float(run.scores[y].min()))
        if (~y).any():
            max_wrong = max(max_wrong, float(run.scores[~y].max()))
    return {"N": N, "instances": count, "agree": agree, "accuracy": agree / count,
            "min_identity_score": min_score, "max_nonidentity_score": max_wrong}


def precision_sweep(net: ConstructedNet, lengths, instances: int, rng: Rng):
    """Rows of :func:`evaluate_construction` plus the first N below 100% (None if none)."""
    rows = [evaluate_construction(net, n, instances, rng) for n in lengths]
    first_fail = next((r["N"] for r in rows if r["accuracy"] < 1.0), None)
    return rows, first_fail


def identity_margin(i: np.ndarray) -> np.ndarray:
    """Closed-form score at an identity position i >= 2 (logit 0.5 against BOS, 0 elsewhere)."""
    i = np.asarray(i, dtype=np.float64)
    a = np.exp(0.5) / (np.exp(0.5) + i - 1)
    return a - 1.0 / i


def layer_equivariance(net: ConstructedNet, layer: int, inst: WordProblemInstance, rng: Rng) -> tuple[float, float]:
    """Deviation of layer ``layer`` (1..4) from perm and O(6) symmetry on ``inst``.

    The layer input is the true intermediate state; the mask is causal. Returns
    ``(perm_dev, ortho_dev)`` for a random token permutation and orthogonal O.
    """
    from .numcore.linalg import random_orthogonal, random_permutation

    n = inst.N
    mask = np.tril(np.ones((n, n)))
    X = one_hot(inst.u)
    E = net.initial_pe(n)
    fns = net.layers()
    for fn in fns[:layer - 1]:
        X, E = fn(X, E, mask)
    fn = fns[layer - 1]
    X1, E1 = fn(X, E, mask)
    P: Permutation = random_permutation(n, rng)
    O = random_orthogonal(R, rng)
    Xp, Ep = fn(P.apply(X), P.apply(E) @ O, P.conjugate_mask(mask))
    perm_dev = max(float(np.abs(Xp - P.apply(X1)).max()), float(np.abs(Ep - P.apply(E1) @ O).max()))
    Xo, Eo = fn(X, E @ O, mask)
    ortho_dev = max(float(np.abs(Xo - X1).max()), float(np.abs(Eo - E1 @ O).max()))
    return perm_dev, ortho_dev
