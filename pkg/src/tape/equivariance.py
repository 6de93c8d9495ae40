"""Randomized symmetry checks for layers ``(X, E, mask) -> (X', E')``.

A layer is permutation equivariant when ``f(PX, PE, PMP^T) = P f(X, E, M)`` and
O(R) equivariant when ``f(X, EO, M) = f(X, E, M)`` and ``g(X, EO, M) = g(X, E, M) O``.
Every trial draws its inputs from its own rng stream, so any failing trial can
be replayed from ``(seed, trial)`` alone.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .model.config import ModelConfig
from .model.layers import block_logits, tape_block
from .model.transformer import TapeModel, layer_params, model_forward
from .numcore import tensor as T
from .numcore.linalg import random_orthogonal, random_permutation
from .numcore.rng import Rng
from .numcore.tensor import no_grad
from .posenc import pe_dot_products

LayerFn = Callable[[np.ndarray, np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


@dataclass
class LayerUnderTest:
    """A layer plus the input shapes to sample for it.

    ``fn`` maps unbatched ``X (N, C)``, ``E (N, H, M, L, R)``, ``mask (N, N)`` to
    ``(X', E')``. ``logits`` (optional) maps the same inputs to pre-softmax logits
    (N, N, ...) whose O(R) invariance is checked too.
    """

    name: str
    fn: LayerFn
    dim: int
    e_shape: tuple[int, int, int, int]
    logits: Callable | None = None
    n_range: tuple[int, int] = (2, 12)


@dataclass
class TrialResult:
    trial: int
    n: int
    mask_kind: str
    f_dev: float
    g_dev: float
    logit_dev: float = 0.0

    @property
    def worst(self) -> float:
        return max(self.f_dev, self.g_dev, self.logit_dev)


@dataclass
class EquivarianceReport:
    kind: str
    layer: str
    tol: float
    seed: int
    trials: list[TrialResult] = field(default_factory=list)

    @property
    def max_deviation(self) -> float:
        return max((t.worst for t in self.trials), default=0.0)

    @property
    def passed(self) -> bool:
        return bool(self.trials) and self.max_deviation <= self.tol

    @property
    def reproducer(self) -> dict | None:
        """Seed and trial index of the worst trial."""
        if not self.trials:
            return None
        worst = max(self.trials, key=lambda t: t.worst)
        return {"seed": self.seed, "trial": worst.trial, "deviation": worst.worst}

    def summary(self) -> dict:
        return {"kind": self.kind, "layer": self.layer, "tol": self.tol, "seed": self.seed,
                "trials": len(self.trials), "max_deviation": self.max_deviation,
                "passed": self.passed, "reproducer": self.reproducer}

    def to_jsonl(self) -> str:
        lines = [json.dumps({"kind": self.kind, "layer": self.layer, **asdict(t)}) for t in self.trials]
        lines.append(json.dumps({"summary": self.summary()}))
        return "\n".join(lines) + "\n"

    def __str__(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.kind}[{self.layer}] max dev {self.max_deviation:.3e} (tol {self.tol:.0e}, {len(self.trials)} trials)"


# ---------------------------------------------------------------------------
# input sampling


def random_mask(n: int, rng: Rng) -> tuple[np.ndarray, str]:
    """Causal-then-permuted or random-sprinkle mask; the diagonal is always on."""
    if rng.random() < 0.5:
        p = random_permutation(n, rng)
        return p.conjugate_mask(np.tril(np.ones((n, n)))), "causal_permuted"
    m = (rng.random((n, n)) < 0.5).astype(np.float64)
    np.fill_diagonal(m, 1.0)
    return m, "sprinkle"


def sample_inputs(layer: LayerUnderTest, rng: Rng):
    n = rng.integer(layer.n_range[0], layer.n_range[1] + 1)
    X = rng.normal((n, layer.dim))
    E = rng.normal((n,) + tuple(layer.e_shape))
    mask, kind = random_mask(n, rng)
    return X, E, mask, kind


def _rotate(E: np.ndarray, O: np.ndarray) -> np.ndarray:
    return E @ O


def _max_abs(a, b) -> float:
    if a is None and b is None:
        return 0.0
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


# ---------------------------------------------------------------------------
# checks


def _perm_trial(layer: LayerUnderTest, seed: int, trial: int) -> TrialResult:
    rng = Rng(seed, trial)
    X, E, mask, kind = sample_inputs(layer, rng)
    n = X.shape[0]
    P = random_permutation(n, rng)
    O = random_orthogonal(E.shape[-1], rng)
    X1, E1 = layer.fn(X, E, mask)
    X2, E2 = layer.fn(P.apply(X), _rotate(P.apply(E), O), P.conjugate_mask(mask))
    f_dev = _max_abs(X2, P.apply(X1))
    g_dev = _max_abs(E2, _rotate(P.apply(E1), O))
    return TrialResult(trial, n, kind, f_dev, g_dev)


def _ortho_trial(layer: LayerUnderTest, seed: int, trial: int) -> TrialResult:
    rng = Rng(seed, trial)
    X, E, mask, kind = sample_inputs(layer, rng)
    O = random_orthogonal(E.shape[-1], rng)
    X1, E1 = layer.fn(X, E, mask)
    X2, E2 = layer.fn(X, _rotate(E, O), mask)
    res = TrialResult(trial, X.shape[0], kind, _max_abs(X2, X1), _max_abs(E2, _rotate(E1, O)))
    if layer.logits is not None:
        a1 = layer.logits(X, E, mask)
        a2 = layer.logits(X, _rotate(E, O), mask)
        res.logit_dev = _max_abs(a1, a2)
    return res


def _run(kind, trial_fn, layer, trials, tol, rng, jobs):
    if trials < 1:
        raise ValueError("trials must be >= 1")
    seed = rng.seed
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as ex:
            results = list(ex.map(lambda t: trial_fn(layer, seed, t), range(trials)))
    else:
        results = [trial_fn(layer, seed, t) for t in range(trials)]
    return EquivarianceReport(kind, layer.name, tol, seed, results)


def check_perm_equivariance(layer: LayerUnderTest, trials: int = 50, tol: float = 1e-8,
                            rng: Rng | None = None, jobs: int = 1) -> EquivarianceReport:
    """Joint check: ``f(PX, PEO, PMP^T) = P f`` and ``g(PX, PEO, PMP^T) = P g O``."""
    return _run("perm", _perm_trial, layer, trials, tol, rng or Rng(0), jobs)


def check_ortho_equivariance(layer: LayerUnderTest, trials: int = 50, tol: float = 1e-8,
                             rng: Rng | None = None, jobs: int = 1) -> EquivarianceReport:
    """``f(X, EO, M) = f(X, E, M)``, ``g(X, EO, M) = g(X, E, M) O`` and logit invariance."""
    return _run("ortho", _ortho_trial, layer, trials, tol, rng or Rng(0), jobs)


# ---------------------------------------------------------------------------
# layers under test


def _e_shape(cfg: ModelConfig) -> tuple[int, int, int, int]:
    return (cfg.heads, cfg.blocks, cfg.L, cfg.R)


def random_layer_params(cfg: ModelConfig, rng: Rng, scale: float = 0.3) -> dict:
    """Params of a depth-``cfg.depth`` model at O(1) scale (W2 nonzero) so every path is active."""
    from .model.params import init_params

    params = init_params(cfg.replace(init_std=scale), rng)
    for k in params:
        if k.endswith(("pos.w2", ".b", "b1", "b2")):
            params[k] = params[k] + rng.normal(params[k].shape, scale)
    return params


def tape_stack(cfg: ModelConfig, params: dict, name: str = "tape") -> LayerUnderTest:
    """All ``cfg.depth`` TAPE blocks composed, as one ``(X, E, M) -> (X', E')`` map."""

    def fn(X, E, mask):
        with no_grad():
            x, e = T.as_tensor(X[None]), T.as_tensor(E[None])
            for layer in range(cfg.depth):
                x, e = tape_block(x, e, mask, layer_params(params, layer), cfg)
        return x.data[0], e.data[0]

    def logits(X, E, mask):
        p = layer_params(params, 0)
        with no_grad():
            xn = T.layer_norm(X[None], p["ln1.w"], p["ln1.b"])
            a = block_logits(xn @ p["wq"], xn @ p["wk"], E[None], cfg, p.get("phi.u"))
        return a.data[0]

    return LayerUnderTest(name, fn, cfg.dim, _e_shape(cfg), logits)


def flattened_pe_stack(cfg: ModelConfig, params: dict, rng: Rng) -> LayerUnderTest:
    """Mutation: the raw PE is flattened and projected into the token features."""
    base = tape_stack(cfg, params, "flattened_pe")
    d = int(np.prod(_e_shape(cfg)))
    w = rng.normal((d, cfg.dim), 1.0 / np.sqrt(d))

    def fn(X, E, mask):
        return base.fn(X + E.reshape(len(E), -1) @ w, E, mask)

    return LayerUnderTest("flattened_pe", fn, cfg.dim, _e_shape(cfg), base.logits)


def identity_layer(dim: int, e_shape) -> LayerUnderTest:
    return LayerUnderTest("identity", lambda X, E, M: (X.copy(), E.copy()), dim, tuple(e_shape))


# ---------------------------------------------------------------------------
# shift protocols


@dataclass
class ShiftReport:
    tol: float
    logit_dev: dict = field(default_factory=dict)       # delta -> max |logits' - logits|
    attn_dev: dict = field(default_factory=dict)        # delta -> per-layer max attention diff
    pe_dot_dev: dict = field(default_factory=dict)      # delta -> per-layer relative PE gram diff (%)
    bos_logit_dev: float = 0.0
    bos_attn_dev: list = field(default_factory=list)
    bos_pe_dot_dev: list = field(default_factory=list)

    @property
    def max_logit_dev(self) -> float:
        return max(self.logit_dev.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_logit_dev <= self.tol

    def to_jsonl(self) -> str:
        rows = [{"protocol": "shift_ids", "delta": d, "logit_dev": self.logit_dev[d],
                 "attn_dev": self.attn_dev[d], "pe_dot_dev_pct": self.pe_dot_dev[d]} for d in self.logit_dev]
        rows.append({"protocol": "add_bos", "logit_dev": self.bos_logit_dev,
                     "attn_dev": self.bos_attn_dev, "pe_dot_dev_pct": self.bos_pe_dot_dev})
        rows.append({"summary": {"kind": "shift", "tol": self.tol, "max_logit_dev": self.max_logit_dev,
                                 "passed": self.passed}})
        return "\n".join(json.dumps(r) for r in rows) + "\n"


def attention_maps(model: TapeModel, tokens, positions=None) -> list[np.ndarray]:
    """Per-layer token-mixing attention weights (N, N, H) for one sequence."""
    from .model.layers import causal_mask, rotary_logits

    cfg, params = model.cfg, model.params
    tokens = np.asarray(tokens)
    n = len(tokens)
    pos = np.arange(n, dtype=np.float64) if positions is None else np.asarray(positions, dtype=np.float64)
    _, states = model_forward(tokens, cfg, params, pos, return_states=True)
    mask = causal_mask(n)
    maps = []
    with no_grad():
        for layer in range(cfg.depth):
            p = layer_params(params, layer)
            X, E = states[layer]
            xn = T.layer_norm(X, p["ln1.w"], p["ln1.b"])
            if cfg.variant == "tape":
                alpha = block_logits(xn @ p["wq"], xn @ p["wk"], E, cfg, p.get("phi.u")).data.sum(-1)
            else:
                alpha = np.moveaxis(rotary_logits(xn @ p["wq"], xn @ p["wk"], pos, cfg).data, 1, -1)
            maps.append(T.softmax(alpha, axis=2, mask=mask[None, :, :, None]).data[0])
    return maps


def _pe_grams(model: TapeModel, tokens, positions) -> list[np.ndarray]:
    _, states = model_forward(tokens, model.cfg, model.params, positions, return_states=True)
    return [pe_dot_products(e[0]) for _, e in states if e is not None]


def _rel_pct(a: np.ndarray, b: np.ndarray) -> float:
    return float(100.0 * np.abs(a - b).mean() / max(np.abs(a).mean(), 1e-300))


def check_shift_invariance(model: TapeModel, deltas=(1, 3, 17, 100), tol: float = 1e-8,
                           tokens=None, rng: Rng | None = None, bos_id: int = 0, n_bos: int = 3) -> ShiftReport:
    """ID-shift protocol (asserted) and prepend-BOS protocol (reported only)."""
    rng = rng or Rng(0)
    cfg = model.cfg
    if tokens is None:
        tokens = rng.integers(0, cfg.vocab, min(16, cfg.n_ctx - n_bos))
    tokens = np.asarray(tokens)
    n = len(tokens)
    base_pos = np.arange(n, dtype=np.float64)
    ref = model(tokens, positions=base_pos)
    ref_attn = attention_maps(model, tokens, base_pos)
    ref_gram = _pe_grams(model, tokens, base_pos) if cfg.variant == "tape" else []
    rep = ShiftReport(tol)
    for d in deltas:
        pos = base_pos + d
        rep.logit_dev[d] = _max_abs(model(tokens, positions=pos), ref)
        rep.attn_dev[d] = [_max_abs(a, b) for a, b in zip(attention_maps(model, tokens, pos), ref_attn)]
        grams = _pe_grams(model, tokens, pos) if cfg.variant == "tape" else []
        rep.pe_dot_dev[d] = [_rel_pct(g, r) for g, r in zip(grams, ref_gram)]
    # prepend BOS tokens; compare the original tokens' rows
    padded = np.concatenate([np.full(n_bos, bos_id), tokens])
    out = model(padded)
    rep.bos_logit_dev = _max_abs(out[n_bos:], ref)
    attn = attention_maps(model, padded)
    rep.bos_attn_dev = [_max_abs(a[n_bos:, n_bos:], b) for a, b in zip(attn, ref_attn)]
    if cfg.variant == "tape":
        grams = _pe_grams(model, padded, None)
        rep.bos_pe_dot_dev = [_rel_pct(g[n_bos:, n_bos:], r) for g, r in zip(grams, ref_gram)]
    return rep
