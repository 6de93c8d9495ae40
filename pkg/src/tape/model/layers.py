"""One TAPE block: invariant token mixing and equivariant position contextualization.

Shapes (batch axis ``b`` first):

    X      (b, N, C)
    E      (b, N, H, M, L, R)
    mask   (N, N) or (b, N, N), row i marks the keys token i may attend to
    alpha  (b, N, N, H, M) per-block logits (computed internally as (b, H, M, N, N))

``p`` is the parameter dict of one layer with the short names from
:mod:`tape.model.params` (``wq``, ``pos.w1``, ...), values Tensor or ndarray.
"""
from __future__ import annotations

import math

import numpy as np

from ..numcore import tensor as T
from ..numcore.tensor import Tensor, as_tensor
from .config import ConfigError, ModelConfig


def causal_mask(n: int) -> np.ndarray:
    return np.tril(np.ones((n, n)))


def _mask_last(mask: np.ndarray, lead_axes: int) -> np.ndarray:
    """Reshape an (N, N) / (b, N, N) mask to broadcast against (b, *lead, N, N)."""
    m = np.asarray(mask)
    if m.ndim == 2:
        m = m[None]
    return m.reshape(m.shape[:1] + (1,) * lead_axes + m.shape[1:])


def _split_heads(x: Tensor, cfg: ModelConfig) -> Tensor:
    b, n, _ = x.shape
    return x.reshape(b, n, cfg.heads, cfg.blocks, cfg.B)


def _block_logits_hm(xq, xk, E, cfg: ModelConfig, phi_u=None) -> Tensor:
    """Per-block logits in the compute layout (b, H, M, N, N)."""
    q = _split_heads(as_tensor(xq), cfg)
    k = _split_heads(as_tensor(xk), cfg)
    if cfg.phi == "bilinear":
        if phi_u is None:
            raise ConfigError("bilinear phi needs a phi.u parameter")
        q = T.einsum("bihmc,cl->bihml", q, phi_u)
        k = T.einsum("bihmc,cl->bihml", k, phi_u)
    E = as_tensor(E)
    qe = T.einsum("bihml,bihmlr->bhmir", q, E)
    ke = T.einsum("bjhml,bjhmlr->bhmrj", k, E)
    return T.matmul(qe, ke) * (1.0 / math.sqrt(cfg.head_dim))


def block_logits(xq: Tensor, xk: Tensor, E, cfg: ModelConfig, phi_u=None) -> Tensor:
    """Per-block logits ``(W_Q x_i)_m^T phi(e_im e_jm^T) (W_K x_j)_m / sqrt(head_dim)``.

    ``xq``/``xk`` are the already projected queries and keys (b, N, C). The
    position gram is never materialized: with ``phi(G) = U G U^T`` (``U = I`` for
    the identity phi) the logit factors as ``<U^T q e_i, U^T k e_j>`` in R-space.
    Returns (b, N, N, H, M).
    """
    return T.transpose(_block_logits_hm(xq, xk, E, cfg, phi_u), (0, 3, 4, 1, 2))


def rotary_logits(xq: Tensor, xk: Tensor, positions, cfg: ModelConfig) -> Tensor:
    """Classical rotary logits per head (b, H, N, N): rotate pairs (2m, 2m+1) by +w_m * pos."""
    d = cfg.head_dim
    b, n, _ = xq.shape
    m = d // 2
    w = cfg.rope_base ** (-2.0 * np.arange(m) / d)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * w[None]
    c, s = np.cos(ang), np.sin(ang)
    rot = np.stack([np.stack([c, -s], -1), np.stack([s, c], -1)], -2)  # (N, m, 2, 2)
    q = as_tensor(xq).reshape(b, n, cfg.heads, m, 2)
    k = as_tensor(xk).reshape(b, n, cfg.heads, m, 2)
    qr = T.einsum("imst,bihmt->bihms", rot, q)
    kr = T.einsum("jmst,bjhmt->bjhms", rot, k)
    return T.einsum("bihms,bjhms->bhij", qr, kr) * (1.0 / math.sqrt(d))


def token_mix(X, alpha_heads: Tensor, mask, p, cfg: ModelConfig) -> Tensor:
    """Attention over tokens with per-head logits (b, H, N, N); returns ``X + attn``."""
    X = as_tensor(X)
    b, n, c = X.shape
    xn = _pre_norm(X, p, "ln1")
    v = T.transpose((xn @ p["wv"]).reshape(b, n, cfg.heads, cfg.head_dim), (0, 2, 1, 3))
    attn = T.softmax(alpha_heads, axis=-1, mask=_mask_last(mask, 1))
    out = T.transpose(T.matmul(attn, v), (0, 2, 1, 3)).reshape(b, n, c)
    return X + out @ p["wo"]


def position_attend(alpha: Tensor, E, mask) -> Tensor:
    """``e~_im = sum_j softmax_j(alpha_ijm) e_jm`` per head and block.

    ``alpha`` is in the compute layout (b, H, M, N, N); E is (b, N, H, M, L, R).
    """
    E = as_tensor(E)
    b, n, h, m, l, r = E.shape
    weights = T.softmax(alpha, axis=-1, mask=_mask_last(mask, 2))
    ev = T.transpose(E.reshape(b, n, h, m, l * r), (0, 2, 3, 1, 4))
    out = T.matmul(weights, ev)  # (b, H, M, N, L*R)
    return T.transpose(out, (0, 3, 1, 2, 4)).reshape(b, n, h, m, l, r)


def psi(xt, p) -> Tensor:
    """Token features (b, N, C) -> diagonal entries (b, N, I)."""
    h = T.gelu(as_tensor(xt) @ p["psi.w1"] + p["psi.b1"])
    return h @ p["psi.w2"] + p["psi.b2"]


def position_mlp(xt, Et, p, cfg: ModelConfig) -> Tensor:
    """``e^_i = e~_i + unflatten(W2 diag(psi(x~_i)) W1^T flatten(e~_i))``.

    Only the (H, M, L) axes are mixed, so the map commutes with right
    multiplication on R. The shared form mixes heads only, separately for each
    (m, l); the full form mixes all of (H, M, L). With ``rotation_equivariant=False`` the weights act on
    (H, R) instead, the deliberately broken ablation.
    """
    Et = as_tensor(Et)
    d = psi(xt, p)  # (b, N, I)
    w1, w2 = p["pos.w1"], p["pos.w2"]
    if not cfg.rotation_equivariant:
        z = T.einsum("bihmlr,hrk->bimlk", Et, w1) * T.reshape(d, d.shape[:2] + (1, 1, d.shape[2]))
        return Et + T.einsum("bimlk,hrk->bihmlr", z, w2)
    if cfg.shared_mlp:
        # one H x I map reused at every (m, l): blocks never mix, so a
        # different rotation per block is still a symmetry
        b, n, i = d.shape
        z = T.einsum("bihmlr,hk->bimlkr", Et, w1) * T.reshape(d, (b, n, 1, 1, i, 1))
        return Et + T.einsum("bimlkr,hk->bihmlr", z, w2)
    z = T.einsum("bihmlr,hmlk->bikr", Et, w1) * T.reshape(d, d.shape + (1,))
    return Et + T.einsum("bikr,hmlk->bihmlr", z, w2)


def _pre_norm(X: Tensor, p, name: str) -> Tensor:
    return T.layer_norm(X, p[name + ".w"], p[name + ".b"])


def ffn(xt: Tensor, p) -> Tensor:
    h = T.gelu(xt @ p["ffn.w1"] + p["ffn.b1"])
    return h @ p["ffn.w2"] + p["ffn.b2"]


def tape_block(X, E, mask, p, cfg: ModelConfig, return_alpha: bool = False):
    """One layer: returns ``(X', E')`` (and the block logits if requested).

    Token path:    X~ = X + Attn(LN1 X);  X' = X~ + FFN(LN2 X~)
    Position path: E~ = PosAttn(alpha, E);  E' = E~ + PosMLP(LN2 X~, E~)
    """
    X, E = as_tensor(X), as_tensor(E)
    b = X.shape[0]
    if E.shape[0] != b:
        E = T.broadcast_to(E, (b,) + E.shape[1:])
    xn = _pre_norm(X, p, "ln1")
    alpha = _block_logits_hm(xn @ p["wq"], xn @ p["wk"], E, cfg, p.get("phi.u"))
    Xt = token_mix(X, T.tsum(alpha, axis=2), mask, p, cfg)
    zt = _pre_norm(Xt, p, "ln2")
    X_out = Xt + ffn(zt, p)
    Et = E
    if cfg.attn_path:
        Et = position_attend(alpha, E, mask)
        if cfg.pos_attn_residual:
            Et = Et + E
    E_out = position_mlp(zt, Et, p, cfg) if cfg.mlp_path else Et
    if return_alpha:
        return X_out, E_out, T.transpose(alpha, (0, 3, 4, 1, 2))
    return X_out, E_out


def rope_block(X, positions, mask, p, cfg: ModelConfig, return_alpha: bool = False):
    """Classical pre-norm rotary transformer layer (baseline)."""
    X = as_tensor(X)
    xn = _pre_norm(X, p, "ln1")
    alpha = rotary_logits(xn @ p["wq"], xn @ p["wk"], positions, cfg)
    Xt = token_mix(X, alpha, mask, p, cfg)
    X_out = Xt + ffn(_pre_norm(Xt, p, "ln2"), p)
    return (X_out, alpha) if return_alpha else X_out
