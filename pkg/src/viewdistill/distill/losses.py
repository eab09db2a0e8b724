"""InfoNCE over cosine similarities, with exact gradients."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from scipy.special import logsumexp, softmax

from ..errors import ConfigurationError, ContractError, DegenerateInputError

NORM_FLOOR = 1e-12


def _as_matrix(vectors, dim: int | None = None) -> np.ndarray:
    m = np.asarray(vectors, dtype=np.float64)
    if m.size == 0:
        return np.zeros((0, dim or 0))
    return np.atleast_2d(m)


def _unit(x: np.ndarray, axis: int = -1) -> tuple[np.ndarray, np.ndarray]:
    n = np.linalg.norm(x, axis=axis, keepdims=True)
    if np.any(n < NORM_FLOOR):
        raise DegenerateInputError("cosine similarity undefined for a zero-norm vector")
    return x / n, n


def _check(anchor, Q, G, gamma):
    f = np.asarray(anchor, dtype=np.float64).reshape(-1)
    q = _as_matrix(Q, f.size)
    g = _as_matrix(G, f.size)
    if len(q) == 0:
        raise ContractError("InfoNCE needs at least one positive")
    if q.shape[1] != f.size or g.shape[1] != f.size:
        raise ContractError("all vectors must share the anchor's dimension")
    if not gamma > 0:
        raise ConfigurationError(f"temperature must be positive, got {gamma}")
    return f, q, g


def info_nce(anchor, Q, G, gamma: float = 0.1) -> float:
    """``-log(sum_Q e^{s/γ} / (sum_Q e^{s/γ} + sum_G e^{s/γ}))`` with cosine ``s``."""
    f, q, g = _check(anchor, Q, G, gamma)
    v, _ = _unit(f)
    sq = _unit(q)[0] @ v / gamma
    sg = _unit(g)[0] @ v / gamma if len(g) else np.zeros(0)
    return max(float(logsumexp(np.concatenate([sq, sg])) - logsumexp(sq)), 0.0)


def info_nce_grad(anchor, Q, G, gamma: float = 0.1):
    """Loss and gradients w.r.t. the anchor, each positive and each negative.

    Returns ``(loss, d_anchor, d_Q, d_G)`` with ``d_Q``/``d_G`` shaped like the
    stacked inputs.
    """
    f, q, g = _check(anchor, Q, G, gamma)
    v, nf = _unit(f)
    X = np.concatenate([q, g])
    U, nx = _unit(X)
    s = U @ v
    z = s / gamma
    is_pos = np.arange(len(X)) < len(q)

    p_all = softmax(z)
    p_pos = np.zeros_like(z)
    p_pos[is_pos] = softmax(z[is_pos])
    loss = float(logsumexp(z) - logsumexp(z[is_pos]))

    w = (p_all - p_pos) / gamma  # dL/ds_k
    d_X = w[:, None] * (v[None, :] - s[:, None] * U) / nx
    d_f = (w[:, None] * (U - s[:, None] * v[None, :])).sum(axis=0) / nf
    return max(loss, 0.0), d_f, d_X[: len(q)], d_X[len(q):]


def info_nce_batched(anchors, Q, q_mask, G, g_mask, gamma: float = 0.1, with_grad: bool = True):
    """Many independent InfoNCE terms at once.

    ``anchors`` is (n, D); ``Q`` is (n, kq, D) and ``G`` is (n, kg, D), padded,
    with boolean masks marking the real entries. Returns per-anchor losses and,
    if requested, gradients of the *sum* of losses w.r.t. anchors, Q and G.
    Rows with an empty G have loss 0 and zero gradient.
    """
    F = np.asarray(anchors, dtype=np.float64)
    n, D = F.shape
    X = np.concatenate([np.asarray(Q, dtype=np.float64).reshape(n, -1, D),
                        np.asarray(G, dtype=np.float64).reshape(n, -1, D)], axis=1)
    kq = np.asarray(Q).reshape(n, -1, D).shape[1]
    mask = np.concatenate([np.asarray(q_mask, bool).reshape(n, -1), np.asarray(g_mask, bool).reshape(n, -1)], axis=1)
    if not np.all(mask[:, :kq].any(axis=1)):
        raise ContractError("every anchor needs at least one positive")
    if not gamma > 0:
        raise ConfigurationError(f"temperature must be positive, got {gamma}")

    nf = np.linalg.norm(F, axis=1, keepdims=True)
    nx = np.linalg.norm(X, axis=2, keepdims=True)
    if np.any(nf < NORM_FLOOR) or np.any((nx[..., 0] < NORM_FLOOR) & mask):
        raise DegenerateInputError("cosine similarity undefined for a zero-norm vector")
    nx = np.where(mask[..., None], nx, 1.0)
    V = F / nf
    U = X / nx
    s = np.einsum("nkd,nd->nk", U, V)
    z = np.where(mask, s / gamma, -np.inf)
    pos = np.zeros_like(mask)
    pos[:, :kq] = mask[:, :kq]
    zq = np.where(pos, z, -np.inf)

    losses = np.maximum(logsumexp(z, axis=1) - logsumexp(zq, axis=1), 0.0)
    if not with_grad:
        return losses

    w = (softmax(z, axis=1) - softmax(zq, axis=1)) / gamma
    d_X = w[..., None] * (V[:, None, :] - s[..., None] * U) / nx
    d_X = np.where(mask[..., None], d_X, 0.0)
    d_F = np.einsum("nk,nkd->nd", w, U - s[..., None] * V[:, None, :]) / nf
    return losses, d_F, d_X[:, :kq], d_X[:, kq:]


def cosine_matrix(A, B) -> np.ndarray:
    Ua, _ = _unit(np.asarray(A, dtype=np.float64))
    Ub, _ = _unit(np.asarray(B, dtype=np.float64))
    return Ua @ Ub.T


def _row_cross_entropy(logits: np.ndarray) -> float:
    return float(np.mean(logsumexp(logits, axis=1) - np.diag(logits)))


def batch_info_nce(A, B, gamma: float = 0.1, symmetric: bool = True) -> float:
    """Batch contrastive loss: row ``i`` of ``A`` and ``B`` form a positive pair,
    every mismatched row is a negative.

    The symmetric form averages the A-to-B and B-to-A directions.
    """
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    if A.shape != B.shape or A.ndim != 2:
        raise ContractError(f"batches must share shape, got {A.shape} and {B.shape}")
    if len(A) < 2:
        raise ConfigurationError("batch contrastive loss needs at least two rows")
    if not gamma > 0:
        raise ConfigurationError(f"temperature must be positive, got {gamma}")
    S = cosine_matrix(A, B) / gamma
    forward = _row_cross_entropy(S)
    if not symmetric:
        return forward
    return 0.5 * (forward + _row_cross_entropy(S.T))


def pretrain_loss(ego, exo_by_view: Sequence, best_idx, gamma: float = 0.1, symmetric: bool = True) -> float:
    """Ego-to-best-exo alignment plus best-exo-to-other-exo alignment.

    ``best_idx[i]`` picks the best exo view for sample ``i``. The remaining exo
    views of each sample are taken in ascending view order, so slot ``k`` of
    the second sum holds every sample's ``k``-th non-best view.
    """
    ego = np.asarray(ego, dtype=np.float64)
    exo = np.stack([np.asarray(x, dtype=np.float64) for x in exo_by_view])
    if exo.ndim != 3 or exo.shape[1:] != ego.shape:
        raise ContractError("every exo batch must match the ego batch shape")
    n_views, B, _ = exo.shape
    best_idx = np.asarray(best_idx, dtype=np.int64).reshape(-1)
    if best_idx.shape != (B,) or np.any(best_idx < 0) or np.any(best_idx >= n_views):
        raise ContractError("best_idx must give a valid exo index per sample")
    rows = np.arange(B)
    best = exo[best_idx, rows]
    total = batch_info_nce(ego, best, gamma, symmetric)
    others = np.array([[v for v in range(n_views) if v != b] for b in best_idx]).reshape(B, n_views - 1)
    for k in range(n_views - 1):
        total += batch_info_nce(best, exo[others[:, k], rows], gamma, symmetric)
    return total
