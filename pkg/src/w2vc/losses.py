"""Contrastive, codebook (diversity / k-means), and consistency losses and
their weighted combination."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc
from .tensor_core import Tensor

COSINE_EPS = 1e-8


@dataclass
class NegativeSet:
    anchors: np.ndarray   # A
    indices: np.ndarray   # A x min(N, T-1)


@dataclass
class LossBreakdown:
    L_m: float
    L_cb: float
    L_c: float
    L: float
    alpha: float
    gamma: float
    L_d: float | None = None
    L_k: float | None = None
    total: Tensor | None = field(default=None, repr=False, compare=False)


def cosine(x, y) -> Tensor:
    x, y = tc.as_tensor(x), tc.as_tensor(y)
    denom = tc.clamp_min(tc.l2_norm(x) * tc.l2_norm(y), COSINE_EPS)
    return tc.sum_(x * y) / denom


def sample_negatives(T: int, positions, N: int, rng: np.random.Generator) -> NegativeSet:
    """For each anchor t, ``min(N, T-1)`` distinct frames drawn uniformly from
    ``[0, T) \\ {t}``."""
    positions = np.asarray(positions, dtype=np.int64)
    if T < 2:
        warnings.warn("utterance of one frame has no negatives; anchors skipped", stacklevel=2)
        return NegativeSet(np.zeros(0, dtype=np.int64), np.zeros((0, 0), dtype=np.int64))
    n = min(N, T - 1)
    keys = rng.random((len(positions), T - 1))
    idx = np.argsort(keys, axis=1, kind="stable")[:, :n]
    idx = idx + (idx >= positions[:, None])
    return NegativeSet(positions, idx)


def contrastive_loss(C_proj, Z_hat, neg: NegativeSet, kappa: float = 0.1) -> Tensor:
    """Mean over anchors of ``-log softmax(cos(c_t, candidates) / kappa)[positive]``
    where candidates are ``z_hat_t`` followed by the sampled negatives."""
    if not kappa > 0:
        raise ValueError(f"temperature kappa must be positive, got {kappa}")
    if len(neg.anchors) == 0:
        raise ValueError("contrastive loss needs at least one anchored frame")
    C_proj, Z_hat = tc.as_tensor(C_proj), tc.as_tensor(Z_hat)
    A = len(neg.anchors)
    cand = np.concatenate([neg.anchors[:, None], neg.indices], axis=1)
    c = tc.reshape(C_proj[neg.anchors], (A, 1, C_proj.shape[1]))
    z = Z_hat[cand]
    dots = tc.sum_(c * z, axis=-1)
    denom = tc.clamp_min(tc.reshape(tc.l2_norm(c, axis=-1), (A, 1)) * tc.l2_norm(z, axis=-1), COSINE_EPS)
    logits = dots / denom * (1.0 / kappa)
    logp = tc.log_softmax(logits, axis=-1)
    return -tc.mean(logp[:, 0])


def _xlogx(p: Tensor) -> Tensor:
    def fwd(a):
        out = np.zeros_like(a)
        pos = a > 0
        out[pos] = a[pos] * np.log(a[pos])
        return out

    def bwd(n, g):
        a = n.inputs[0].data
        d = np.zeros_like(a)
        pos = a > 0
        d[pos] = np.log(a[pos]) + 1.0
        return (g * d,)
    return tc.apply_op("xlogx", fwd, bwd, p)


def diversity_loss(mean_probs) -> Tensor:
    """``(GV - sum_g exp(H(p_g))) / GV`` over batch-averaged code probabilities."""
    p = tc.as_tensor(mean_probs)
    if p.ndim != 2:
        raise ValueError("mean_probs must be G x V")
    if np.abs(p.data.sum(axis=1) - 1.0).max() > 1e-6 or (p.data < 0).any():
        raise ValueError("mean_probs rows must be probability distributions")
    G, V = p.shape
    entropy = -tc.sum_(_xlogx(p), axis=1)
    perplexity = tc.sum_(tc.exp(entropy))
    return (G * V - perplexity) * (1.0 / (G * V))


def consistency_loss(X, S) -> Tensor:
    """Per-frame Euclidean distance between features and reconstruction, averaged."""
    X, S = tc.as_tensor(X), tc.as_tensor(S)
    if X.shape != S.shape:
        raise tc.ShapeError(f"consistency loss shapes differ: {X.shape} vs {S.shape}")
    return tc.mean(tc.l2_norm(X - S, axis=-1))


def total_loss(L_m: Tensor, cfg, L_d: Tensor | None = None, L_k: Tensor | None = None,
               L_c: Tensor | None = None) -> LossBreakdown:
    """Combine terms as ``L_m + L_cb + gamma * L_c``.

    ``L_cb`` is ``alpha * L_d`` for a Gumbel quantizer and ``L_k`` for k-means.
    With ``gamma == 0`` the consistency term is never touched.
    """
    if cfg.quantizer == "gumbel":
        L_cb = L_d * cfg.alpha
    else:
        L_cb = L_k
    total = L_m + L_cb
    gamma = cfg.gamma_consistency
    lc = 0.0
    if gamma:
        total = total + L_c * float(gamma)
        lc = float(L_c.data)
    return LossBreakdown(
        L_m=float(L_m.data), L_cb=float(L_cb.data), L_c=lc, L=float(total.data),
        alpha=cfg.alpha, gamma=float(gamma),
        L_d=None if L_d is None else float(L_d.data),
        L_k=None if L_k is None else float(L_k.data),
        total=total,
    )
