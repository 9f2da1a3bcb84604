"""Barlow Twins pair loss on gathered pixel features, with its exact gradient."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_LAMBDA = 0.005


@dataclass(eq=False)
class CrossCorrelation:
    C: np.ndarray
    p_hat: np.ndarray
    q_hat: np.ndarray
    p_norm: np.ndarray
    q_norm: np.ndarray
    p_mean: np.ndarray
    q_mean: np.ndarray


def _standardize(X: np.ndarray, center: bool, side: str):
    mean = X.mean(axis=0) if center else np.zeros(X.shape[1], dtype=X.dtype)
    Xc = X - mean
    norm = np.sqrt((Xc * Xc).sum(axis=0))
    bad = np.flatnonzero(~(norm > 0))
    if bad.size:
        raise ValueError(f"feature dimension {int(bad[0])} of {side} has zero variance over the batch")
    return Xc / norm, norm, mean


def cross_correlation(P: np.ndarray, Q: np.ndarray, center: bool = True) -> CrossCorrelation:
    """Batch cross-correlation of two ``(B, D)`` feature matrices.

    Columns are mean-centred (unless ``center=False``) and scaled to unit
    Euclidean norm over the batch, so ``C[i, j] = sum_b p_hat[b, i] q_hat[b, j]``
    lies in ``[-1, 1]``.
    """
    P = np.asarray(P)
    Q = np.asarray(Q)
    if P.ndim != 2 or P.shape != Q.shape:
        raise ValueError(f"P and Q must be matching (B, D) matrices, got {P.shape} and {Q.shape}")
    if P.shape[0] < 2:
        raise ValueError("cross-correlation needs at least 2 pairs")
    p_hat, p_norm, p_mean = _standardize(P, center, "P")
    q_hat, q_norm, q_mean = _standardize(Q, center, "Q")
    return CrossCorrelation(p_hat.T @ q_hat, p_hat, q_hat, p_norm, q_norm, p_mean, q_mean)


def barlow_loss(C: np.ndarray, lam: float = DEFAULT_LAMBDA) -> float:
    """``sum_i (1 - C_ii)^2 + lam * sum_{i != j} C_ij^2``."""
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2 or C.shape[0] != C.shape[1]:
        raise ValueError(f"C must be square, got {C.shape}")
    diag = np.diag(C)
    on = np.sum((1.0 - diag) ** 2)
    off = np.sum(C * C) - np.sum(diag * diag)
    return float(on + lam * off)


def loss_grad_wrt_C(C: np.ndarray, lam: float) -> np.ndarray:
    G = 2.0 * lam * C
    np.fill_diagonal(G, -2.0 * (1.0 - np.diag(C)))
    return G


def _standardize_backward(g_hat, x_hat, norm, center):
    # x_hat = xc / ||xc||  =>  d xc = (g - x_hat * <x_hat, g>) / ||xc||
    g = (g_hat - x_hat * (x_hat * g_hat).sum(axis=0)) / norm
    if center:
        g = g - g.mean(axis=0)
    return g


def barlow_backward(P: np.ndarray, Q: np.ndarray, lam: float = DEFAULT_LAMBDA, center: bool = True):
    """Loss and its gradients with respect to the raw features ``P`` and ``Q``."""
    cc = cross_correlation(P, Q, center)
    loss = barlow_loss(cc.C, lam)
    G = loss_grad_wrt_C(cc.C, lam)
    dP = _standardize_backward(cc.q_hat @ G.T, cc.p_hat, cc.p_norm, center)
    dQ = _standardize_backward(cc.p_hat @ G, cc.q_hat, cc.q_norm, center)
    return loss, dP, dQ
