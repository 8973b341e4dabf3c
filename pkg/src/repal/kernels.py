"""Numeric kernels for the reference classifier: sparse linear forward pass and
the entailment-softmax binary-cross-entropy gradient.

The jitted path is used by default; set REPAL_NO_NUMBA=1 to force the pure
numpy fallback (same math, vectorized instead of looped). Batches arrive in
CSR form: indptr (n+1), indices (nnz), counts (nnz).
"""
from __future__ import annotations

import os

import numpy as np

EPS = 1e-7  # probability clamp inside the loss

USE_NUMBA = os.environ.get("REPAL_NO_NUMBA", "").lower() not in ("1", "true", "yes")


def softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _forward_np(indptr, indices, counts, weights, bias):
    n = indptr.shape[0] - 1
    logits = np.tile(bias, (n, 1))
    if indices.shape[0]:
        rows = np.repeat(np.arange(n), np.diff(indptr))
        contrib = counts[:, None] * weights[indices]
        np.add.at(logits, rows, contrib)
    return logits


def _loss_grad_np(indptr, indices, counts, labels, weights, bias):
    n = indptr.shape[0] - 1
    logits = _forward_np(indptr, indices, counts, weights, bias)
    probs = softmax_rows(logits)
    p = probs[:, 0]
    pc = np.clip(p, EPS, 1.0 - EPS)
    loss = -np.mean(labels * np.log(pc) + (1.0 - labels) * np.log(1.0 - pc))

    # dL/dp, zeroed where the clamp is active; then chain through softmax.
    live = (p > EPS) & (p < 1.0 - EPS)
    dldp = np.where(labels == 1, -1.0 / pc, 1.0 / (1.0 - pc)) * live
    onehot_e = np.zeros((n, 3))
    onehot_e[:, 0] = 1.0
    dz = (dldp * p)[:, None] * (onehot_e - probs) / n

    dw = np.zeros_like(weights)
    if indices.shape[0]:
        rows = np.repeat(np.arange(n), np.diff(indptr))
        np.add.at(dw, indices, counts[:, None] * dz[rows])
    db = dz.sum(axis=0)
    return loss, dw, db


if USE_NUMBA:
    from numba import njit

    @njit(cache=True)
    def _forward_nb(indptr, indices, counts, weights, bias):  # pragma: no cover
        n = indptr.shape[0] - 1
        logits = np.empty((n, 3))
        for i in range(n):
            z0, z1, z2 = bias[0], bias[1], bias[2]
            for j in range(indptr[i], indptr[i + 1]):
                f = indices[j]
                c = counts[j]
                z0 += c * weights[f, 0]
                z1 += c * weights[f, 1]
                z2 += c * weights[f, 2]
            logits[i, 0] = z0
            logits[i, 1] = z1
            logits[i, 2] = z2
        return logits

    @njit(cache=True)
    def _loss_grad_nb(indptr, indices, counts, labels, weights, bias):  # pragma: no cover
        n = indptr.shape[0] - 1
        eps = EPS
        loss = 0.0
        dw = np.zeros_like(weights)
        db = np.zeros(3)
        for i in range(n):
            z0, z1, z2 = bias[0], bias[1], bias[2]
            for j in range(indptr[i], indptr[i + 1]):
                f = indices[j]
                c = counts[j]
                z0 += c * weights[f, 0]
                z1 += c * weights[f, 1]
                z2 += c * weights[f, 2]
            m = max(z0, max(z1, z2))
            e0 = np.exp(z0 - m)
            e1 = np.exp(z1 - m)
            e2 = np.exp(z2 - m)
            total = e0 + e1 + e2
            s0 = e0 / total
            s1 = e1 / total
            s2 = e2 / total
            p = s0
            pc = min(max(p, eps), 1.0 - eps)
            y = labels[i]
            loss += -(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))
            if p <= eps or p >= 1.0 - eps:
                continue
            dldp = -1.0 / pc if y == 1.0 else 1.0 / (1.0 - pc)
            g0 = dldp * p * (1.0 - s0) / n
            g1 = dldp * p * (-s1) / n
            g2 = dldp * p * (-s2) / n
            for j in range(indptr[i], indptr[i + 1]):
                f = indices[j]
                c = counts[j]
                dw[f, 0] += c * g0
                dw[f, 1] += c * g1
                dw[f, 2] += c * g2
            db[0] += g0
            db[1] += g1
            db[2] += g2
        return loss / n, dw, db


def forward(indptr, indices, counts, weights, bias) -> np.ndarray:
    """Logits (n, 3) for a CSR batch under a linear model."""
    if USE_NUMBA:
        return _forward_nb(indptr, indices, counts, weights, bias)
    return _forward_np(indptr, indices, counts, weights, bias)


def loss_and_grad(indptr, indices, counts, labels, weights, bias):
    """Mean clamped BCE over the entailment softmax component, with gradients."""
    if USE_NUMBA:
        return _loss_grad_nb(indptr, indices, counts, labels, weights, bias)
    return _loss_grad_np(indptr, indices, counts, labels, weights, bias)
