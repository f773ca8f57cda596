"""Pure NumPy implementations of the hot kernels."""
from __future__ import annotations

import numpy as np

# Rows processed per block, bounds the (rows, N) logit buffer.
_BLOCK = 2048


def posterior_stats(points, y, mu, sigma2):
    """Softmax posterior over ``points`` for each row of ``y``.

    Logits are -||y - mu x_i||^2 / (2 sigma2) with the row maximum subtracted.
    ``mu`` and ``sigma2`` are per-row arrays. Returns (mean (M, d), trace of the
    posterior covariance (M,)).
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    M, d = y.shape
    mu = np.broadcast_to(np.asarray(mu, dtype=np.float64), (M,))
    sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=np.float64), (M,))
    sq = np.einsum("ij,ij->i", points, points)
    mean = np.empty((M, d))
    tr = np.empty(M)
    for lo in range(0, M, _BLOCK):
        hi = min(M, lo + _BLOCK)
        yb, mb, sb = y[lo:hi], mu[lo:hi, None], sigma2[lo:hi, None]
        # ||y - mu x||^2 = ||y||^2 - 2 mu <y, x> + mu^2 ||x||^2; the ||y||^2 term
        # is constant per row and cancels in the softmax.
        logits = (2.0 * mb * (yb @ points.T) - mb * mb * sq[None, :]) / (2.0 * sb)
        logits -= logits.max(axis=1, keepdims=True)
        w = np.exp(logits)
        w /= w.sum(axis=1, keepdims=True)
        m = w @ points
        mean[lo:hi] = m
        second = w @ sq
        tr[lo:hi] = np.maximum(second - np.einsum("ij,ij->i", m, m), 0.0)
    return mean, tr


def posterior_weights(points, y, mu, sigma2):
    """Full (M, N) softmax weight matrix, same logits as posterior_stats."""
    points = np.asarray(points, dtype=np.float64)
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    M = y.shape[0]
    mu = np.broadcast_to(np.asarray(mu, dtype=np.float64), (M,))[:, None]
    sigma2 = np.broadcast_to(np.asarray(sigma2, dtype=np.float64), (M,))[:, None]
    diff = y[:, None, :] - mu[:, :, None] * points[None, :, :]
    logits = -np.einsum("mnd,mnd->mn", diff, diff) / (2.0 * sigma2)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


def bump_features(x, centers, bandwidth):
    """exp(-||x - c_j||^2 / (2 b^2)) for every row of ``x`` and center ``c_j``."""
    x = np.asarray(x, dtype=np.float64)
    centers = np.asarray(centers, dtype=np.float64)
    d2 = (
        np.einsum("ij,ij->i", x, x)[:, None]
        - 2.0 * x @ centers.T
        + np.einsum("ij,ij->i", centers, centers)[None, :]
    )
    return np.exp(-np.maximum(d2, 0.0) / (2.0 * bandwidth * bandwidth))


def nearest_neighbours(samples, points):
    """Brute-force nearest training point for every sample."""
    samples = np.asarray(samples, dtype=np.float64)
    points = np.asarray(points, dtype=np.float64)
    idx = np.empty(len(samples), dtype=np.int64)
    dist = np.empty(len(samples))
    for lo in range(0, len(samples), _BLOCK):
        hi = min(len(samples), lo + _BLOCK)
        diff = samples[lo:hi, None, :] - points[None, :, :]
        d2 = np.einsum("mnd,mnd->mn", diff, diff)
        j = np.argmin(d2, axis=1)
        idx[lo:hi] = j
        dist[lo:hi] = np.sqrt(d2[np.arange(hi - lo), j])
    return idx, dist
