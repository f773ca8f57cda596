# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels in ``_fallback``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, sqrt

cnp.import_array()


def posterior_stats(points, y, mu, sigma2):
    cdef const double[:, ::1] P = np.ascontiguousarray(points, dtype=np.float64)
    cdef const double[:, ::1] Y = np.ascontiguousarray(y, dtype=np.float64)
    cdef Py_ssize_t M = Y.shape[0], d = Y.shape[1], N = P.shape[0]
    cdef const double[::1] MU = np.ascontiguousarray(np.broadcast_to(np.asarray(mu, dtype=np.float64), (M,)))
    cdef const double[::1] S2 = np.ascontiguousarray(np.broadcast_to(np.asarray(sigma2, dtype=np.float64), (M,)))
    mean_arr = np.zeros((M, d))
    tr_arr = np.zeros(M)
    cdef double[:, ::1] mean = mean_arr
    cdef double[::1] tr = tr_arr
    cdef double[::1] logit = np.empty(N)
    cdef Py_ssize_t m, i, k
    cdef double mx, z, acc, diff, w, m_k, sec
    for m in range(M):
        mx = -1e308
        for i in range(N):
            acc = 0.0
            for k in range(d):
                diff = Y[m, k] - MU[m] * P[i, k]
                acc += diff * diff
            logit[i] = -acc / (2.0 * S2[m])
            if logit[i] > mx:
                mx = logit[i]
        z = 0.0
        sec = 0.0
        for i in range(N):
            w = exp(logit[i] - mx)
            logit[i] = w
            z += w
            for k in range(d):
                mean[m, k] += w * P[i, k]
        for k in range(d):
            mean[m, k] /= z
        for i in range(N):
            acc = 0.0
            for k in range(d):
                diff = P[i, k] - mean[m, k]
                acc += diff * diff
            sec += logit[i] * acc
        tr[m] = sec / z
    return mean_arr, tr_arr


def posterior_weights(points, y, mu, sigma2):
    cdef const double[:, ::1] P = np.ascontiguousarray(points, dtype=np.float64)
    cdef const double[:, ::1] Y = np.ascontiguousarray(np.atleast_2d(y), dtype=np.float64)
    cdef Py_ssize_t M = Y.shape[0], d = Y.shape[1], N = P.shape[0]
    cdef const double[::1] MU = np.ascontiguousarray(np.broadcast_to(np.asarray(mu, dtype=np.float64), (M,)))
    cdef const double[::1] S2 = np.ascontiguousarray(np.broadcast_to(np.asarray(sigma2, dtype=np.float64), (M,)))
    out_arr = np.empty((M, N))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t m, i, k
    cdef double mx, z, acc, diff
    for m in range(M):
        mx = -1e308
        for i in range(N):
            acc = 0.0
            for k in range(d):
                diff = Y[m, k] - MU[m] * P[i, k]
                acc += diff * diff
            out[m, i] = -acc / (2.0 * S2[m])
            if out[m, i] > mx:
                mx = out[m, i]
        z = 0.0
        for i in range(N):
            out[m, i] = exp(out[m, i] - mx)
            z += out[m, i]
        for i in range(N):
            out[m, i] /= z
    return out_arr


def bump_features(x, centers, double bandwidth):
    cdef const double[:, ::1] X = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, ::1] C = np.ascontiguousarray(centers, dtype=np.float64)
    cdef Py_ssize_t M = X.shape[0], d = X.shape[1], J = C.shape[0]
    out_arr = np.empty((M, J))
    cdef double[:, ::1] out = out_arr
    cdef double inv = 1.0 / (2.0 * bandwidth * bandwidth)
    cdef Py_ssize_t m, j, k
    cdef double acc, diff
    for m in range(M):
        for j in range(J):
            acc = 0.0
            for k in range(d):
                diff = X[m, k] - C[j, k]
                acc += diff * diff
            out[m, j] = exp(-acc * inv)
    return out_arr


def nearest_neighbours(samples, points):
    cdef const double[:, ::1] S = np.ascontiguousarray(samples, dtype=np.float64)
    cdef const double[:, ::1] P = np.ascontiguousarray(points, dtype=np.float64)
    cdef Py_ssize_t M = S.shape[0], d = S.shape[1], N = P.shape[0]
    idx_arr = np.empty(M, dtype=np.int64)
    dist_arr = np.empty(M)
    cdef long long[::1] idx = idx_arr
    cdef double[::1] dist = dist_arr
    cdef Py_ssize_t m, i, k, best
    cdef double acc, diff, bd
    for m in range(M):
        bd = 1e308
        best = 0
        for i in range(N):
            acc = 0.0
            for k in range(d):
                diff = S[m, k] - P[i, k]
                acc += diff * diff
            if acc < bd:
                bd = acc
                best = i
        idx[m] = best
        dist[m] = sqrt(bd)
    return idx_arr, dist_arr
