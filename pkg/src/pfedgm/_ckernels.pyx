# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled mixture-classifier kernels.

Contract identical to ``pfedgm._pykernels``; inputs are C-contiguous float64
arrays, labels int64 and the presence mask uint8 (see ``pfedgm.kernels``).
"""

import numpy as np
from libc.math cimport exp, log


cdef double _row_ce(double[::1] row, long label, double[::1] prob) noexcept nogil:
    # softmax into prob, returns -log prob[label]
    cdef Py_ssize_t K = row.shape[0], i
    cdef double top = row[0], s = 0.0
    for i in range(1, K):
        if row[i] > top:
            top = row[i]
    for i in range(K):
        prob[i] = exp(row[i] - top)
        s += prob[i]
    for i in range(K):
        prob[i] /= s
    return log(s) - (row[label] - top)


def mixture_logits(double[:, ::1] z, double[:, ::1] means, double[:, ::1] prec,
                   double[::1] bias):
    cdef Py_ssize_t n = z.shape[0], d = z.shape[1], K = means.shape[0]
    cdef Py_ssize_t r, i, j
    cdef double q, t
    out = np.empty((n, K), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for r in range(n):
            for i in range(K):
                q = 0.0
                for j in range(d):
                    t = z[r, j] - means[i, j]
                    q = q + t * t * prec[i, j]
                o[r, i] = -0.5 * q + bias[i]
    return out


def mixture_ce_grads(double[:, ::1] z, long[::1] y, double[:, ::1] means,
                     double[:, ::1] prec, double[::1] bias):
    cdef Py_ssize_t n = z.shape[0], d = z.shape[1], K = means.shape[0]
    cdef Py_ssize_t r, i, j
    cdef double q, t, gi, w, total = 0.0
    cdef double inv_n = 1.0 / n
    dz_a = np.zeros((n, d), dtype=np.float64)
    dm_a = np.zeros((K, d), dtype=np.float64)
    dp_a = np.zeros((K, d), dtype=np.float64)
    db_a = np.zeros(K, dtype=np.float64)
    cdef double[:, ::1] dz = dz_a, dm = dm_a, dp = dp_a
    cdef double[::1] db = db_a
    cdef double[::1] row = np.empty(K, dtype=np.float64)
    cdef double[::1] prob = np.empty(K, dtype=np.float64)
    with nogil:
        for r in range(n):
            for i in range(K):
                q = 0.0
                for j in range(d):
                    t = z[r, j] - means[i, j]
                    q = q + t * t * prec[i, j]
                row[i] = -0.5 * q + bias[i]
            total += _row_ce(row, y[r], prob)
            for i in range(K):
                gi = prob[i]
                if i == y[r]:
                    gi = gi - 1.0
                gi = gi * inv_n
                db[i] += gi
                for j in range(d):
                    t = z[r, j] - means[i, j]
                    w = gi * prec[i, j] * t
                    dz[r, j] -= w
                    dm[i, j] += w
                    dp[i, j] -= 0.5 * gi * t * t
    return total * inv_n, dz_a, dm_a, dp_a, db_a


def fusion_logits(double[:, ::1] z, double[:, ::1] centers, double[:, ::1] prec_star,
                  double[::1] a_g, double[:, ::1] protos, double[::1] a_c, double coef,
                  unsigned char[::1] present, double[::1] bias):
    cdef Py_ssize_t n = z.shape[0], d = z.shape[1], K = centers.shape[0]
    cdef Py_ssize_t r, i, j
    cdef double q, qc, t
    out = np.empty((n, K), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for r in range(n):
            for i in range(K):
                q = 0.0
                for j in range(d):
                    t = z[r, j] - centers[i, j]
                    q = q + t * t * (a_g[j] * prec_star[i, j])
                qc = 0.0
                if present[i]:
                    for j in range(d):
                        t = z[r, j] - protos[i, j]
                        qc = qc + t * t * a_c[j]
                    qc = -coef * qc
                o[r, i] = -0.5 * q + qc + bias[i]
    return out


def fusion_ce_grads(double[:, ::1] z, long[::1] y, double[:, ::1] centers,
                    double[:, ::1] prec_star, double[::1] a_g, double[:, ::1] protos,
                    double[::1] a_c, double coef, unsigned char[::1] present,
                    double[::1] bias):
    cdef Py_ssize_t n = z.shape[0], d = z.shape[1], K = centers.shape[0]
    cdef Py_ssize_t r, i, j
    cdef double q, qc, t, gi, total = 0.0
    cdef double inv_n = 1.0 / n
    dc_a = np.zeros((K, d), dtype=np.float64)
    db_a = np.zeros(K, dtype=np.float64)
    dg_a = np.zeros(d, dtype=np.float64)
    dac_a = np.zeros(d, dtype=np.float64)
    cdef double[:, ::1] dc = dc_a
    cdef double[::1] db = db_a, dg = dg_a, dac = dac_a
    cdef double[::1] row = np.empty(K, dtype=np.float64)
    cdef double[::1] prob = np.empty(K, dtype=np.float64)
    with nogil:
        for r in range(n):
            for i in range(K):
                q = 0.0
                for j in range(d):
                    t = z[r, j] - centers[i, j]
                    q = q + t * t * (a_g[j] * prec_star[i, j])
                qc = 0.0
                if present[i]:
                    for j in range(d):
                        t = z[r, j] - protos[i, j]
                        qc = qc + t * t * a_c[j]
                    qc = -coef * qc
                row[i] = -0.5 * q + qc + bias[i]
            total += _row_ce(row, y[r], prob)
            for i in range(K):
                gi = prob[i]
                if i == y[r]:
                    gi = gi - 1.0
                gi = gi * inv_n
                db[i] += gi
                for j in range(d):
                    t = z[r, j] - centers[i, j]
                    dc[i, j] += gi * (a_g[j] * prec_star[i, j]) * t
                    dg[j] -= 0.5 * gi * prec_star[i, j] * t * t
                if present[i]:
                    for j in range(d):
                        t = z[r, j] - protos[i, j]
                        dac[j] -= coef * gi * t * t
    return total * inv_n, dc_a, db_a, dg_a, dac_a
