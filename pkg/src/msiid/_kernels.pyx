# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loops: CSR products, conjugate gradient, pair distances.

Every reduction runs in a fixed sequential order so results are bitwise
reproducible across runs.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, isfinite

cnp.import_array()

BACKEND = "cython"


cdef void _csr_mv(const int* indptr, const int* indices, const double* data,
                  const double* x, double* out, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    cdef int k, k1
    cdef double acc
    for i in range(n):
        acc = 0.0
        k1 = indptr[i + 1]
        for k in range(indptr[i], k1):
            acc += data[k] * x[indices[k]]
        out[i] = acc


cdef double _csr_mv_dot(const int* indptr, const int* indices, const double* data,
                        const double* x, double* out, Py_ssize_t n) noexcept nogil:
    # out = A x, returning <x, out> from the same pass
    cdef Py_ssize_t i
    cdef int k, k1
    cdef double acc, total = 0.0
    for i in range(n):
        acc = 0.0
        k1 = indptr[i + 1]
        for k in range(indptr[i], k1):
            acc += data[k] * x[indices[k]]
        out[i] = acc
        total += x[i] * acc
    return total


cdef double _dot(const double* a, const double* b, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i
    cdef double acc = 0.0
    for i in range(n):
        acc += a[i] * b[i]
    return acc


def csr_matvec(const int[::1] indptr, const int[::1] indices,
               const double[::1] data, const double[::1] x):
    cdef Py_ssize_t n = indptr.shape[0] - 1
    out = np.zeros(n, dtype=np.float64)
    if n == 0 or indices.shape[0] == 0:
        return out
    cdef double[::1] o = out
    with nogil:
        _csr_mv(&indptr[0], &indices[0], &data[0], &x[0], &o[0], n)
    return out


def cg_csr(const int[::1] indptr, const int[::1] indices,
           const double[::1] data, const double[::1] b,
           const double[::1] x0, double tol, Py_ssize_t max_iter):
    """Conjugate gradient on a CSR matrix.

    Returns ``(x, iterations, residual_norm, status)`` with status 0 for
    convergence, 1 for an exhausted budget, 2 for curvature breakdown and
    3 for a non-finite iterate.
    """
    cdef Py_ssize_t n = b.shape[0], i, it = 0
    cdef int status = 1
    x_arr = np.array(x0, dtype=np.float64, copy=True)
    r_arr = np.empty(n, dtype=np.float64)
    p_arr = np.empty(n, dtype=np.float64)
    ap_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] x = x_arr
    cdef double[::1] r = r_arr
    cdef double[::1] p = p_arr
    cdef double[::1] ap = ap_arr
    cdef double bnorm, rs, rs_new, pap, alpha, beta, thresh

    cdef const int* ip = &indptr[0]
    cdef const int* ix = &indices[0] if indices.shape[0] else NULL
    cdef const double* dv = &data[0] if data.shape[0] else NULL
    cdef const double* bp = &b[0] if n else NULL
    cdef double* xp = &x[0] if n else NULL
    cdef double* rp = &r[0] if n else NULL
    cdef double* pp = &p[0] if n else NULL
    cdef double* app = &ap[0] if n else NULL

    with nogil:
        bnorm = sqrt(_dot(bp, bp, n))
        _csr_mv(ip, ix, dv, xp, app, n)
        rs = 0.0
        for i in range(n):
            rp[i] = bp[i] - app[i]
            pp[i] = rp[i]
            rs += rp[i] * rp[i]
        thresh = tol * bnorm
        if sqrt(rs) <= thresh:
            status = 0
        while status == 1 and it < max_iter:
            pap = _csr_mv_dot(ip, ix, dv, pp, app, n)
            if not isfinite(pap):
                status = 3
                break
            if pap <= 0.0:
                status = 2
                break
            alpha = rs / pap
            rs_new = 0.0
            for i in range(n):
                xp[i] += alpha * pp[i]
                rp[i] -= alpha * app[i]
                rs_new += rp[i] * rp[i]
            it += 1
            if not isfinite(rs_new):
                status = 3
                break
            if sqrt(rs_new) <= thresh:
                status = 0
                rs = rs_new
                break
            beta = rs_new / rs
            rs = rs_new
            for i in range(n):
                pp[i] = rp[i] + beta * pp[i]
    return x_arr, it, sqrt(rs), status


def pair_cosine_distance(const double[:, ::1] spectra,
                         const long[:, ::1] pairs):
    """``1 - <a, b> / (|a| |b|)`` per pixel pair; zero-norm pairs give 0."""
    cdef Py_ssize_t m = pairs.shape[0], nb = spectra.shape[1], i, k, p, q
    out = np.empty(m, dtype=np.float64)
    cdef double[::1] d = out
    cdef double ab, aa, bb
    with nogil:
        for i in range(m):
            p = pairs[i, 0]
            q = pairs[i, 1]
            ab = 0.0
            aa = 0.0
            bb = 0.0
            for k in range(nb):
                ab = ab + spectra[p, k] * spectra[q, k]
                aa = aa + spectra[p, k] * spectra[p, k]
                bb = bb + spectra[q, k] * spectra[q, k]
            if aa == 0.0 or bb == 0.0:
                d[i] = 0.0
            else:
                d[i] = 1.0 - ab / (sqrt(aa) * sqrt(bb))
    return out
