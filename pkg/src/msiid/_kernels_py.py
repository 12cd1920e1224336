"""Pure numpy/scipy versions of the compiled kernels in ``_kernels.pyx``.

Same signatures and status codes; used when the extension is not built or
``MSIID_PURE_PYTHON=1`` is set.
"""

import numpy as np
import scipy.sparse as sp

BACKEND = "python"


def _as_csr(indptr, indices, data, ncols):
    return sp.csr_matrix((data, indices, indptr), shape=(len(indptr) - 1, ncols))


def csr_matvec(indptr, indices, data, x):
    x = np.asarray(x, dtype=np.float64)
    return _as_csr(indptr, indices, data, len(x)) @ x


def cg_csr(indptr, indices, data, b, x0, tol, max_iter):
    b = np.asarray(b, dtype=np.float64)
    A = _as_csr(indptr, indices, data, len(b))
    x = np.array(x0, dtype=np.float64, copy=True)
    r = b - A @ x
    p = r.copy()
    rs = float(r @ r)
    thresh = tol * float(np.sqrt(b @ b))
    if np.sqrt(rs) <= thresh:
        return x, 0, float(np.sqrt(rs)), 0
    status = 1
    it = 0
    while it < max_iter:
        ap = A @ p
        pap = float(p @ ap)
        if not np.isfinite(pap):
            status = 3
            break
        if pap <= 0.0:
            status = 2
            break
        alpha = rs / pap
        x += alpha * p
        r -= alpha * ap
        rs_new = float(r @ r)
        it += 1
        if not np.isfinite(rs_new):
            status = 3
            break
        if np.sqrt(rs_new) <= thresh:
            rs = rs_new
            status = 0
            break
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x, it, float(np.sqrt(rs)), status


def pair_cosine_distance(spectra, pairs):
    a = spectra[pairs[:, 0]]
    b = spectra[pairs[:, 1]]
    na = np.sqrt(np.einsum("ij,ij->i", a, a))
    nb = np.sqrt(np.einsum("ij,ij->i", b, b))
    ab = np.einsum("ij,ij->i", a, b)
    ok = (na > 0) & (nb > 0)
    d = np.zeros(len(pairs))
    d[ok] = 1.0 - ab[ok] / (na[ok] * nb[ok])
    return d
