"""Sparse operators for the neighbor-pair, generic and data energy terms.

Coefficient vectors are pixel-major: entry ``p * J + j`` is coefficient ``j``
of pixel ``p``. Spectra live in an ``(N, K)`` matrix.

Two families of pair terms exist, for a pair ``(p, q)`` with scalar weight
``c`` and basis ``B``:

* luminance-coupled: ``c (L_p B x_q - L_q B x_p)``, ``L_p = diag(l_p)``;
* plain difference: ``c (B x_q - B x_p)``.

The tall operators (one K-row block per pair) are built by
:func:`assemble_pair_operator`. The solver never needs them explicitly: it
works with their Gram matrices, assembled block-wise by :func:`pair_gram`.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.io
import scipy.sparse as sp

from .basis import BasisMatrix
from .speccube import SpectralCube
from .weights import WeightField


@dataclass(frozen=True, eq=False)
class SparseSystem:
    """Symmetric PSD normal system ``matrix @ x = rhs``."""

    matrix: sp.csr_matrix
    rhs: np.ndarray
    description: str = ""

    @property
    def n(self) -> int:
        return self.matrix.shape[0]


def _canonical(m) -> sp.csr_matrix:
    m = sp.csr_matrix(m)
    m.sum_duplicates()
    m.sort_indices()
    return m


def _spectra(cube) -> np.ndarray | None:
    if cube is None:
        return None
    if isinstance(cube, SpectralCube):
        return cube.pixels()
    return np.asarray(cube, dtype=np.float64)


def _check(weights: WeightField, basis: BasisMatrix, lum) -> None:
    if lum is not None:
        if lum.shape[0] != weights.n_pixels:
            raise ValueError(f"cube has {lum.shape[0]} pixels, weight field {weights.n_pixels}")
        if lum.shape[1] != basis.bands:
            raise ValueError(f"cube has {lum.shape[1]} bands, basis {basis.bands}")


def assemble_pair_operator(cube, basis: BasisMatrix, weights: WeightField,
                           pair_weight) -> sp.csr_matrix:
    """Tall ``(P*K, N*J)`` operator for one pair term.

    ``cube`` selects the luminance-coupled form; pass ``None`` for the plain
    difference form. ``pair_weight`` is the per-pair scalar (``weights.w`` or
    ``weights.v``), or the string ``"w"`` / ``"v"``.
    """
    lum = _spectra(cube)
    _check(weights, basis, lum)
    c = _resolve_weight(weights, pair_weight)
    n, (k, j) = weights.n_pixels, basis.columns.shape
    pairs = weights.pairs
    P = len(pairs)
    if P == 0:
        return sp.csr_matrix((0, n * j))
    B = basis.columns
    if lum is None:
        blk_q = c[:, None, None] * B[None]  # (P, K, J) at columns of q
        blk_p = -blk_q
    else:
        p, q = pairs[:, 0], pairs[:, 1]
        blk_q = c[:, None, None] * lum[p][:, :, None] * B[None]
        blk_p = -c[:, None, None] * lum[q][:, :, None] * B[None]
    rows = (np.arange(P)[:, None, None] * k + np.arange(k)[None, :, None]) * np.ones((1, 1, j), int)
    cols_q = pairs[:, 1][:, None, None] * j + np.arange(j)[None, None, :] + np.zeros((1, k, 1), int)
    cols_p = pairs[:, 0][:, None, None] * j + np.arange(j)[None, None, :] + np.zeros((1, k, 1), int)
    A = sp.coo_matrix(
        (np.concatenate([blk_q.ravel(), blk_p.ravel()]),
         (np.concatenate([rows.ravel(), rows.ravel()]),
          np.concatenate([cols_q.ravel(), cols_p.ravel()]))),
        shape=(P * k, n * j),
    )
    return _canonical(A)


def _resolve_weight(weights: WeightField, pair_weight) -> np.ndarray:
    if isinstance(pair_weight, str):
        pair_weight = {"w": weights.w, "v": weights.v}[pair_weight]
    c = np.asarray(pair_weight, dtype=np.float64)
    if c.shape != (weights.n_pairs,):
        raise ValueError(f"need {weights.n_pairs} pair weights, got shape {c.shape}")
    return c


def assemble_generic_constraint(cube, basis: BasisMatrix) -> tuple[sp.csr_matrix, np.ndarray]:
    """``(M, C)`` with ``M = blockdiag(B)`` and ``C`` the flattened luminance.

    ``M x`` reconstructs every pixel's spectrum, so ``|M x - C|^2`` keeps the
    reconstruction close to the observed image.
    """
    lum = _spectra(cube)
    if lum.shape[1] != basis.bands:
        raise ValueError(f"cube has {lum.shape[1]} bands, basis {basis.bands}")
    n = lum.shape[0]
    M = sp.kron(sp.identity(n, format="csr"), sp.csr_matrix(basis.columns), format="csr")
    return _canonical(M), lum.ravel().copy()


def assemble_data_operator(fixed_coeffs, fixed_basis: BasisMatrix,
                           free_basis: BasisMatrix) -> sp.csr_matrix:
    """Block-diagonal ``diag(B_fixed c_p) B_free`` per pixel, shape ``(N*K, N*J_free)``."""
    c = np.asarray(fixed_coeffs, dtype=np.float64).reshape(-1, fixed_basis.rank)
    if fixed_basis.bands != free_basis.bands:
        raise ValueError("fixed and free bases differ in band count")
    y = c @ fixed_basis.columns.T  # (N, K)
    n, k = y.shape
    j = free_basis.rank
    vals = y[:, :, None] * free_basis.columns[None]
    rows = np.arange(n * k).reshape(n, k, 1) + np.zeros((1, 1, j), int)
    cols = (np.arange(n)[:, None, None] * j + np.arange(j)[None, None, :]) + np.zeros((1, k, 1), int)
    return _canonical(sp.coo_matrix((vals.ravel(), (rows.ravel(), cols.ravel())),
                                    shape=(n * k, n * j)))


def build_normal_system(terms=(), affine_terms=(), description: str = "") -> SparseSystem:
    """``sum(lam * A.T A)`` over all terms, rhs ``sum(lam * A.T b)`` over affine ones.

    ``terms`` holds ``(A, lam)``; ``affine_terms`` holds ``(A, b, lam)`` for
    ``lam * |A x - b|^2``.
    """
    mats = [(A, lam) for A, lam in terms] + [(A, lam) for A, _, lam in affine_terms]
    if not mats:
        raise ValueError("no terms given")
    ncols = {A.shape[1] for A, _ in mats}
    if len(ncols) != 1:
        raise ValueError(f"operators disagree on column count: {sorted(ncols)}")
    n = ncols.pop()
    Q = sp.csr_matrix((n, n))
    rhs = np.zeros(n)
    for A, lam in mats:
        A = sp.csr_matrix(A)
        Q = Q + lam * (A.T @ A)
    for A, b, lam in affine_terms:
        rhs += lam * (sp.csr_matrix(A).T @ np.asarray(b, dtype=np.float64))
    return SparseSystem(_canonical(Q), rhs, description)


# -- block-wise Gram assembly (solver fast path) ------------------------------


@dataclass
class BlockGram:
    """Gram matrix stored as per-pixel diagonal blocks plus per-pair blocks.

    ``offdiag[i]`` is the ``(p, q)`` block for pair ``i``; the ``(q, p)``
    block is its transpose.
    """

    diag: np.ndarray  # (N, J, J)
    offdiag: np.ndarray  # (P, J, J)
    pairs: np.ndarray

    def __add__(self, other: "BlockGram") -> "BlockGram":
        return BlockGram(self.diag + other.diag, self.offdiag + other.offdiag, self.pairs)

    def __mul__(self, lam: float) -> "BlockGram":
        return BlockGram(lam * self.diag, lam * self.offdiag, self.pairs)

    __rmul__ = __mul__

    def add_diag(self, blocks: np.ndarray) -> "BlockGram":
        return BlockGram(self.diag + blocks, self.offdiag, self.pairs)

    def _values(self) -> np.ndarray:
        flat = self.offdiag.ravel()
        return np.concatenate([self.diag.ravel(), flat, flat])

    def to_csr(self) -> sp.csr_matrix:
        n, j, _ = self.diag.shape
        indptr, indices, order = _csr_layout(n, j, self.pairs)
        return sp.csr_matrix((self._values()[order], indices, indptr), shape=(n * j, n * j))


_LAYOUT_CACHE: dict = {}


def _csr_layout(n: int, j: int, pairs: np.ndarray):
    """CSR structure of a block Gram and the permutation from block order.

    Diagonal and pair blocks never overlap (pairs are distinct with p != q),
    so the pattern depends only on the grid and is cached.
    """
    key = (n, j, pairs.shape, pairs.tobytes())
    hit = _LAYOUT_CACHE.get(key)
    if hit is not None:
        return hit
    jj = np.arange(j)
    r_loc = np.repeat(jj, j)
    c_loc = np.tile(jj, j)
    rows = [(np.arange(n)[:, None] * j + r_loc[None]).ravel()]
    cols = [(np.arange(n)[:, None] * j + c_loc[None]).ravel()]
    if len(pairs):
        p, q = pairs[:, 0], pairs[:, 1]
        rows.append((p[:, None] * j + r_loc[None]).ravel())
        cols.append((q[:, None] * j + c_loc[None]).ravel())
        rows.append((q[:, None] * j + c_loc[None]).ravel())
        cols.append((p[:, None] * j + r_loc[None]).ravel())
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    order = np.lexsort((cols, rows))
    indices = cols[order].astype(np.int32)
    indptr = np.zeros(n * j + 1, dtype=np.int32)
    np.cumsum(np.bincount(rows, minlength=n * j), out=indptr[1:])
    if len(_LAYOUT_CACHE) > 8:
        _LAYOUT_CACHE.clear()
    _LAYOUT_CACHE[key] = (indptr, indices, order)
    return indptr, indices, order


def pair_gram(lum, basis: BasisMatrix, weights: WeightField, pair_weight) -> BlockGram:
    """Gram matrix ``A.T A`` of :func:`assemble_pair_operator` in block form."""
    lum = _spectra(lum)
    _check(weights, basis, lum)
    c2 = _resolve_weight(weights, pair_weight) ** 2
    B = basis.columns
    n, j = weights.n_pixels, basis.rank
    pairs = weights.pairs
    diag = np.zeros((n, j, j))
    if len(pairs) == 0:
        return BlockGram(diag, np.zeros((0, j, j)), pairs)
    p, q = pairs[:, 0], pairs[:, 1]
    if lum is None:
        btb = B.T @ B
        deg = np.bincount(p, weights=c2, minlength=n) + np.bincount(q, weights=c2, minlength=n)
        diag += deg[:, None, None] * btb[None]
        off = -c2[:, None, None] * btb[None]
    else:
        lp, lq = lum[p], lum[q]
        # block (p, p) collects c^2 B' diag(l_q^2) B; (q, q) collects c^2 B' diag(l_p^2) B
        bp = np.einsum("pk,kj,kl->pjl", c2[:, None] * lq**2, B, B, optimize=True)
        bq = np.einsum("pk,kj,kl->pjl", c2[:, None] * lp**2, B, B, optimize=True)
        np.add.at(diag, p, bp)
        np.add.at(diag, q, bq)
        off = -np.einsum("pk,kj,kl->pjl", c2[:, None] * lp * lq, B, B, optimize=True)
    return BlockGram(diag, off, pairs)


def data_gram(fixed_coeffs, fixed_basis: BasisMatrix, free_basis: BasisMatrix,
              lum) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal blocks of ``Q.T Q`` and the vector ``Q.T l`` for the data term."""
    lum = _spectra(lum)
    c = np.asarray(fixed_coeffs, dtype=np.float64).reshape(-1, fixed_basis.rank)
    y = c @ fixed_basis.columns.T
    B = free_basis.columns
    blocks = np.einsum("pk,kj,kl->pjl", y**2, B, B, optimize=True)
    rhs = ((y * lum) @ B).ravel()
    return blocks, rhs


def generic_gram(lum, basis: BasisMatrix) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal blocks of ``M.T M`` and ``M.T C`` for the generic constraint."""
    lum = _spectra(lum)
    B = basis.columns
    blocks = np.broadcast_to(B.T @ B, (lum.shape[0], basis.rank, basis.rank)).copy()
    return blocks, (lum @ B).ravel()


def pair_energy(coeffs, lum, basis: BasisMatrix, weights: WeightField, pair_weight) -> float:
    """``|A x|^2`` for the operator of :func:`assemble_pair_operator`."""
    lum = _spectra(lum)
    c = _resolve_weight(weights, pair_weight)
    if len(weights.pairs) == 0:
        return 0.0
    y = np.asarray(coeffs, dtype=np.float64).reshape(-1, basis.rank) @ basis.columns.T
    p, q = weights.pairs[:, 0], weights.pairs[:, 1]
    if lum is None:
        diff = y[q] - y[p]
    else:
        diff = lum[p] * y[q] - lum[q] * y[p]
    return float(np.sum((c[:, None] * diff) ** 2))


def write_matrix_market(matrix, path, comment: str = "") -> None:
    """Dump a sparse operator in MatrixMarket coordinate format."""
    scipy.io.mmwrite(str(path), sp.coo_matrix(matrix), comment=comment)
