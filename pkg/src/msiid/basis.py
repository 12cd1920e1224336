"""Low-rank spectral bases for shading and reflectance.

Shading uses a single column, the unit-norm illumination spectrum.
Reflectance uses PCA of a library of measured (or synthetic) reflectance
spectra. By default the first reflectance column is the normalized library
mean and the rest are principal directions of the library with that
direction projected out, so reflectance stays a purely linear combination
of the columns (no affine offset) and the columns are orthonormal.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .speccube import SpectralCube, default_wavelengths, resample_spectra

DEFAULT_REFLECTANCE_RANK = 8


class RankError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class BasisMatrix:
    columns: np.ndarray
    kind: str = "generic"
    explained_variance: np.ndarray | None = field(default=None)

    def __post_init__(self):
        cols = np.array(self.columns, dtype=np.float64, ndmin=2)
        if cols.ndim != 2:
            raise ValueError("basis must be a K x J matrix")
        if cols.shape[1] > cols.shape[0]:
            raise ValueError(f"rank {cols.shape[1]} exceeds band count {cols.shape[0]}")
        if not np.all(np.isfinite(cols)):
            raise ValueError("basis has non-finite entries")
        cols.setflags(write=False)
        object.__setattr__(self, "columns", cols)

    @property
    def bands(self) -> int:
        return self.columns.shape[0]

    @property
    def rank(self) -> int:
        return self.columns.shape[1]

    def is_orthonormal(self, tol: float = 1e-10) -> bool:
        g = self.columns.T @ self.columns
        return bool(np.max(np.abs(g - np.eye(self.rank))) <= tol)

    def to_csv(self, path, wavelengths=None) -> None:
        if wavelengths is None:
            wavelengths = np.arange(self.bands)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["wavelength"] + [f"b{j}" for j in range(self.rank)])
            for wl, row in zip(wavelengths, self.columns):
                writer.writerow([repr(float(wl))] + [repr(float(v)) for v in row])


@dataclass(frozen=True, eq=False)
class ReflectanceLibrary:
    samples: np.ndarray
    wavelengths: np.ndarray | None = None

    def __post_init__(self):
        s = np.array(self.samples, dtype=np.float64, ndmin=2)
        if not np.all(np.isfinite(s)) or np.any(s < 0):
            raise ValueError("reflectance library must be finite and nonnegative")
        object.__setattr__(self, "samples", s)
        if self.wavelengths is not None:
            wl = np.asarray(self.wavelengths, dtype=np.float64)
            if wl.shape != (s.shape[1],):
                raise ValueError("library wavelengths do not match sample length")
            object.__setattr__(self, "wavelengths", wl)

    @property
    def n_samples(self) -> int:
        return self.samples.shape[0]

    @property
    def bands(self) -> int:
        return self.samples.shape[1]

    def resampled(self, wavelengths) -> "ReflectanceLibrary":
        src = self.wavelengths if self.wavelengths is not None else default_wavelengths(self.bands)
        return ReflectanceLibrary(resample_spectra(self.samples, src, wavelengths), wavelengths)

    def matched_to(self, cube: SpectralCube) -> "ReflectanceLibrary":
        """Library sampled at the cube's bands (interpolating when needed)."""
        if cube.wavelengths is not None and self.wavelengths is not None:
            return self.resampled(cube.wavelengths)
        if self.bands == cube.bands:
            return self
        return self.resampled(cube.wavelengths if cube.wavelengths is not None
                              else default_wavelengths(cube.bands))


def load_library_csv(path) -> ReflectanceLibrary:
    """Header row of wavelengths, then one reflectance sample per row."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r]
    wl = np.array([float(v) for v in rows[0]])
    samples = np.array([[float(v) for v in r] for r in rows[1:]])
    return ReflectanceLibrary(samples, wl)


def save_library_csv(lib: ReflectanceLibrary, path) -> None:
    wl = lib.wavelengths if lib.wavelengths is not None else default_wavelengths(lib.bands)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"{v:g}" for v in wl])
        for row in lib.samples:
            writer.writerow([f"{v:.6f}" for v in row])


def synthetic_library(n_samples: int = 400, seed: int = 1986,
                      wavelengths=None) -> ReflectanceLibrary:
    """Smooth random reflectances: a baseline plus 3-5 Gaussian bumps, in [0, 1]."""
    if wavelengths is None:
        wavelengths = np.arange(450.0, 701.0, 5.0)
    wl = np.asarray(wavelengths, dtype=np.float64)
    rng = np.random.default_rng(seed)
    out = np.empty((n_samples, wl.size))
    for m in range(n_samples):
        spec = np.full(wl.size, rng.uniform(0.05, 0.25))
        for _ in range(rng.integers(3, 6)):
            center = rng.uniform(420.0, 730.0)
            width = rng.uniform(20.0, 80.0)
            spec += rng.uniform(0.05, 0.45) * np.exp(-0.5 * ((wl - center) / width) ** 2)
        out[m] = spec
    return ReflectanceLibrary(np.clip(out, 0.0, 1.0), wl)


def default_library() -> ReflectanceLibrary:
    return load_library_csv(Path(__file__).with_name("data") / "reflectance_library.csv")


def shading_basis(illum) -> BasisMatrix:
    illum = np.asarray(illum, dtype=np.float64).ravel()
    if np.any(illum < 0) or not np.all(np.isfinite(illum)):
        raise ValueError("illumination spectrum must be finite and nonnegative")
    norm = np.linalg.norm(illum)
    if norm == 0:
        raise ValueError("illumination spectrum is all zeros")
    return BasisMatrix((illum / norm)[:, None], kind="shading")


def _fix_signs(cols: np.ndarray) -> np.ndarray:
    idx = np.argmax(np.abs(cols), axis=0)
    signs = np.sign(cols[idx, np.arange(cols.shape[1])])
    signs[signs == 0] = 1.0
    return cols * signs


def reflectance_basis_pca(lib: ReflectanceLibrary, rank: int = DEFAULT_REFLECTANCE_RANK,
                          include_mean: bool = True, rtol: float = 1e-10) -> BasisMatrix:
    """PCA basis of a reflectance library.

    With ``include_mean`` the first column is the unit library mean and the
    remaining ``rank - 1`` columns are the leading principal directions of the
    centered library after removing the mean direction. Without it, the
    columns are the top ``rank`` eigenvectors of the sample covariance.
    Each column's largest-magnitude entry is positive.
    """
    X = lib.samples
    m, k = X.shape
    if rank < 1 or rank > min(m, k):
        raise RankError(f"rank {rank} outside [1, min(M={m}, K={k})]")
    mean = X.mean(axis=0)
    Xc = X - mean
    if include_mean:
        mnorm = np.linalg.norm(mean)
        if mnorm == 0:
            raise RankError("library mean is zero; cannot form mean column")
        mhat = mean / mnorm
        Xc = Xc - np.outer(Xc @ mhat, mhat)
        n_pc = rank - 1
    else:
        n_pc = rank
    _, sv, vt = np.linalg.svd(Xc, full_matrices=False)
    var = sv**2 / max(m - 1, 1)
    if n_pc > 0:
        # relative to the library's own magnitude so centering round-off is not rank
        scale = max(float(sv[0]) if sv.size else 0.0, float(np.linalg.norm(X)))
        achievable = int(np.sum(sv > rtol * scale)) if scale > 0 else 0
        if achievable < n_pc:
            got = achievable + (1 if include_mean else 0)
            raise RankError(f"library supports rank {got} at most, {rank} requested")
    pcs = _fix_signs(vt[:n_pc].T) if n_pc else np.zeros((k, 0))
    if include_mean:
        cols = np.column_stack([mhat, pcs])
        explained = np.concatenate([[np.sum((X @ mhat) ** 2) / max(m - 1, 1)], var[:n_pc]])
    else:
        cols = pcs
        explained = var[:n_pc]
    return BasisMatrix(cols, kind="reflectance", explained_variance=explained)


def project(spectrum, basis: BasisMatrix) -> np.ndarray:
    """Least-squares coefficients of ``spectrum`` (or rows of a matrix) in ``basis``."""
    y = np.asarray(spectrum, dtype=np.float64)
    if y.shape[-1] != basis.bands:
        raise ValueError(f"spectrum has {y.shape[-1]} bands, basis has {basis.bands}")
    flat = y.reshape(-1, basis.bands)
    coef, *_ = np.linalg.lstsq(basis.columns, flat.T, rcond=None)
    return coef.T.reshape(y.shape[:-1] + (basis.rank,))


def project_field(cube: SpectralCube, basis: BasisMatrix) -> np.ndarray:
    """``(N, J)`` coefficients for every pixel of ``cube``."""
    return project(cube.pixels(), basis)


def reconstruct_field(coeffs, basis: BasisMatrix, height: int, width: int,
                      wavelengths=None) -> tuple[SpectralCube, float]:
    """Per-pixel ``B c``, negatives clamped to zero.

    Returns the cube and the fraction of entries that were clamped.
    """
    c = np.asarray(coeffs, dtype=np.float64)
    if c.ndim == 2 and c.shape[1] != basis.rank:
        raise ValueError(f"coefficient rank {c.shape[1]} does not match basis rank {basis.rank}")
    if c.size != height * width * basis.rank:
        raise ValueError(f"expected {height * width} x {basis.rank} coefficients, got {c.size}")
    c = c.reshape(-1, basis.rank)
    spectra = c @ basis.columns.T
    neg = spectra < 0
    frac = float(neg.mean()) if spectra.size else 0.0
    spectra[neg] = 0.0
    return SpectralCube(spectra.reshape(height, width, basis.bands), wavelengths), frac
