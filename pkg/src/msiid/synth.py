"""Synthetic scenes with known shading/reflectance, and a dense reference solver.

Scenes follow ``l = s .* r`` exactly (before optional noise): reflectance is
piecewise constant over a seeded Voronoi partition, shading is a positive
scalar field times the unit illumination spectrum.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .basis import BasisMatrix, ReflectanceLibrary, default_library, project
from .speccube import SpectralCube, default_wavelengths, resample_spectra
from .weights import WeightField

PROFILES = ("smooth-gradient", "cast-shadow", "spotlight")


def illumination_spectrum(name: str, wavelengths) -> np.ndarray:
    """Built-in smooth illuminants over the given wavelengths (nm)."""
    wl = np.asarray(wavelengths, dtype=np.float64)
    t = (wl - 450.0) / 250.0
    if name == "flat":
        return np.ones_like(wl)
    if name == "warm":  # rising toward red, tungsten-like
        return 0.35 + 0.65 * np.clip(t, 0.0, None) ** 1.5
    if name == "daylight":
        return 0.8 + 0.25 * np.exp(-0.5 * ((wl - 480.0) / 60.0) ** 2) - 0.15 * t
    raise ValueError(f"unknown illuminant {name!r}")


@dataclass
class SceneSpec:
    height: int = 32
    width: int = 32
    bands: int = 8
    illum: list | str = "daylight"
    n_regions: int = 6
    shading_profile: str = "smooth-gradient"
    noise_sigma: float = 0.0
    seed: int = 0
    in_model: bool = True
    wavelength_range: tuple = (450.0, 700.0)

    def __post_init__(self):
        if min(self.height, self.width) < 2 or self.bands < 1:
            raise ValueError("scene must be at least 2x2 with one band")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.shading_profile not in PROFILES:
            raise ValueError(f"shading_profile must be one of {PROFILES}")
        if self.n_regions < 1 or self.n_regions > self.height * self.width:
            raise ValueError(f"n_regions={self.n_regions} outside [1, {self.height * self.width}]")

    @property
    def wavelengths(self) -> np.ndarray:
        lo, hi = self.wavelength_range
        return default_wavelengths(self.bands, lo, hi)

    def illum_spectrum(self) -> np.ndarray:
        if isinstance(self.illum, str):
            return illumination_spectrum(self.illum, self.wavelengths)
        spec = np.asarray(self.illum, dtype=np.float64)
        if spec.shape != (self.bands,):
            raise ValueError(f"illum has {spec.size} values for {self.bands} bands")
        return spec

    def to_json(self) -> str:
        d = asdict(self)
        d["wavelength_range"] = list(self.wavelength_range)
        return json.dumps(d, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        d = json.loads(text)
        if "wavelength_range" in d:
            d["wavelength_range"] = tuple(d["wavelength_range"])
        return cls(**d)


@dataclass
class Scene:
    luminance: SpectralCube
    shading: SpectralCube
    reflectance: SpectralCube
    labels: np.ndarray
    region_spectra: np.ndarray
    shading_field: np.ndarray
    illum: np.ndarray
    spec: SceneSpec = field(repr=False, default=None)

    def __iter__(self):
        return iter((self.luminance, self.shading, self.reflectance))


def voronoi_labels(height: int, width: int, n_regions: int, rng) -> np.ndarray:
    flat = rng.choice(height * width, size=n_regions, replace=False)
    seeds = np.stack([flat // width, flat % width], axis=1).astype(np.float64)
    ii, jj = np.mgrid[0:height, 0:width]
    d2 = (ii[..., None] - seeds[:, 0]) ** 2 + (jj[..., None] - seeds[:, 1]) ** 2
    return np.argmin(d2, axis=-1)


def shading_field(profile: str, height: int, width: int, rng) -> np.ndarray:
    """Positive scalar shading in (0, 1]."""
    ii, jj = np.mgrid[0:height, 0:width].astype(np.float64)
    y = ii / max(height - 1, 1)
    x = jj / max(width - 1, 1)
    theta = rng.uniform(0, 2 * np.pi)
    ramp = np.cos(theta) * x + np.sin(theta) * y
    ramp = (ramp - ramp.min()) / max(ramp.max() - ramp.min(), 1e-12)
    base = 0.45 + 0.55 * ramp
    if profile == "smooth-gradient":
        return base
    if profile == "cast-shadow":
        # half-plane dimmed by 0.4 with a 2-pixel linear ramp at the border
        phi = rng.uniform(0, 2 * np.pi)
        cy, cx = rng.uniform(0.3, 0.7) * (height - 1), rng.uniform(0.3, 0.7) * (width - 1)
        signed = np.cos(phi) * (jj - cx) + np.sin(phi) * (ii - cy)
        t = np.clip(signed / 2.0 + 0.5, 0.0, 1.0)
        return base * (1.0 - 0.6 * t)
    if profile == "spotlight":
        cy, cx = rng.uniform(0.25, 0.75) * (height - 1), rng.uniform(0.25, 0.75) * (width - 1)
        rad = rng.uniform(0.3, 0.6) * max(height, width)
        r2 = (ii - cy) ** 2 + (jj - cx) ** 2
        return 0.25 + 0.75 * np.exp(-0.5 * r2 / rad**2)
    raise ValueError(f"unknown shading profile {profile!r}")


def _into_subspace(spectrum, basis: BasisMatrix, anchor, lo=0.1, hi=1.0) -> np.ndarray:
    """Project into span(basis), then pull toward ``anchor`` until within [lo, hi]."""
    r = basis.columns @ project(spectrum, basis)
    if r.min() >= lo and r.max() <= hi:
        return r
    d = r - anchor
    # largest g in [0, 1] with anchor + g d inside the box
    g = 1.0
    for a, dv in zip(anchor, d):
        if dv > 0:
            g = min(g, (hi - a) / dv)
        elif dv < 0:
            g = min(g, (lo - a) / dv)
    return anchor + max(g, 0.0) * 0.999 * d


def generate_scene(spec: SceneSpec, B_r: BasisMatrix | None = None,
                   library: ReflectanceLibrary | None = None) -> Scene:
    rng = np.random.default_rng(spec.seed)
    wl = spec.wavelengths
    lib = (library or default_library())
    lib_wl = lib.wavelengths if lib.wavelengths is not None else default_wavelengths(lib.bands)
    samples = resample_spectra(lib.samples, lib_wl, wl)
    labels = voronoi_labels(spec.height, spec.width, spec.n_regions, rng)
    picks = rng.choice(len(samples), size=spec.n_regions, replace=len(samples) < spec.n_regions)
    region = samples[picks]
    if spec.in_model:
        if B_r is None:
            raise ValueError("in_model scenes need the reflectance basis")
        anchor = B_r.columns @ project(samples.mean(axis=0), B_r)
        if anchor.min() < 0.1 or anchor.max() > 1.0:
            raise ValueError("library mean falls outside [0.1, 1] after projection")
        region = np.stack([_into_subspace(r, B_r, anchor) for r in region])
    else:
        region = np.clip(region, 0.1, 1.0)
    illum = spec.illum_spectrum()
    b_s = illum / np.linalg.norm(illum)
    sigma = shading_field(spec.shading_profile, spec.height, spec.width, rng)
    refl = region[labels]
    shade = sigma[..., None] * b_s[None, None, :]
    lum = shade * refl
    if spec.noise_sigma > 0:
        lum = np.clip(lum + rng.normal(0.0, spec.noise_sigma, lum.shape), 0.0, None)
    return Scene(SpectralCube(lum, wl), SpectralCube(shade, wl), SpectralCube(refl, wl),
                 labels, region, sigma, illum, spec)


# -- dense reference solver ---------------------------------------------------


@dataclass
class DenseResult:
    S0: np.ndarray
    R0: np.ndarray
    S: np.ndarray
    R: np.ndarray
    energies: list


MAX_DENSE_UNKNOWNS = 300


def _dense_pair(lum, B, pairs, c, coupled):
    n, k = lum.shape
    j = B.shape[1]
    A = np.zeros((len(pairs) * k, n * j))
    for i, (p, q) in enumerate(pairs):
        rows = slice(i * k, (i + 1) * k)
        if coupled:
            A[rows, q * j:(q + 1) * j] += c[i] * np.diag(lum[p]) @ B
            A[rows, p * j:(p + 1) * j] -= c[i] * np.diag(lum[q]) @ B
        else:
            A[rows, q * j:(q + 1) * j] += c[i] * B
            A[rows, p * j:(p + 1) * j] -= c[i] * B
    return A


def _dense_blockdiag(blocks):
    n = len(blocks)
    r, c = blocks[0].shape
    out = np.zeros((n * r, n * c))
    for p, blk in enumerate(blocks):
        out[p * r:(p + 1) * r, p * c:(p + 1) * c] = blk
    return out


def _solve(Q, b):
    try:
        return np.linalg.solve(Q, b)
    except np.linalg.LinAlgError:
        return np.linalg.lstsq(Q, b, rcond=None)[0]


def _line_minimizer(coef, max_step: float = 50.0) -> float:
    """Minimizer over [0, max_step] of the quartic with ascending ``coef``; 0 if none helps."""
    quartic = np.poly1d(coef[::-1])
    crit = [t.real for t in quartic.deriv().roots if abs(t.imag) < 1e-12 and 0 < t.real <= max_step]
    best = min(crit + [max_step], key=quartic)
    return float(best) if quartic(best) < coef[0] else 0.0


def brute_force_decompose(cube: SpectralCube, B_s: BasisMatrix, B_r: BasisMatrix,
                          weights: WeightField, config=None, n_outer: int | None = None
                          ) -> DenseResult:
    """Dense reference for the initial estimates and the alternating solves.

    Every operator is built as a dense matrix straight from its per-pair
    definition and each normal system is solved by direct factorization.
    Runs exactly ``n_outer`` alternating rounds (default
    ``config.outer_max_iter``) with the same line extrapolation and
    pair-energy rebalancing as the sparse solver.
    """
    from .solve import SolverConfig

    cfg = config or SolverConfig()
    n_outer = cfg.outer_max_iter if n_outer is None else n_outer
    lum = cube.pixels().astype(np.float64)
    n, k = lum.shape
    Bs, Br = B_s.columns, B_r.columns
    js, jr = Bs.shape[1], Br.shape[1]
    if n * (js + jr) > MAX_DENSE_UNKNOWNS:
        raise ValueError(f"{n * (js + jr)} unknowns exceed the dense limit {MAX_DENSE_UNKNOWNS}")
    pairs = [tuple(map(int, pq)) for pq in weights.pairs]
    w = np.asarray(weights.w)
    v = 1.0 - w
    const_shading, const_refl = (v, w) if cfg.weight_pairing == "retinex" else (w, v)
    lam1, lam2, lamd = cfg.lambda1, cfg.lambda2, cfg.lambda_data

    W_Br = _dense_pair(lum, Br, pairs, const_shading, True)
    V_Br = _dense_pair(lum, Br, pairs, const_refl, False)
    W_Bs = _dense_pair(lum, Bs, pairs, const_shading, False)
    V_Bs = _dense_pair(lum, Bs, pairs, const_refl, True)
    M_s = _dense_blockdiag([Bs] * n)
    M_r = _dense_blockdiag([Br] * n)
    L = lum.ravel()

    def Q_of(coeffs, B_fixed, B_free):
        y = coeffs.reshape(n, -1) @ B_fixed.T
        return _dense_blockdiag([np.diag(y[p]) @ B_free for p in range(n)])

    def energy(S, R):
        s = (S.reshape(n, js) @ Bs.T).ravel()
        r = (R.reshape(n, jr) @ Br.T).ravel()
        return (np.sum((W_Br @ R) ** 2) + np.sum((W_Bs @ S) ** 2)
                + lam1 * (np.sum((V_Bs @ S) ** 2) + np.sum((V_Br @ R) ** 2))
                + 2 * lamd * np.sum((s * r - L) ** 2))

    S = _solve(W_Bs.T @ W_Bs + lam1 * V_Bs.T @ V_Bs + lam2 * M_s.T @ M_s, lam2 * M_s.T @ L)
    Qs = Q_of(S, Bs, Br)
    R = _solve(W_Br.T @ W_Br + lam1 * V_Br.T @ V_Br + lam2 * M_r.T @ M_r + lamd * Qs.T @ Qs,
               lamd * Qs.T @ L + lam2 * M_r.T @ L)
    S0, R0 = S.copy(), R.copy()
    energies = [energy(S, R)]
    for _ in range(n_outer):
        S_prev, R_prev = S.copy(), R.copy()
        Qr = Q_of(R, Br, Bs)
        S = _solve(W_Bs.T @ W_Bs + lam1 * V_Bs.T @ V_Bs + 2 * lamd * Qr.T @ Qr,
                   2 * lamd * Qr.T @ L)
        Qs = Q_of(S, Bs, Br)
        R = _solve(W_Br.T @ W_Br + lam1 * V_Br.T @ V_Br + 2 * lamd * Qs.T @ Qs,
                   2 * lamd * Qs.T @ L)
        if cfg.extrapolate:
            # expand E(S + t dS, R + t dR) term by term into quartic coefficients
            dS, dR = S - S_prev, R - R_prev
            coef = np.zeros(5)
            for A, x, dx, lam in ((W_Bs, S, dS, 1.0), (W_Br, R, dR, 1.0),
                                  (V_Bs, S, dS, lam1), (V_Br, R, dR, lam1)):
                u, du = A @ x, A @ dx
                coef[:3] += lam * np.array([u @ u, 2 * u @ du, du @ du])
            s, r, ds, dr = M_s @ S, M_r @ R, M_s @ dS, M_r @ dR
            c0, c1, c2 = s * r - L, ds * r + s * dr, ds * dr
            coef += 2 * lamd * np.array([c0 @ c0, 2 * c0 @ c1, c1 @ c1 + 2 * c0 @ c2,
                                         2 * c1 @ c2, c2 @ c2])
            t = _line_minimizer(coef)
            if t > 0 and energy(S + t * dS, R + t * dR) < energy(S, R):
                S, R = S + t * dS, R + t * dR
        if cfg.rescale:
            a = np.sum((W_Bs @ S) ** 2) + lam1 * np.sum((V_Bs @ S) ** 2)
            b = np.sum((W_Br @ R) ** 2) + lam1 * np.sum((V_Br @ R) ** 2)
            if a > 0 and b > 0 and a + b - 2 * np.sqrt(a * b) > 1e-12 * (L @ L):
                c = min(max((b / a) ** 0.25, 0.5), 2.0)
                S, R = S * c, R / c
        energies.append(energy(S, R))
    return DenseResult(S0.reshape(n, js), R0.reshape(n, jr), S.reshape(n, js),
                       R.reshape(n, jr), energies)
