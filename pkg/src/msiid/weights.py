"""Neighbor-pair weights from spectral similarity, and the alpha/beta sweep.

Pairs are the horizontal and vertical 4-adjacencies of the pixel grid:
first all horizontal pairs ``(p, p + 1)`` in raster order, then all vertical
pairs ``(p, p + width)``.
"""

from __future__ import annotations

import csv
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import kernels
from .speccube import SpectralCube

log = logging.getLogger(__name__)

DEFAULT_ALPHA = 5000.0
DEFAULT_BETA = 0.0032


@dataclass(frozen=True)
class WeightParams:
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError(f"alpha and beta must be positive, got {self.alpha}, {self.beta}")


@dataclass(frozen=True, eq=False)
class WeightField:
    """Per-pair sigmoid weights.

    ``w`` is the sigmoid of the spectral cosine distance (close to 1 for
    similar neighbors, close to 0 across chromatic edges); ``v = 1 - w``.
    ``distance`` keeps the cosine distances the weights were built from.
    """

    height: int
    width: int
    pairs: np.ndarray
    w: np.ndarray
    v: np.ndarray
    distance: np.ndarray | None = None

    @property
    def n_pairs(self) -> int:
        return len(self.pairs)

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    @classmethod
    def from_w(cls, height, width, w, distance=None) -> "WeightField":
        w = np.asarray(w, dtype=np.float64)
        return cls(height, width, neighbor_pairs(height, width), w, 1.0 - w, distance)


def neighbor_pairs(height: int, width: int) -> np.ndarray:
    """``(P, 2)`` int64 array of 4-neighbor pixel pairs, horizontal first."""
    idx = np.arange(height * width, dtype=np.int64).reshape(height, width)
    horiz = np.stack([idx[:, :-1].ravel(), idx[:, 1:].ravel()], axis=1)
    vert = np.stack([idx[:-1, :].ravel(), idx[1:, :].ravel()], axis=1)
    return np.ascontiguousarray(np.concatenate([horiz, vert]), dtype=np.int64)


def cosine_distance(a, b) -> float:
    """``1 - a.b / (|a| |b|)``; defined as 0 if either spectrum is all zeros."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"spectra differ in length: {a.shape} vs {b.shape}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(1.0 - (a @ b) / (na * nb))


def sigmoid_weight(d, params: WeightParams):
    """``1 / (1 + exp(alpha (d - beta)))``, overflow-safe."""
    return expit(-params.alpha * (np.asarray(d, dtype=np.float64) - params.beta))


def pair_distances(cube: SpectralCube) -> np.ndarray:
    pairs = neighbor_pairs(cube.height, cube.width)
    if len(pairs) == 0:
        return np.zeros(0)
    return kernels.pair_cosine_distance(np.ascontiguousarray(cube.pixels()), pairs)


def compute_weight_field(cube: SpectralCube, params: WeightParams) -> WeightField:
    d = pair_distances(cube)
    return WeightField.from_w(cube.height, cube.width, sigmoid_weight(d, params), distance=d)


# -- parameter sweep ---------------------------------------------------------


def default_alpha_grid(n: int = 20) -> np.ndarray:
    return np.linspace(1000.0, 10000.0, n)


def default_beta_grid(n: int = 50) -> np.ndarray:
    return np.logspace(-5, -2, n)


@dataclass
class SweepRow:
    alpha: float
    beta: float
    lmse: float
    status: str


def _worker_count() -> int:
    env = os.environ.get("LRIID_THREADS")
    if env:
        return max(1, int(env))
    return 1


def sweep_params(cube, gt_shading, gt_reflectance, alphas, betas,
                 illum, library_basis, config=None, lmse_config=None, workers=None):
    """Grid search over (alpha, beta) scored by combined LMSE.

    Runs a full decomposition per grid point. Returns ``(best, rows)`` where
    ``rows`` follows grid order (alpha-major). Ties go to the smaller alpha,
    then the smaller beta. Failed points are kept with ``status="failed"``.
    """
    from .metrics import LmseConfig, combined_lmse
    from .solve import SolverConfig, decompose

    alphas = [float(a) for a in alphas]
    betas = [float(b) for b in betas]
    if not alphas or not betas:
        raise ValueError("alpha and beta grids must be nonempty")
    config = config or SolverConfig()
    lmse_config = lmse_config or LmseConfig()
    grid = [(a, b) for a in alphas for b in betas]

    def run(point):
        a, b = point
        try:
            res = decompose(cube, illum, library_basis, config, WeightParams(a, b))
            score = combined_lmse(res.shading, gt_shading, res.reflectance,
                                  gt_reflectance, lmse_config)
            return SweepRow(a, b, score, "ok")
        except Exception as exc:  # one bad point must not sink the sweep
            log.warning("sweep point alpha=%g beta=%g failed: %s", a, b, exc)
            return SweepRow(a, b, math.nan, "failed")

    workers = workers or _worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(run, grid))
    else:
        rows = [run(p) for p in grid]

    ok = [r for r in rows if r.status == "ok"]
    if not ok:
        raise RuntimeError("every sweep point failed")
    best = min(ok, key=lambda r: (r.lmse, r.alpha, r.beta))
    return WeightParams(best.alpha, best.beta), rows


def write_sweep_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["alpha", "beta", "lmse", "status"])
        for r in rows:
            writer.writerow([repr(r.alpha), repr(r.beta),
                             "" if math.isnan(r.lmse) else repr(r.lmse), r.status])
