"""Local mean squared error and region spectral curves."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .speccube import SpectralCube


@dataclass(frozen=True)
class LmseConfig:
    window: int = 20
    stride: int | None = None  # defaults to window // 2
    scale_invariant: bool = True

    def __post_init__(self):
        if self.window < 2:
            raise ValueError("LMSE window must be >= 2")
        if not 1 <= self.step <= self.window:
            raise ValueError("LMSE stride must lie in [1, window]")

    @property
    def step(self) -> int:
        return self.stride if self.stride is not None else max(1, self.window // 2)


def window_starts(size: int, window: int, step: int) -> list[int]:
    """Window origins along one axis.

    Origins advance by ``step``; if the last full window stops short of the
    border, one more window is placed flush with it. An axis shorter than
    the window gets a single window covering all of it.
    """
    if size <= window:
        return [0]
    starts = list(range(0, size - window + 1, step))
    if starts[-1] + window < size:
        starts.append(size - window)
    return starts


def _box_sums(a: np.ndarray, window: int, rows, cols) -> np.ndarray:
    """Sums of ``a`` (H, W) over the windows anchored at ``rows x cols``."""
    ii = np.zeros((a.shape[0] + 1, a.shape[1] + 1))
    ii[1:, 1:] = np.cumsum(np.cumsum(a, axis=0), axis=1)
    r0 = np.asarray(rows)[:, None]
    c0 = np.asarray(cols)[None, :]
    r1 = np.minimum(r0 + window, a.shape[0])
    c1 = np.minimum(c0 + window, a.shape[1])
    return ii[r1, c1] - ii[r0, c1] - ii[r1, c0] + ii[r0, c0]


def lmse(pred: SpectralCube, gt: SpectralCube, cfg: LmseConfig | None = None) -> float:
    """Windowed, per-window scale-fitted squared error, normalized to [0, 1].

    Each window's error is ``|a * pred - gt|^2`` over its pixels and bands,
    with ``a >= 0`` the least-squares scale (``a = 1`` when not scale
    invariant). Summed window errors are divided by the summed window
    energies of ``gt``, i.e. the error of the all-zero prediction.
    """
    cfg = cfg or LmseConfig()
    if pred.shape != gt.shape:
        raise ValueError(f"cube dimensions differ: {pred.shape} vs {gt.shape}")
    x, y = pred.data, gt.data
    rows = window_starts(x.shape[0], cfg.window, cfg.step)
    cols = window_starts(x.shape[1], cfg.window, cfg.step)
    sxx = _box_sums(np.einsum("ijk,ijk->ij", x, x), cfg.window, rows, cols)
    sxy = _box_sums(np.einsum("ijk,ijk->ij", x, y), cfg.window, rows, cols)
    syy = _box_sums(np.einsum("ijk,ijk->ij", y, y), cfg.window, rows, cols)
    total = float(syy.sum())
    if total <= 0:
        raise ValueError("ground truth is identically zero; LMSE is undefined")
    if cfg.scale_invariant:
        with np.errstate(divide="ignore", invalid="ignore"):
            a = np.where(sxx > 0, sxy / sxx, 0.0)
        a = np.maximum(a, 0.0)
    else:
        a = np.ones_like(sxx)
    err = a * a * sxx - 2 * a * sxy + syy
    return float(np.maximum(err, 0.0).sum() / total)


def combined_lmse(pred_s, gt_s, pred_r, gt_r, cfg: LmseConfig | None = None) -> float:
    return 0.5 * (lmse(pred_s, gt_s, cfg) + lmse(pred_r, gt_r, cfg))


def spectral_curve(cube: SpectralCube, roi) -> np.ndarray:
    """Per-band mean over ``roi = (row0, col0, height, width)``."""
    r0, c0, h, w = (int(v) for v in roi)
    if h <= 0 or w <= 0:
        raise ValueError("empty region of interest")
    if r0 < 0 or c0 < 0 or r0 + h > cube.height or c0 + w > cube.width:
        raise ValueError(f"roi {roi} outside {cube.height}x{cube.width} image")
    return cube.data[r0:r0 + h, c0:c0 + w].reshape(-1, cube.bands).mean(axis=0)


def write_eval_csv(rows, path) -> None:
    """Rows of ``(scene, lmse_shading, lmse_reflectance, combined, time_seconds)``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["scene", "lmse_shading", "lmse_reflectance", "combined", "time_seconds"])
        for scene, ls, lr, comb, t in rows:
            writer.writerow([scene, f"{ls:.6f}", f"{lr:.6f}", f"{comb:.6f}",
                             "" if t is None else f"{t:.3f}"])
