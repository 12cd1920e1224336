"""Quadratic subproblem solves and the alternating shading/reflectance loop.

Energy (squared L2 everywhere), for shading coefficients ``S`` and
reflectance coefficients ``R``::

    E = |W_{L,Br} R|^2 + |W_{Bs} S|^2
        + lambda1 (|V_{L,Bs} S|^2 + |V_{Br} R|^2)
        + lambda_data |Q_S R - l|^2 + lambda_data |Q_R S - l|^2

``W`` terms assume constant shading across a pair, ``V`` terms constant
reflectance. Both data terms equal ``|s .* r - l|^2``. For fixed ``R`` the
energy is quadratic in ``S`` and vice versa; each block is solved exactly
by conjugate gradient, so the energy cannot increase.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .basis import (BasisMatrix, ReflectanceLibrary, reconstruct_field,
                    reflectance_basis_pca, shading_basis)
from .operators import (BlockGram, SparseSystem, data_gram, generic_gram, pair_energy,
                        pair_gram)
from .speccube import SpectralCube
from .weights import WeightField, WeightParams, compute_weight_field

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Numerical failure inside a solve (non-finite values, CG breakdown)."""


class EnergyIncreaseError(SolverError):
    """Block descent raised the energy; points at an assembly bug."""


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class SolverConfig:
    lambda1: float = 2.0
    lambda2: float = 0.01
    lambda_data: float = 1.0
    norm: int = 2
    cg_tol: float = 1e-8
    cg_max_iter: int | None = None  # None: 10 x unknowns
    outer_max_iter: int = 50
    inner_max_iter: int = 1000
    grad_tol: float = 0.01
    step_tol: float = 0.01
    subsolver: str = "cg"  # or "gd": steepest descent with exact line search
    weight_pairing: str = "retinex"
    rescale: bool = True
    extrapolate: bool = True
    energy_rtol: float = 1e-9

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda_data) < 0:
            raise ValueError("lambda weights must be nonnegative")
        if self.norm != 2:
            raise NotImplementedError("only the L2 (norm=2) energy is implemented")
        if self.cg_tol <= 0:
            raise ValueError("cg_tol must be positive")
        if min(self.grad_tol, self.step_tol) < 0:
            raise ValueError("stopping tolerances must be nonnegative (0 disables)")
        if self.subsolver not in ("cg", "gd"):
            raise ValueError(f"unknown subsolver {self.subsolver!r}")
        if self.weight_pairing not in ("retinex", "literal"):
            raise ValueError(f"unknown weight pairing {self.weight_pairing!r}")
        if self.outer_max_iter < 0 or self.inner_max_iter < 1:
            raise ValueError("iteration budgets must be positive")


def pair_gates(weights: WeightField, config: SolverConfig) -> tuple[np.ndarray, np.ndarray]:
    """Per-pair weights for the (constant-shading, constant-reflectance) terms.

    The sigmoid ``w`` is near 1 between spectrally similar neighbors. Under
    the ``"retinex"`` pairing, similar neighbors are taken to share
    reflectance, so ``w`` gates the constant-reflectance terms and
    ``v = 1 - w`` gates the constant-shading terms (active across chromatic
    edges). ``"literal"`` swaps them.
    """
    if config.weight_pairing == "retinex":
        return weights.v, weights.w
    return weights.w, weights.v


# -- conjugate gradient ------------------------------------------------------


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    residual: float
    converged: bool


def cg_solve(system: SparseSystem, x0=None, tol: float = 1e-8,
             max_iter: int | None = None) -> CGResult:
    """Solve the SPD system by conjugate gradient.

    Converged when ``|Q x - b| <= tol |b|``; otherwise the last iterate is
    returned with ``converged=False``. ``residual`` is the true residual
    norm of the returned ``x``. Diagonal systems are solved in closed form.
    """
    A = system.matrix
    n = system.n
    b = np.ascontiguousarray(system.rhs, dtype=np.float64)
    if not np.all(np.isfinite(b)):
        raise SolverError("right-hand side has non-finite entries")
    x0 = np.zeros(n) if x0 is None else np.ascontiguousarray(x0, dtype=np.float64)
    if max_iter is None:
        max_iter = 10 * max(n, 1)
    if n == 0:
        return CGResult(np.zeros(0), 0, 0.0, True)
    indptr = np.ascontiguousarray(A.indptr, dtype=np.int32)
    indices = np.ascontiguousarray(A.indices, dtype=np.int32)
    data = np.ascontiguousarray(A.data, dtype=np.float64)
    rows = np.repeat(np.arange(n, dtype=np.int32), np.diff(indptr))
    if np.array_equal(indices, rows):
        return _diagonal_solve(A, b)
    x, it, _, status = kernels.cg_csr(indptr, indices, data, b, x0, float(tol), int(max_iter))
    if status == 3:
        raise SolverError(f"non-finite values after {it} CG iterations")
    res = float(np.linalg.norm(b - A @ x))
    if status == 2:
        bnorm = float(np.linalg.norm(b))
        if res > tol * bnorm:
            raise SolverError(
                f"CG breakdown (non-positive curvature) after {it} iterations, "
                f"residual {res:.3e}, |b| {bnorm:.3e}"
            )
    return CGResult(np.asarray(x), int(it), res, status in (0, 2))


def _diagonal_solve(A, b) -> CGResult:
    d = A.diagonal()
    if not np.all(np.isfinite(d)):
        raise SolverError("non-finite values on the diagonal")
    live = b != 0
    if np.any(d[live] <= 0):
        raise SolverError("CG breakdown (non-positive curvature) on a diagonal system")
    x = np.zeros_like(b)
    x[live] = b[live] / d[live]
    return CGResult(x, 1 if live.any() else 0, float(np.linalg.norm(b - d * x)), True)


def gd_solve(system: SparseSystem, x0=None, tol: float = 1e-8, max_iter: int = 1000) -> CGResult:
    """Steepest descent with exact line search on the quadratic."""
    A, b = system.matrix, system.rhs
    x = np.zeros(system.n) if x0 is None else np.array(x0, dtype=np.float64)
    bnorm = float(np.linalg.norm(b))
    it = 0
    g = A @ x - b
    while it < max_iter and np.linalg.norm(g) > tol * bnorm:
        ag = A @ g
        curv = float(g @ ag)
        if curv <= 0:
            break
        x -= (float(g @ g) / curv) * g
        g = A @ x - b
        it += 1
    res = float(np.linalg.norm(g))
    return CGResult(x, it, res, res <= tol * bnorm)


def _subsolve(system: SparseSystem, x0, config: SolverConfig, budget: int) -> CGResult:
    if config.subsolver == "gd":
        return gd_solve(system, x0, config.cg_tol, budget)
    return cg_solve(system, x0, config.cg_tol, budget)


# -- problem setup -------------------------------------------------------------


@dataclass
class Problem:
    """Everything the energy needs, with the fixed pair Grams precomputed."""

    lum: np.ndarray  # (N, K)
    height: int
    width: int
    shading_basis: BasisMatrix
    reflectance_basis: BasisMatrix
    weights: WeightField
    config: SolverConfig
    shading_gate: np.ndarray = field(init=False)
    reflectance_gate: np.ndarray = field(init=False)
    _s_pairs: BlockGram | None = field(default=None, init=False, repr=False)
    _r_pairs: BlockGram | None = field(default=None, init=False, repr=False)

    def __post_init__(self):
        if self.shading_basis.bands != self.lum.shape[1] or \
                self.reflectance_basis.bands != self.lum.shape[1]:
            raise ValueError("basis band counts must match the cube")
        if self.weights.n_pixels != self.lum.shape[0]:
            raise ValueError("weight field does not match the cube's pixel grid")
        self.shading_gate, self.reflectance_gate = pair_gates(self.weights, self.config)

    @classmethod
    def from_cube(cls, cube: SpectralCube, B_s, B_r, weights, config) -> "Problem":
        return cls(np.ascontiguousarray(cube.pixels()), cube.height, cube.width,
                   B_s, B_r, weights, config)

    @property
    def n_pixels(self) -> int:
        return self.lum.shape[0]

    def shading_pair_gram(self) -> BlockGram:
        """Gram of ``|W_Bs S|^2 + lambda1 |V_{L,Bs} S|^2``."""
        if self._s_pairs is None:
            g = pair_gram(None, self.shading_basis, self.weights, self.shading_gate)
            g = g + self.config.lambda1 * pair_gram(self.lum, self.shading_basis, self.weights,
                                                    self.reflectance_gate)
            self._s_pairs = g
        return self._s_pairs

    def reflectance_pair_gram(self) -> BlockGram:
        """Gram of ``|W_{L,Br} R|^2 + lambda1 |V_Br R|^2``."""
        if self._r_pairs is None:
            g = pair_gram(self.lum, self.reflectance_basis, self.weights, self.shading_gate)
            g = g + self.config.lambda1 * pair_gram(None, self.reflectance_basis, self.weights,
                                                    self.reflectance_gate)
            self._r_pairs = g
        return self._r_pairs

    # systems -----------------------------------------------------------------

    def initial_shading_system(self) -> SparseSystem:
        lam2 = self.config.lambda2
        gblocks, grhs = generic_gram(self.lum, self.shading_basis)
        Q = self.shading_pair_gram().add_diag(lam2 * gblocks)
        return SparseSystem(Q.to_csr(), lam2 * grhs, "initial shading")

    def initial_reflectance_system(self, S) -> SparseSystem:
        lam2, lamd = self.config.lambda2, self.config.lambda_data
        gblocks, grhs = generic_gram(self.lum, self.reflectance_basis)
        dblocks, drhs = data_gram(S, self.shading_basis, self.reflectance_basis, self.lum)
        Q = self.reflectance_pair_gram().add_diag(lam2 * gblocks + lamd * dblocks)
        return SparseSystem(Q.to_csr(), lamd * drhs + lam2 * grhs, "initial reflectance")

    def shading_block_system(self, R) -> SparseSystem:
        """Normal equations of E in S with R held fixed."""
        lamd = 2.0 * self.config.lambda_data
        dblocks, drhs = data_gram(R, self.reflectance_basis, self.shading_basis, self.lum)
        Q = self.shading_pair_gram().add_diag(lamd * dblocks)
        return SparseSystem(Q.to_csr(), lamd * drhs, "shading block")

    def reflectance_block_system(self, S) -> SparseSystem:
        """Normal equations of E in R with S held fixed."""
        lamd = 2.0 * self.config.lambda_data
        dblocks, drhs = data_gram(S, self.shading_basis, self.reflectance_basis, self.lum)
        Q = self.reflectance_pair_gram().add_diag(lamd * dblocks)
        return SparseSystem(Q.to_csr(), lamd * drhs, "reflectance block")

    # energy ------------------------------------------------------------------

    def shading_pair_energy(self, S) -> float:
        return (pair_energy(S, None, self.shading_basis, self.weights, self.shading_gate)
                + self.config.lambda1 * pair_energy(S, self.lum, self.shading_basis,
                                                    self.weights, self.reflectance_gate))

    def reflectance_pair_energy(self, R) -> float:
        return (pair_energy(R, self.lum, self.reflectance_basis, self.weights, self.shading_gate)
                + self.config.lambda1 * pair_energy(R, None, self.reflectance_basis,
                                                    self.weights, self.reflectance_gate))

    def energy(self, S, R) -> "Energy":
        Bs, Br, w, lum = self.shading_basis, self.reflectance_basis, self.weights, self.lum
        e_sc = (pair_energy(R, lum, Br, w, self.shading_gate)
                + pair_energy(S, None, Bs, w, self.shading_gate))
        e_rc = (pair_energy(S, lum, Bs, w, self.reflectance_gate)
                + pair_energy(R, None, Br, w, self.reflectance_gate))
        s = np.reshape(S, (-1, Bs.rank)) @ Bs.columns.T
        r = np.reshape(R, (-1, Br.rank)) @ Br.columns.T
        e_data = float(np.sum((s * r - lum) ** 2))
        cfg = self.config
        total = e_sc + cfg.lambda1 * e_rc + 2.0 * cfg.lambda_data * e_data
        return Energy(total, e_sc, e_rc, e_data)

    def gradient(self, S, R) -> tuple[np.ndarray, np.ndarray]:
        """Analytic gradient of the energy with respect to S and R."""
        S = np.ravel(S)
        R = np.ravel(R)
        sys_s = self.shading_block_system(R)
        sys_r = self.reflectance_block_system(S)
        return 2.0 * (sys_s.matrix @ S - sys_s.rhs), 2.0 * (sys_r.matrix @ R - sys_r.rhs)


@dataclass(frozen=True)
class Energy:
    total: float
    e_sc: float
    e_rc: float
    e_data: float

    def __iter__(self):
        return iter((self.total, self.e_sc, self.e_rc, self.e_data))


@dataclass
class TraceRecord:
    iteration: int
    energy: float
    e_sc: float
    e_rc: float
    e_data: float
    cg_iters: int
    grad_norm: float = float("nan")
    grad_ratio: float = float("nan")
    step: float = float("nan")
    lmse_shading: float | None = None
    lmse_reflectance: float | None = None


@dataclass
class SolveTrace:
    records: list[TraceRecord] = field(default_factory=list)
    stop_reason: str = ""

    @property
    def energies(self) -> np.ndarray:
        return np.array([r.energy for r in self.records])

    @property
    def outer_iterations(self) -> int:
        return max(0, len(self.records) - 1)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iter", "E", "E_sc", "E_rc", "E_data", "cg_iters",
                             "lmse_shading", "lmse_reflectance"])
            for r in self.records:
                writer.writerow([r.iteration, repr(r.energy), repr(r.e_sc), repr(r.e_rc),
                                 repr(r.e_data), r.cg_iters,
                                 "" if r.lmse_shading is None else repr(r.lmse_shading),
                                 "" if r.lmse_reflectance is None else repr(r.lmse_reflectance)])


# -- public solver steps --------------------------------------------------------


def _as_problem(cube, B_s, B_r, weights, config) -> Problem:
    return Problem.from_cube(cube, B_s, B_r, weights, config or SolverConfig())


def _budget(config: SolverConfig, n: int) -> int:
    return config.cg_max_iter if config.cg_max_iter is not None else 10 * max(n, 1)


def _initial_shading(problem: Problem) -> tuple[np.ndarray, int]:
    system = problem.initial_shading_system()
    res = cg_solve(system, None, problem.config.cg_tol, _budget(problem.config, system.n))
    if not res.converged:
        log.warning("initial shading CG stopped at residual %.3e", res.residual)
    return res.x.reshape(-1, problem.shading_basis.rank), res.iterations


def _initial_reflectance(problem: Problem, S) -> tuple[np.ndarray, int]:
    system = problem.initial_reflectance_system(S)
    res = cg_solve(system, None, problem.config.cg_tol, _budget(problem.config, system.n))
    if not res.converged:
        log.warning("initial reflectance CG stopped at residual %.3e", res.residual)
    return res.x.reshape(-1, problem.reflectance_basis.rank), res.iterations


def initial_shading(cube: SpectralCube, B_s: BasisMatrix, weights: WeightField,
                    config: SolverConfig | None = None, B_r: BasisMatrix | None = None) -> np.ndarray:
    """Shading coefficients from the pair terms plus the generic constraint."""
    B_r = B_r or B_s
    return _initial_shading(_as_problem(cube, B_s, B_r, weights, config))[0]


def initial_reflectance(cube: SpectralCube, B_r: BasisMatrix, weights: WeightField, S_prev,
                        B_s: BasisMatrix, config: SolverConfig | None = None) -> np.ndarray:
    """Reflectance coefficients given a shading estimate (data + generic terms)."""
    return _initial_reflectance(_as_problem(cube, B_s, B_r, weights, config), S_prev)[0]


def total_energy(cube, S, R, B_s, B_r, weights, config=None) -> Energy:
    return _as_problem(cube, B_s, B_r, weights, config).energy(S, R)


def energy_gradient(cube, S, R, B_s, B_r, weights, config=None):
    return _as_problem(cube, B_s, B_r, weights, config).gradient(S, R)


RESCALE_LIMIT = 2.0


def balance_scale(problem: Problem, S, R) -> float:
    """Scale ``c`` for ``(c S, R / c)`` that lowers the pair energies.

    The data term is unchanged by this rescaling; the pair terms become
    ``c^2 a + b / c^2``, minimized at ``c = (b / a)^(1/4)``. The factor is
    limited to ``[1/RESCALE_LIMIT, RESCALE_LIMIT]`` per call (the objective
    is convex in ``c^2``, so a partial move still never raises it), and
    rescaling is skipped when the saving is round-off next to ``|l|^2``.
    """
    a = problem.shading_pair_energy(S)
    b = problem.reflectance_pair_energy(R)
    if a <= 0 or b <= 0:
        return 1.0
    saving = a + b - 2.0 * np.sqrt(a * b)
    if saving <= 1e-12 * float(np.vdot(problem.lum, problem.lum)):
        return 1.0
    c = (b / a) ** 0.25
    return float(np.clip(c, 1.0 / RESCALE_LIMIT, RESCALE_LIMIT))


def extrapolation_step(problem: Problem, S, R, dS, dR, max_step: float = 50.0) -> float:
    """Exact minimizer over ``t in [0, max_step]`` of ``E(S + t dS, R + t dR)``.

    Along a line the energy is a quartic in ``t``: the pair terms are
    quadratic and the data residual ``(s + t ds) .* (r + t dr) - l`` is
    quadratic in ``t``. Returns 0 when no step lowers the energy.
    """
    Bs, Br = problem.shading_basis.columns, problem.reflectance_basis.columns
    lamd = problem.config.lambda_data

    def pairs(s_coef, r_coef):
        return problem.shading_pair_energy(s_coef) + problem.reflectance_pair_energy(r_coef)

    p0 = pairs(S, R)
    p2 = pairs(dS, dR)
    p1 = pairs(S + dS, R + dR) - p0 - p2
    s, r = S @ Bs.T, R @ Br.T
    ds, dr = dS @ Bs.T, dR @ Br.T
    c0 = s * r - problem.lum
    c1 = ds * r + s * dr
    c2 = ds * dr
    d = [np.vdot(c0, c0), 2 * np.vdot(c0, c1), np.vdot(c1, c1) + 2 * np.vdot(c0, c2),
         2 * np.vdot(c1, c2), np.vdot(c2, c2)]
    coef = np.array([p0, p1, p2, 0.0, 0.0]) + 2.0 * lamd * np.array(d)
    poly = np.polynomial.Polynomial(coef)
    cands = [t.real for t in poly.deriv().roots() if abs(t.imag) < 1e-12 and 0 < t.real <= max_step]
    cands.append(max_step)
    best = min(cands, key=poly)
    return float(best) if poly(best) < p0 + 2.0 * lamd * d[0] else 0.0


def _refine(problem: Problem, S, R, ground_truth=None, lmse_config=None,
            trace: SolveTrace | None = None) -> tuple[np.ndarray, np.ndarray, SolveTrace]:
    cfg = problem.config
    S = np.array(S, dtype=np.float64).reshape(-1, problem.shading_basis.rank)
    R = np.array(R, dtype=np.float64).reshape(-1, problem.reflectance_basis.rank)
    trace = trace or SolveTrace()

    def grad_norm():
        g_s, g_r = problem.gradient(S, R)
        return float(np.sqrt(g_s @ g_s + g_r @ g_r))

    g0 = grad_norm()

    def record(it, cg_iters, g=float("nan"), step=float("nan")):
        e = problem.energy(S, R)
        rec = TraceRecord(it, e.total, e.e_sc, e.e_rc, e.e_data, cg_iters, g,
                          g / g0 if g0 > 0 else 0.0, step)
        if ground_truth is not None:
            rec.lmse_shading, rec.lmse_reflectance = _lmse_pair(problem, S, R, ground_truth,
                                                                lmse_config)
        trace.records.append(rec)
        return e.total

    e_prev = record(0, 0) if not trace.records else trace.records[-1].energy
    trace.stop_reason = "outer budget"
    if cfg.outer_max_iter == 0:
        trace.stop_reason = "no refinement"
    budget = min(cfg.inner_max_iter, _budget(cfg, max(S.size, R.size)))
    for it in range(1, cfg.outer_max_iter + 1):
        S_old, R_old = S.copy(), R.copy()
        rs = _subsolve(problem.shading_block_system(R), S.ravel(), cfg, budget)
        S = rs.x.reshape(S.shape)
        rr = _subsolve(problem.reflectance_block_system(S), R.ravel(), cfg, budget)
        R = rr.x.reshape(R.shape)
        if cfg.extrapolate:
            dS, dR = S - S_old, R - R_old
            t = extrapolation_step(problem, S, R, dS, dR)
            if t > 0:
                S_try, R_try = S + t * dS, R + t * dR
                if problem.energy(S_try, R_try).total < problem.energy(S, R).total:
                    S, R = S_try, R_try
        if cfg.rescale:
            c = balance_scale(problem, S, R)
            S, R = S * c, R / c
        g = grad_norm()
        step = max(_rel_change(S, S_old), _rel_change(R, R_old))
        e = record(it, rs.iterations + rr.iterations, g, step)
        if e > e_prev + cfg.energy_rtol * max(abs(e_prev), 1e-300):
            raise EnergyIncreaseError(
                f"energy rose from {e_prev!r} to {e!r} at outer iteration {it}"
            )
        e_prev = e
        if g <= cfg.grad_tol * g0:
            trace.stop_reason = "gradient"
            break
        if step < cfg.step_tol:
            trace.stop_reason = "step"
            break
    return S, R, trace


def _rel_change(new, old) -> float:
    denom = float(np.linalg.norm(old))
    diff = float(np.linalg.norm(new - old))
    return diff / denom if denom > 0 else diff


def _lmse_pair(problem: Problem, S, R, ground_truth, lmse_config):
    from .metrics import lmse

    gt_s, gt_r = ground_truth
    s_cube, _ = reconstruct_field(S, problem.shading_basis, problem.height, problem.width)
    r_cube, _ = reconstruct_field(R, problem.reflectance_basis, problem.height, problem.width)
    return lmse(s_cube, gt_s, lmse_config), lmse(r_cube, gt_r, lmse_config)


def refine_alternating(cube, S0, R0, B_s, B_r, weights, config=None,
                       ground_truth=None, lmse_config=None):
    """Alternate exact S and R block solves until a stopping rule fires.

    Returns ``(S, R, trace)``. Stops when the energy gradient norm falls to
    ``grad_tol`` times its value at the starting point, when the relative
    coefficient change of a round drops below ``step_tol``, or after
    ``outer_max_iter`` rounds.
    """
    problem = _as_problem(cube, B_s, B_r, weights, config)
    return _refine(problem, S0, R0, ground_truth, lmse_config)


@dataclass
class Decomposition:
    shading: SpectralCube
    reflectance: SpectralCube
    trace: SolveTrace
    shading_coeffs: np.ndarray
    reflectance_coeffs: np.ndarray
    shading_basis: BasisMatrix
    reflectance_basis: BasisMatrix
    weights: WeightField
    clamp_fraction: tuple[float, float]
    initial_coeffs: tuple[np.ndarray, np.ndarray]
    seconds: float


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except StageError:
        raise
    except Exception as exc:
        raise StageError(name, exc) from exc


def decompose(cube: SpectralCube, illum, reflectance, config: SolverConfig | None = None,
              weight_params: WeightParams | None = None, ground_truth=None,
              lmse_config=None) -> Decomposition:
    """Full pipeline: weights, bases, initial estimates, refinement, reconstruction.

    ``reflectance`` is either a :class:`BasisMatrix` or a
    :class:`ReflectanceLibrary` (PCA of rank 8 is taken).
    """
    t0 = time.perf_counter()
    config = config or SolverConfig()
    weight_params = weight_params or WeightParams()
    weights = _stage("weights", compute_weight_field, cube, weight_params)
    B_s = _stage("basis", shading_basis, illum)
    if isinstance(reflectance, ReflectanceLibrary):
        B_r = _stage("basis", reflectance_basis_pca, reflectance.matched_to(cube))
    else:
        B_r = reflectance
    problem = _stage("setup", Problem.from_cube, cube, B_s, B_r, weights, config)
    S0, it_s = _stage("initial shading", _initial_shading, problem)
    R0, it_r = _stage("initial reflectance", _initial_reflectance, problem, S0)
    trace = SolveTrace()
    e0 = problem.energy(S0, R0)
    trace.records.append(TraceRecord(0, e0.total, e0.e_sc, e0.e_rc, e0.e_data, it_s + it_r))
    if ground_truth is not None:
        trace.records[0].lmse_shading, trace.records[0].lmse_reflectance = _lmse_pair(
            problem, S0, R0, ground_truth, lmse_config)
    S, R, trace = _stage("refinement", _refine, problem, S0, R0, ground_truth, lmse_config, trace)
    shading, fs = reconstruct_field(S, B_s, cube.height, cube.width, cube.wavelengths)
    refl, fr = reconstruct_field(R, B_r, cube.height, cube.width, cube.wavelengths)
    if fs or fr:
        log.info("clamped negative reconstructions: shading %.4f, reflectance %.4f", fs, fr)
    return Decomposition(shading, refl, trace, S, R, B_s, B_r, weights, (fs, fr),
                         (S0, R0), time.perf_counter() - t0)


__all__ = [
    "SolverConfig", "SolverError", "EnergyIncreaseError", "StageError", "CGResult",
    "cg_solve", "gd_solve", "initial_shading", "initial_reflectance", "total_energy",
    "energy_gradient", "refine_alternating", "decompose", "Decomposition", "SolveTrace",
    "TraceRecord", "Energy", "Problem", "balance_scale", "pair_gates",
]
