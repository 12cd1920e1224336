"""Batch command line: decompose, eval, synth and sweep.

Exit status is 0 on success, 1 on a usage error and 2 when inputs fail
validation or a numerical stage fails. Every run leaves a manifest JSON
next to its outputs recording argv, resolved configuration, input hashes,
library versions and wall time.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .basis import DEFAULT_REFLECTANCE_RANK, default_library, load_library_csv, reflectance_basis_pca
from .kernels import BACKEND
from .metrics import LmseConfig, lmse, write_eval_csv
from .solve import SolverConfig, StageError, decompose
from .speccube import (SpectralCube, default_wavelengths, load_cube, load_response,
                       load_spectrum_csv, pseudo_rgb, resample_spectra, save_cube, save_png,
                       save_spectrum_csv)
from .synth import SceneSpec, generate_scene
from .weights import (WeightParams, default_alpha_grid, default_beta_grid, sweep_params,
                      write_sweep_csv)

log = logging.getLogger("msiid")


class UsageError(Exception):
    pass


class RunError(Exception):
    """Validation or numerical failure, tagged with the stage it came from."""

    def __init__(self, stage: str, message: str):
        super().__init__(message)
        self.stage = stage


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _floats(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def _add_solver_flags(p: argparse.ArgumentParser) -> None:
    d = SolverConfig()
    p.add_argument("--lambda1", type=float, default=d.lambda1)
    p.add_argument("--lambda2", type=float, default=d.lambda2)
    p.add_argument("--lambda-data", type=float, default=d.lambda_data)
    p.add_argument("--grad-tol", type=float, default=d.grad_tol)
    p.add_argument("--max-outer", type=int, default=d.outer_max_iter)
    p.add_argument("--weight-pairing", choices=("retinex", "literal"), default=d.weight_pairing)
    p.add_argument("--band-stride", type=int, default=1,
                   help="keep every Nth band before solving")
    p.add_argument("--rank", type=int, default=DEFAULT_REFLECTANCE_RANK,
                   help="reflectance basis rank")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="msiid", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("decompose", help="split a cube into shading and reflectance")
    p.add_argument("--input", required=True, type=Path)
    p.add_argument("--illum", required=True, type=Path, help="CSV of wavelength,value")
    p.add_argument("--library", type=Path, help="reflectance library CSV (default: shipped)")
    p.add_argument("--out-dir", required=True, type=Path)
    p.add_argument("--alpha", type=float, default=WeightParams().alpha)
    p.add_argument("--beta", type=float, default=WeightParams().beta)
    _add_solver_flags(p)

    p = sub.add_parser("eval", help="LMSE of predictions against ground truth")
    p.add_argument("--pred-s", required=True, type=Path)
    p.add_argument("--gt-s", required=True, type=Path)
    p.add_argument("--pred-r", required=True, type=Path)
    p.add_argument("--gt-r", required=True, type=Path)
    p.add_argument("--out", type=Path, default=Path("lmse.csv"))
    p.add_argument("--scene", default=None, help="row label (default: prediction folder)")
    p.add_argument("--window", type=int, default=LmseConfig().window)

    p = sub.add_parser("synth", help="write a synthetic scene with ground truth")
    p.add_argument("--spec", required=True, type=Path, help="scene spec JSON")
    p.add_argument("--out-dir", required=True, type=Path)
    p.add_argument("--library", type=Path)

    p = sub.add_parser("sweep", help="grid search over alpha and beta")
    p.add_argument("--input", required=True, type=Path)
    p.add_argument("--gt-s", required=True, type=Path)
    p.add_argument("--gt-r", required=True, type=Path)
    p.add_argument("--illum", required=True, type=Path)
    p.add_argument("--library", type=Path)
    p.add_argument("--alphas", type=_floats, default=None,
                   help="comma-separated alpha grid (default: 20 values over 1000-10000)")
    p.add_argument("--betas", type=_floats, default=None,
                   help="comma-separated beta grid (default: 50 log-spaced over 1e-5-1e-2)")
    p.add_argument("--window", type=int, default=LmseConfig().window)
    p.add_argument("--out", required=True, type=Path)
    _add_solver_flags(p)
    return parser


# -- helpers --------------------------------------------------------------------


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _require_files(*paths) -> None:
    for path in paths:
        if path is not None and not path.is_file():
            raise RunError("input", f"no such file: {path}")


def _load(stage: str, fn, path):
    try:
        return fn(path)
    except (OSError, ValueError) as exc:
        raise RunError(stage, f"{path}: {exc}") from exc


def _solver_config(args) -> SolverConfig:
    if args.band_stride < 1:
        raise RunError("config", "--band-stride must be >= 1")
    try:
        return SolverConfig(lambda1=args.lambda1, lambda2=args.lambda2,
                            lambda_data=args.lambda_data, grad_tol=args.grad_tol,
                            outer_max_iter=args.max_outer, weight_pairing=args.weight_pairing)
    except ValueError as exc:
        raise RunError("config", str(exc)) from exc


def _weight_params(alpha: float, beta: float) -> WeightParams:
    try:
        return WeightParams(alpha, beta)
    except ValueError as exc:
        raise RunError("config", str(exc)) from exc


def _library(path):
    return default_library() if path is None else _load("library", load_library_csv, path)


def _reflectance_basis(lib, cube: SpectralCube, rank: int):
    try:
        return reflectance_basis_pca(lib.matched_to(cube), rank)
    except ValueError as exc:
        raise RunError("basis", str(exc)) from exc


def _strided(cube: SpectralCube, stride: int) -> SpectralCube:
    if cube.wavelengths is None:
        cube = SpectralCube(cube.data, default_wavelengths(cube.bands))
    return cube.select_bands(stride)


def _illum_for(cube: SpectralCube, path: Path) -> np.ndarray:
    wl, vals = _load("illumination", load_spectrum_csv, path)
    out = resample_spectra(vals, wl, cube.wavelengths)
    if np.any(out < 0) or not np.any(out > 0):
        raise RunError("illumination", "illumination must be nonnegative and not all zero")
    return out


def _config_dict(args) -> dict:
    out = {}
    for key, val in vars(args).items():
        if key.startswith("_") or key == "verbose":
            continue
        out[key] = str(val) if isinstance(val, Path) else val
    return out


def _versions() -> dict:
    import scipy

    return {"msiid": __version__, "backend": BACKEND, "python": platform.python_version(),
            "numpy": np.__version__, "scipy": scipy.__version__}


def write_manifest(path: Path, argv, args, inputs: dict, extra: dict, seconds: float) -> None:
    manifest = {
        "command": args.command,
        "argv": list(argv),
        "config": _config_dict(args),
        "inputs": {k: {"path": str(p), "sha256": _sha256(p)} for k, p in inputs.items()
                   if p is not None},
        "versions": _versions(),
        "wall_time_seconds": round(seconds, 6),
    }
    manifest.update(extra)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _png(cube: SpectralCube, path: Path) -> None:
    save_png(pseudo_rgb(cube, load_response(cube.wavelengths, cube.bands)), path)


# -- subcommands ----------------------------------------------------------------


def cmd_decompose(args, argv, t0) -> int:
    _require_files(args.input, args.illum, args.library)
    config = _solver_config(args)
    params = _weight_params(args.alpha, args.beta)
    cube = _strided(_load("input", load_cube, args.input), args.band_stride)
    illum = _illum_for(cube, args.illum)
    B_r = _reflectance_basis(_library(args.library), cube, args.rank)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    res = decompose(cube, illum, B_r, config, params)
    save_cube(res.shading, args.out_dir / "shading.msc")
    save_cube(res.reflectance, args.out_dir / "reflectance.msc")
    res.trace.to_csv(args.out_dir / "trace.csv")
    _png(cube, args.out_dir / "input.png")
    _png(res.shading, args.out_dir / "shading.png")
    _png(res.reflectance, args.out_dir / "reflectance.png")
    print(f"outer iterations {res.trace.outer_iterations} ({res.trace.stop_reason}), "
          f"energy {res.trace.energies[-1]:.6g}, {res.seconds:.2f} s")
    write_manifest(args.out_dir / "manifest.json", argv, args,
                   {"input": args.input, "illum": args.illum, "library": args.library},
                   {"solver": asdict(config), "weights": asdict(params),
                    "stop_reason": res.trace.stop_reason,
                    "outer_iterations": res.trace.outer_iterations},
                   time.perf_counter() - t0)
    return 0


def cmd_eval(args, argv, t0) -> int:
    _require_files(args.pred_s, args.gt_s, args.pred_r, args.gt_r)
    try:
        cfg = LmseConfig(window=args.window)
    except ValueError as exc:
        raise RunError("config", str(exc)) from exc
    cubes = {k: _load("input", load_cube, getattr(args, k))
             for k in ("pred_s", "gt_s", "pred_r", "gt_r")}
    try:
        ls = lmse(cubes["pred_s"], cubes["gt_s"], cfg)
        lr = lmse(cubes["pred_r"], cubes["gt_r"], cfg)
    except ValueError as exc:
        raise RunError("metric", str(exc)) from exc
    comb = 0.5 * (ls + lr)
    scene = args.scene or args.pred_s.resolve().parent.name
    print(f"LMSE shading {ls:.6f}")
    print(f"LMSE reflectance {lr:.6f}")
    print(f"combined LMSE {comb:.6f}")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_eval_csv([(scene, ls, lr, comb, None)], args.out)
    write_manifest(args.out.with_name(args.out.name + ".manifest.json"), argv, args,
                   {k: getattr(args, k) for k in ("pred_s", "gt_s", "pred_r", "gt_r")},
                   {"lmse": {"shading": ls, "reflectance": lr, "combined": comb}},
                   time.perf_counter() - t0)
    return 0


def cmd_synth(args, argv, t0) -> int:
    _require_files(args.spec, args.library)
    try:
        spec = SceneSpec.from_json(args.spec.read_text())
    except (ValueError, TypeError) as exc:
        raise RunError("scene spec", str(exc)) from exc
    lib = _library(args.library)
    try:
        B_r = reflectance_basis_pca(lib.resampled(spec.wavelengths)) if spec.in_model else None
        scene = generate_scene(spec, B_r, lib)
    except ValueError as exc:
        raise RunError("synth", str(exc)) from exc
    out = args.out_dir
    out.mkdir(parents=True, exist_ok=True)
    save_cube(scene.luminance, out / "luminance.msc")
    save_cube(scene.shading, out / "gt_shading.msc")
    save_cube(scene.reflectance, out / "gt_reflectance.msc")
    save_spectrum_csv(out / "illum.csv", spec.wavelengths, scene.illum)
    (out / "scene.json").write_text(spec.to_json() + "\n")
    print(f"wrote {spec.height}x{spec.width}x{spec.bands} scene to {out}")
    write_manifest(out / "manifest.json", argv, args,
                   {"spec": args.spec, "library": args.library}, {},
                   time.perf_counter() - t0)
    return 0


def cmd_sweep(args, argv, t0) -> int:
    _require_files(args.input, args.gt_s, args.gt_r, args.illum, args.library)
    config = _solver_config(args)
    alphas = args.alphas if args.alphas is not None else list(default_alpha_grid())
    betas = args.betas if args.betas is not None else list(default_beta_grid())
    for a in alphas:
        for b in betas:
            _weight_params(a, b)
    try:
        lmse_cfg = LmseConfig(window=args.window)
    except ValueError as exc:
        raise RunError("config", str(exc)) from exc
    cube = _strided(_load("input", load_cube, args.input), args.band_stride)
    gt_s = _strided(_load("input", load_cube, args.gt_s), args.band_stride)
    gt_r = _strided(_load("input", load_cube, args.gt_r), args.band_stride)
    if not (cube.shape == gt_s.shape == gt_r.shape):
        raise RunError("input", "input and ground-truth cubes differ in shape")
    illum = _illum_for(cube, args.illum)
    B_r = _reflectance_basis(_library(args.library), cube, args.rank)
    try:
        best, rows = sweep_params(cube, gt_s, gt_r, alphas, betas, illum, B_r, config, lmse_cfg)
    except (ValueError, RuntimeError) as exc:
        raise RunError("sweep", str(exc)) from exc
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_sweep_csv(rows, args.out)
    n_failed = sum(r.status != "ok" for r in rows)
    print(f"best alpha {best.alpha:g} beta {best.beta:g} over {len(rows)} points"
          + (f" ({n_failed} failed)" if n_failed else ""))
    write_manifest(args.out.with_name(args.out.name + ".manifest.json"), argv, args,
                   {"input": args.input, "gt_s": args.gt_s, "gt_r": args.gt_r,
                    "illum": args.illum, "library": args.library},
                   {"solver": asdict(config), "best": asdict(best)},
                   time.perf_counter() - t0)
    return 0


COMMANDS = {"decompose": cmd_decompose, "eval": cmd_eval, "synth": cmd_synth,
            "sweep": cmd_sweep}


def run(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    t0 = time.perf_counter()
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args, argv, t0)
    except RunError as exc:
        print(f"error [{exc.stage}]: {exc}", file=sys.stderr)
    except StageError as exc:
        print(f"error [{exc.stage}]: {exc.cause}", file=sys.stderr)
    return 2


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
