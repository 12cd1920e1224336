"""Compiled vs pure-Python kernels on solver-sized inputs.

    python3 benchmarks/bench_kernels.py [--sizes 16,32,64,128] [--bands 30] [--repeat 5]

Times each kernel on the reflectance normal system of a synthetic scene
at several image sizes, reports the speedup and checks that both backends
agree. Small systems expose per-iteration interpreter overhead in the
fallback; large ones are bound by the sparse product in both.
"""

from __future__ import annotations

import argparse
import timeit

import numpy as np

from msiid import _kernels_py as py
from msiid.basis import default_library, reflectance_basis_pca, shading_basis
from msiid.solve import Problem, SolverConfig
from msiid.synth import SceneSpec, generate_scene
from msiid.weights import WeightParams, compute_weight_field, neighbor_pairs

try:
    from msiid import _kernels as cy
except ImportError:  # extension not built
    cy = None


def _system(size: int, bands: int):
    spec = SceneSpec(height=size, width=size, bands=bands, seed=0)
    lib = default_library().resampled(spec.wavelengths)
    B_r = reflectance_basis_pca(lib)
    scene = generate_scene(spec, B_r, lib)
    weights = compute_weight_field(scene.luminance, WeightParams())
    prob = Problem.from_cube(scene.luminance, shading_basis(scene.illum), B_r, weights,
                             SolverConfig())
    S = np.ones((size * size, 1))
    sys_ = prob.reflectance_block_system(S)
    return scene.luminance, sys_.matrix, sys_.rhs


def _best(fn, repeat: int) -> float:
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main(argv=None) -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="16,32,64,128",
                    help="comma-separated image edge lengths")
    ap.add_argument("--bands", type=int, default=30)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    if cy is None:
        raise SystemExit("compiled extension not available; build with pip install -e .")

    print(f"{'size':>5} {'kernel':<24}{'cython ms':>12}{'python ms':>12}{'speedup':>10}  agree")
    for size in (int(t) for t in args.sizes.split(",")):
        _bench_size(size, args.bands, args.repeat)


def _bench_size(size: int, bands: int, repeat: int) -> None:
    cube, A, b = _system(size, bands)
    ip, ix, data = A.indptr.astype(np.int32), A.indices.astype(np.int32), A.data
    x = np.random.default_rng(0).normal(size=A.shape[0])
    spectra = np.ascontiguousarray(cube.pixels())
    pairs = neighbor_pairs(cube.height, cube.width).astype(np.int64)
    budget = 200

    cases = {
        "csr_matvec": lambda m: m.csr_matvec(ip, ix, data, x),
        f"cg_csr ({budget} it)": lambda m: m.cg_csr(ip, ix, data, b, np.zeros_like(b), 1e-300,
                                                    budget),
        "pair_cosine_distance": lambda m: m.pair_cosine_distance(spectra, pairs),
    }
    for name, fn in cases.items():
        out_c, out_p = fn(cy), fn(py)
        a = out_c[0] if isinstance(out_c, tuple) else out_c
        p = out_p[0] if isinstance(out_p, tuple) else out_p
        agree = np.allclose(a, p, rtol=1e-8, atol=1e-10 * max(1.0, np.abs(p).max()))
        tc = _best(lambda: fn(cy), repeat)
        tp = _best(lambda: fn(py), repeat)
        print(f"{size:>5} {name:<24}{tc * 1e3:>12.3f}{tp * 1e3:>12.3f}{tp / tc:>10.2f}  {agree}")


if __name__ == "__main__":
    main()
