import csv
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from msiid.speccube import SpectralCube
from msiid.weights import (SweepRow, WeightParams, compute_weight_field, cosine_distance,
                           default_alpha_grid, default_beta_grid, neighbor_pairs,
                           pair_distances, sigmoid_weight, sweep_params, write_sweep_csv)

from conftest import make_scene

spectra = hnp.arrays(np.float64, 6, elements=st.floats(0, 10, allow_nan=False))


def test_defaults():
    p = WeightParams()
    assert (p.alpha, p.beta) == (5000.0, 0.0032)
    with pytest.raises(ValueError):
        WeightParams(alpha=0)
    with pytest.raises(ValueError):
        WeightParams(beta=-1)


@pytest.mark.parametrize("h, w", [(1, 1), (1, 5), (4, 1), (3, 4), (7, 7)])
def test_neighbor_pair_count_and_order(h, w):
    pairs = neighbor_pairs(h, w)
    assert len(pairs) == h * (w - 1) + w * (h - 1)
    nh = h * (w - 1)
    assert np.all(pairs[:nh, 1] - pairs[:nh, 0] == 1)
    assert np.all(pairs[nh:, 1] - pairs[nh:, 0] == w)
    assert np.all(pairs[:nh, 0] % w != w - 1)


def test_cosine_distance_examples():
    assert cosine_distance([1, 0], [0, 1]) == pytest.approx(1.0)
    assert cosine_distance([1, 2, 3], [2, 4, 6]) == pytest.approx(0.0, abs=1e-15)
    assert cosine_distance([1, 1], [-1, -1]) == pytest.approx(2.0)
    assert cosine_distance([0, 0], [1, 2]) == 0.0
    with pytest.raises(ValueError):
        cosine_distance([1, 2], [1, 2, 3])


@given(spectra, spectra, st.floats(1e-3, 1e3))
def test_distance_symmetric_scale_invariant_bounded(a, b, c):
    d = cosine_distance(a, b)
    assert d == pytest.approx(cosine_distance(b, a), abs=1e-12)
    assert d == pytest.approx(cosine_distance(c * a, b), abs=1e-9)
    assert -1e-12 <= d <= 2 + 1e-12


@given(st.floats(1, 1e4), st.floats(1e-5, 0.5), st.floats(0, 2), st.floats(0, 2))
def test_sigmoid_properties(alpha, beta, d1, d2):
    p = WeightParams(alpha, beta)
    w1, w2 = sigmoid_weight(d1, p), sigmoid_weight(d2, p)
    assert 0 <= w1 <= 1
    if d1 < d2:
        assert w1 >= w2
    assert sigmoid_weight(beta, p) == 0.5


def test_sigmoid_no_overflow():
    with np.errstate(over="raise"):
        w = sigmoid_weight(np.array([0.0, 2.0]), WeightParams(1e4, 1e-5))
    assert w[1] == 0.0 and w[0] > 0.5


def test_weight_field_matches_pairs(rng):
    cube = SpectralCube(rng.uniform(0.1, 1, (5, 6, 4)))
    wf = compute_weight_field(cube, WeightParams())
    np.testing.assert_allclose(wf.w + wf.v, 1.0, rtol=0, atol=0)
    px = cube.pixels()
    for (p, q), d in zip(wf.pairs, wf.distance):
        assert d == pytest.approx(cosine_distance(px[p], px[q]), abs=1e-14)


def test_single_pixel_has_no_pairs():
    assert len(pair_distances(SpectralCube(np.ones((1, 1, 3))))) == 0


def test_uniform_region_gets_full_constant_reflectance_weight():
    cube = SpectralCube(np.outer(np.linspace(0.2, 1, 16), [0.3, 0.5, 0.7]).reshape(4, 4, 3))
    wf = compute_weight_field(cube, WeightParams())
    assert wf.w.min() > 0.999999


def test_grids():
    a, b = default_alpha_grid(), default_beta_grid()
    assert len(a) == 20 and a[0] == 1000 and a[-1] == 10000
    assert len(b) == 50 and b[0] == pytest.approx(1e-5) and b[-1] == pytest.approx(1e-2)


def test_sweep_small_grid(library, tmp_path, monkeypatch):
    scene, B_s, B_r = make_scene(library, height=12, width=12, bands=8, n_regions=3, seed=1)
    best, rows = sweep_params(scene.luminance, scene.shading, scene.reflectance,
                              [2000.0, 5000.0], [1e-3, 1e-2], scene.illum, B_r)
    assert [(r.alpha, r.beta) for r in rows] == [(2000, 1e-3), (2000, 1e-2),
                                                (5000, 1e-3), (5000, 1e-2)]
    assert all(r.status == "ok" for r in rows)
    top = min(rows, key=lambda r: (r.lmse, r.alpha, r.beta))
    assert (best.alpha, best.beta) == (top.alpha, top.beta)
    write_sweep_csv(rows, tmp_path / "s.csv")
    with open(tmp_path / "s.csv") as fh:
        table = list(csv.DictReader(fh))
    assert len(table) == 4 and set(table[0]) == {"alpha", "beta", "lmse", "status"}

    monkeypatch.setenv("LRIID_THREADS", "2")
    _, rows2 = sweep_params(scene.luminance, scene.shading, scene.reflectance,
                            [2000.0, 5000.0], [1e-3, 1e-2], scene.illum, B_r)
    assert [r.lmse for r in rows2] == [r.lmse for r in rows]


def test_sweep_records_failures(library, monkeypatch):
    import msiid.solve as solve

    scene, B_s, B_r = make_scene(library, height=8, width=8, bands=8, n_regions=2, seed=2)
    real = solve.decompose

    def flaky(cube, illum, refl, config, params, *a, **k):
        if params.beta > 5e-3:
            raise solve.SolverError("boom")
        return real(cube, illum, refl, config, params, *a, **k)

    monkeypatch.setattr(solve, "decompose", flaky)
    best, rows = sweep_params(scene.luminance, scene.shading, scene.reflectance,
                              [5000.0], [1e-3, 1e-2], scene.illum, B_r)
    assert [r.status for r in rows] == ["ok", "failed"]
    assert math.isnan(rows[1].lmse) and best.beta == 1e-3
    with pytest.raises(RuntimeError):
        sweep_params(scene.luminance, scene.shading, scene.reflectance,
                     [5000.0], [1e-2], scene.illum, B_r)


def test_sweep_csv_blank_for_failed(tmp_path):
    write_sweep_csv([SweepRow(1.0, 2.0, math.nan, "failed")], tmp_path / "s.csv")
    assert (tmp_path / "s.csv").read_text().splitlines()[1] == "1.0,2.0,,failed"
