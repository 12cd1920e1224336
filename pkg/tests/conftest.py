import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from msiid.basis import default_library, reflectance_basis_pca, shading_basis
from msiid.synth import SceneSpec, generate_scene

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def library():
    return default_library()


def make_scene(library, **kw):
    """Scene plus its bases, using the shipped library resampled to the scene bands."""
    spec = SceneSpec(**kw)
    lib = library.resampled(spec.wavelengths)
    B_r = reflectance_basis_pca(lib)
    scene = generate_scene(spec, B_r, lib)
    return scene, shading_basis(scene.illum), B_r


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# -- acceptance reporting ------------------------------------------------------

_CRITERIA = {}


def pytest_runtest_logreport(report):
    info = dict(report.user_properties).get("criterion")
    if info is None or (report.when != "call" and report.passed):
        return
    number, title = info
    props = dict(report.user_properties)
    verdict = props.get("verdict") or ("PASS" if report.passed else "FAIL")
    _CRITERIA[number] = (verdict, title, props.get("detail", ""))


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            item.user_properties.append(("criterion", tuple(mark.args)))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        verdict, title, detail = _CRITERIA[number]
        line = f"{verdict} criterion {number:>2}: {title}"
        terminalreporter.write_line(line + (f" [{detail}]" if detail else ""))
