import numpy as np
import pytest

from trimix import denoiser as dn
from trimix.dataset import Dataset, DatasetConfig, default_materials, default_shapes, make_dataset

MICRO_SHAPES = ("cube", "torus")
MICRO_MATERIALS = ("red", "blue_gloss", "gold")


@pytest.fixture(scope="session")
def micro_dataset(tmp_path_factory):
    shapes = {k: v for k, v in default_shapes().items() if k in MICRO_SHAPES}
    mats = {k: v for k, v in default_materials().items() if k in MICRO_MATERIALS}
    root = tmp_path_factory.mktemp("micro_data")
    make_dataset(shapes, mats, DatasetConfig(resolution=16, views=2, held_out=(("cube", "gold"),)), root)
    return Dataset(root)


@pytest.fixture(scope="session")
def micro_arch():
    return dn.MICRO_CONFIG


@pytest.fixture()
def micro_params(micro_arch):
    # random output layers so that every path through the net matters
    return dn.init_params(micro_arch, seed=3, zero_init=False)


@pytest.fixture()
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(results[n])
