import numpy as np
import pytest

from xmodseg.synthdata import SceneSpec, make_unpaired_dataset


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    """10 samples per modality at 64x64, Z=4 (7 train / 1 val / 2 test each)."""
    root = tmp_path_factory.mktemp("smalldata")
    make_unpaired_dataset(SceneSpec(), {"m1": 10, "m2": 10}, seed=1, out_dir=root)
    return str(root)


@pytest.fixture(scope="session")
def bench_dataset(tmp_path_factory):
    """The benchmark layout: 20 per modality -> 14 train / 2 val / 4 test."""
    root = tmp_path_factory.mktemp("benchdata")
    make_unpaired_dataset(SceneSpec(), {"m1": 20, "m2": 20}, seed=0, out_dir=root)
    return str(root)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
