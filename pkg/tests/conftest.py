import numpy as np
import pytest

from codlab.data import synth_generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    """16 synthetic 64x64 pairs shared by io/trainer/cli tests."""
    root = tmp_path_factory.mktemp("tinydata")
    manifest = synth_generate(16, 64, seed=7, out_dir=root)
    return manifest
