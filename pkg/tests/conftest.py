import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from traitreg.data import SplitSpec, prepare_dataset, load_dataset
from traitreg.synthetic import generate_synthetic


@pytest.fixture(scope="session")
def tiny_data_dir(tmp_path_factory):
    """12 rendered samples at 16x16, shared across test modules."""
    root = tmp_path_factory.mktemp("tiny_data")
    generate_synthetic(root, 12, seed=21, height=16, width=16)
    return root


@pytest.fixture(scope="session")
def tiny_samples(tiny_data_dir):
    return load_dataset(tiny_data_dir)


@pytest.fixture()
def tiny_dataset(tiny_samples):
    spec = SplitSpec(train_fraction=0.7, test_count=2, seed=3)
    return prepare_dataset(tiny_samples, spec)


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(404)
