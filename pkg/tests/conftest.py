import os

# Pin BLAS pools before numpy spins them up; reproducibility over speed.
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np
import pytest

from alseg.data import SceneSpec, generate_dataset


@pytest.fixture(scope="session")
def small_dataset():
    """60 images at default 32x32 scale; enough for module-level tests."""
    return generate_dataset(SceneSpec(), 60, seed=11)


@pytest.fixture(scope="session")
def memory_dataset():
    return generate_dataset(SceneSpec(variant="memory"), 24, seed=5)


@pytest.fixture()
def np_rng():
    return np.random.default_rng(20240811)
