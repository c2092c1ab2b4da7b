import os
from pathlib import Path

import numpy as np
import pytest

from antigan.data import LabeledDataset

ROOT = Path(__file__).resolve().parents[1]
DATA_ROOT = Path(os.environ.get("ANTIGAN_DATA_ROOT", ROOT / "data"))


def have_mnist():
    return (DATA_ROOT / "mnist" / "train-images-idx3-ubyte.gz").exists() or \
        (DATA_ROOT / "mnist" / "train-images-idx3-ubyte").exists()


needs_mnist = pytest.mark.skipif(
    not have_mnist(), reason="MNIST archives not found; run scripts/prepare_mnist_subset.py")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_dataset(n=20, num_classes=2, channels=1, seed=0, labels=None):
    r = np.random.default_rng(seed)
    images = r.uniform(-1, 1, size=(n, channels, 32, 32)).astype(np.float32)
    if labels is None:
        labels = np.arange(n) % num_classes
    return LabeledDataset(images, np.asarray(labels), num_classes)


# --- acceptance summary -------------------------------------------------------

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
