import os
import runpy
from pathlib import Path

import numpy as np
import pytest

from featrehearse.data import DATA_ENV, LabeledDataset

ROOT = Path(__file__).resolve().parents[1]


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: end-to-end acceptance criteria (slow)")


@pytest.fixture(scope="session")
def mnist_root(tmp_path_factory):
    """IDX train/t10k pair: $FEATREHEARSE_DATA if it holds one, else the
    bundled 5k subset written by scripts/make_mnist_subset.py."""
    env = os.environ.get(DATA_ENV)
    if env and (Path(env) / "train-images-idx3-ubyte").exists():
        return Path(env)
    cache = ROOT / ".cache" / "mnist5k"
    if (cache / "t10k-labels-idx1-ubyte").exists():
        return cache
    pytest.importorskip("mlxtend")
    script = runpy.run_path(str(ROOT / "scripts" / "make_mnist_subset.py"))
    return script["write_subset"](cache)


def make_blobs(n_per_class=30, classes=4, size=8, seed=0):
    """Tiny synthetic image dataset: each class is a bright square at its own spot."""
    rng = np.random.default_rng(seed)
    imgs, labels = [], []
    for c in range(classes):
        for _ in range(n_per_class):
            img = rng.integers(0, 40, (size, size, 1))
            r, q = divmod(c, 2)
            img[1 + 3 * r:4 + 3 * r, 1 + 3 * q:4 + 3 * q] += 200
            imgs.append(np.clip(img, 0, 255))
            labels.append(c)
    return LabeledDataset(np.array(imgs, dtype=np.uint8), np.array(labels, dtype=np.int64), classes)


@pytest.fixture
def blobs():
    return make_blobs()


@pytest.fixture
def blobs_test():
    return make_blobs(n_per_class=10, seed=1)
