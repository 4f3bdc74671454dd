import os
from pathlib import Path

import numpy as np
import pytest

from sparse_sieve.data import synthetic_blobs, split
from sparse_sieve.models import ModelSpec, build_model, train

MNIST_DIR = Path(os.environ.get("SPARSE_SIEVE_DATA", "/root/data/mnist"))


def mnist_available() -> bool:
    return MNIST_DIR.is_dir() and any(MNIST_DIR.glob("t10k-images*"))


@pytest.fixture(scope="session")
def blobs():
    return synthetic_blobs(classes=3, per_class=120, shape=(1, 8, 8), seed=0)


@pytest.fixture(scope="session")
def blob_split(blobs):
    return split(blobs, test_fraction=0.25, seed=0)


@pytest.fixture(scope="session")
def blob_model(blob_split):
    trn, tst = blob_split
    spec = ModelSpec.mlp((32,), trn.num_classes, trn.image_shape)
    model, _ = train(build_model(spec, 0), trn, epochs=3, batch_size=32, seed=0, test=tst)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


VERDICTS = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record a one-line PASS/FAIL verdict; all verdicts are echoed at the end of the run."""
    lines = request.config.stash.setdefault(VERDICTS, [])

    def record(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"criterion {number:>2} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
        lines.append((number, line))
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(VERDICTS, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
