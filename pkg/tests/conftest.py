import os
import subprocess
import sys

import numpy as np
import pytest

from kdd_loam import parallel

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.fixture(autouse=True)
def single_worker():
    parallel.set_max_workers(1)
    yield
    parallel.set_max_workers(1)


@pytest.fixture(scope="package")
def kdd_loam_cli():
    def run(*args: str) -> subprocess.CompletedProcess:
        return subprocess.run(
            [sys.executable, "-m", "kdd_loam.main", *args],
            cwd=ROOT,
            capture_output=True,
            text=True,
            timeout=600,
        )

    return run
