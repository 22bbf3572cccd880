import os
from pathlib import Path

import numpy as np
import pytest

DATA_ROOT = Path(os.environ.get("AGPMIL_DATA", "/root/data"))
MNIST_DIR = DATA_ROOT / "mnist"
CIFAR_DIR = DATA_ROOT / "cifar-10-batches-bin"


def numeric_grad(f, x: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + eps
        fp = f()
        x[i] = old - eps
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def mnist_dir():
    if not (MNIST_DIR / "train-images-idx3-ubyte").exists() and not (MNIST_DIR / "train-images-idx3-ubyte.gz").exists():
        pytest.skip(f"MNIST files not found under {MNIST_DIR}")
    return MNIST_DIR


@pytest.fixture(scope="session")
def cifar_dir():
    if not (CIFAR_DIR / "data_batch_1.bin").exists():
        pytest.skip(f"CIFAR-10 binary batches not found under {CIFAR_DIR}")
    return CIFAR_DIR


# --- acceptance summary ---------------------------------------------------
_CRITERIA = {}


def record_criterion(number: int, passed, detail: str) -> None:
    """Store one acceptance result; ``passed=None`` marks a skipped criterion."""
    _CRITERIA[number] = (passed, detail)
    status = "SKIP" if passed is None else "PASS" if passed else "FAIL"
    print(f"ACCEPTANCE criterion {number}: {status}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        passed, detail = _CRITERIA[number]
        status = "SKIP" if passed is None else "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {number}: {status}: {detail}")
