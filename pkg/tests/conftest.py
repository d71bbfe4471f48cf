import gzip
import shutil
from pathlib import Path

import pytest

DATA = Path(__file__).parent / "data"
MNIST_FILES = {
    "train_images": "mnist5k-train-images-idx3-ubyte",
    "train_labels": "mnist5k-train-labels-idx1-ubyte",
    "test_images": "mnist5k-test-images-idx3-ubyte",
    "test_labels": "mnist5k-test-labels-idx1-ubyte",
}


@pytest.fixture(scope="session")
def mnist_paths(tmp_path_factory):
    """Raw IDX paths of the bundled 4000/1000 MNIST subset."""
    root = tmp_path_factory.mktemp("mnist")
    out = {}
    for key, name in MNIST_FILES.items():
        dest = root / name
        with gzip.open(DATA / f"{name}.gz", "rb") as src, open(dest, "wb") as dst:
            shutil.copyfileobj(src, dst)
        out[key] = str(dest)
    return out


_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Append one criterion line to the end-of-run summary (and echo it)."""
    def report(line):
        _ACCEPTANCE_LINES.append(line)
        print(line)
    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
