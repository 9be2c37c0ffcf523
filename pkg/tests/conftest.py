import os
from pathlib import Path

import pytest


def mnist_dir() -> Path | None:
    """MNIST location: $PEC_DATA_DIR/mnist, then ~/data/mnist."""
    candidates = []
    if os.environ.get("PEC_DATA_DIR"):
        candidates.append(Path(os.environ["PEC_DATA_DIR"]) / "mnist")
    candidates.append(Path.home() / "data" / "mnist")
    for c in candidates:
        if (c / "train-images-idx3-ubyte").exists() or (c / "train-images-idx3-ubyte.gz").exists():
            return c
    return None


@pytest.fixture(scope="session")
def mnist():
    d = mnist_dir()
    if d is None:
        pytest.skip("MNIST IDX files not found (set PEC_DATA_DIR)")
    from pec_cil import data

    return data.load_mnist(d)


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one PASS/FAIL line for an acceptance criterion; printed in the summary."""

    def record(number, ok: bool, detail: str, status: str | None = None):
        line = f"criterion {number:>2}: {status or ('PASS' if ok else 'FAIL')}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
