from pathlib import Path

import numpy as np
import pytest

from idcf.data import RatingDataset

ROOT = Path(__file__).resolve().parents[1]
ML100K = ROOT / "data" / "ml-100k" / "u.data"
CONFIGS = ROOT / "configs"

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def toy_ds():
    rng = np.random.default_rng(3)
    M, N = 10, 8
    mask = rng.random((M, N)) < 0.5
    mask[np.arange(M), np.arange(M) % N] = True
    u, i = np.nonzero(mask)
    vals = rng.integers(1, 6, size=len(u)).astype(float)
    return RatingDataset(M, N, u, i, vals, "explicit", None, np.arange(M), np.arange(N))


needs_ml100k = pytest.mark.skipif(not ML100K.exists(), reason="run scripts/fetch_ml100k.py first")
