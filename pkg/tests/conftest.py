import numpy as np
import pytest

import _util

CRITERIA = {
    1: "gradient suite",
    2: "attention oracle",
    3: "likelihood normalization",
    4: "coder losslessness",
    5: "serialization invariant",
    6: "context causality",
    7: "toy RD frontier",
    8: "ablation ordering",
    9: "determinism",
}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not _util.ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n, name in CRITERIA.items():
        if n in _util.ACCEPTANCE:
            ok, detail = _util.ACCEPTANCE[n]
            terminalreporter.write_line(f"criterion {n} ({name}): {'PASS' if ok else 'FAIL'} - {detail}")
        else:
            terminalreporter.write_line(f"criterion {n} ({name}): NOT RUN")
