import numpy as np
import pytest

# filled by tests/test_acceptance.py: criterion id -> (passed, detail)
ACCEPTANCE = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[cid]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {cid:>2}: {detail}")


@pytest.fixture
def gen():
    return np.random.default_rng(12345)
