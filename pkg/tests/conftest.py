import numpy as np
import pytest

from csmixer import _kernels

# acceptance results collected by tests/test_acceptance.py, printed after the run
ACCEPTANCE: dict[str, tuple[str, str]] = {}


def record(key: str, ok: bool | None, detail: str) -> None:
    status = "SKIP" if ok is None else ("PASS" if ok else "FAIL")
    ACCEPTANCE[key] = (status, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE, key=lambda k: (int(k.split()[0].rstrip("ab")), k)):
        status, detail = ACCEPTANCE[key]
        terminalreporter.write_line(f"{status} {key}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["numpy", "numba"] if _kernels.numba_impl is not None else ["numpy"])
def backend(request):
    prev = _kernels.active
    _kernels.use(request.param)
    yield request.param
    _kernels.active = prev
