import numpy as np
import pytest

from smartflow import diffcore as dc


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(autouse=True)
def _reset_checked_mode():
    yield
    dc.set_checked(False)


# acceptance criteria report: one line per criterion at the end of the run
_CRITERIA: dict[int, tuple[str, bool, str]] = {}


class _Criterion:
    def __init__(self, number: int, title: str):
        self.number, self.title, self.detail = number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        ok = exc_type is None
        detail = self.detail if ok else f"{self.detail} {exc_type.__name__}: {exc}".strip()
        _CRITERIA[self.number] = (self.title, ok, detail.splitlines()[0] if detail else "")
        return False


@pytest.fixture
def criterion():
    """``with criterion(n, title) as c:`` records PASS unless the block raises."""
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}  {detail}")


def pytest_configure(config):
    config.addinivalue_line("markers", "desk: desk-scale training runs (tens of minutes each)")
