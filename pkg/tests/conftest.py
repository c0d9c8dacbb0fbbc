import contextlib
import time

import pytest

_CRITERIA = {}


class _Outcome:
    def __init__(self):
        self.detail = ""


@pytest.fixture
def criterion():
    """``with criterion(n, title) as c:`` records one pass/fail line for the run summary."""

    @contextlib.contextmanager
    def record(number, title):
        out, t0 = _Outcome(), time.perf_counter()
        try:
            yield out
        except BaseException:
            _CRITERIA[number] = ("FAIL", title, out.detail, time.perf_counter() - t0)
            raise
        _CRITERIA[number] = ("PASS", title, out.detail, time.perf_counter() - t0)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, title, detail, secs = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {status}  {title}  [{detail}] ({secs:.1f}s)")
