import contextlib
import time

import pytest

_RESULTS = {}


class _Outcome:
    def __init__(self):
        self.detail = ""


@pytest.fixture
def criterion():
    """Record a PASS/FAIL line for one acceptance criterion; failures still raise."""

    @contextlib.contextmanager
    def record(number, title):
        out = _Outcome()
        t0 = time.perf_counter()
        try:
            yield out
        except BaseException as exc:
            _RESULTS[number] = (title, "FAIL", f"{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}",
                                time.perf_counter() - t0)
            raise
        _RESULTS[number] = (title, "PASS", out.detail, time.perf_counter() - t0)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, status, detail, secs = _RESULTS[number]
        terminalreporter.write_line(f"criterion {number} {status}: {title} ({secs:.1f}s) {detail}")
