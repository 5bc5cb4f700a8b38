"""Collects acceptance verdicts and prints them after the run."""

import contextlib
import time

import pytest

_VERDICTS = []


@pytest.fixture
def criterion():
    @contextlib.contextmanager
    def run(number: int, title: str, budget_s: float):
        t0 = time.perf_counter()
        ok = False
        detail = ""
        try:
            yield
            elapsed = time.perf_counter() - t0
            ok = elapsed < budget_s
            detail = f"{elapsed:.2f} s of {budget_s:g} s"
            assert ok, f"criterion {number} took {elapsed:.2f} s, budget {budget_s:g} s"
        except BaseException as e:
            if not detail:
                detail = f"{type(e).__name__}: {str(e).splitlines()[0] if str(e) else ''}"
            raise
        finally:
            line = f"{'PASS' if ok else 'FAIL'} criterion {number:>2}: {title} ({detail})"
            _VERDICTS.append((number, line))
            print(line)

    return run


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_VERDICTS):
        terminalreporter.write_line(line)
