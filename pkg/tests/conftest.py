import time
from contextlib import contextmanager

# (criterion, passed, detail) rows filled in by test_acceptance.py
ACCEPTANCE: list[tuple[str, bool, str]] = []


@contextmanager
def criterion(name: str):
    """Record a pass/fail line for ``name``; the body may add ``detail['msg']``."""
    detail: dict[str, str] = {}
    start = time.perf_counter()
    try:
        yield detail
    except BaseException as exc:
        first = (str(exc).strip().splitlines() or [type(exc).__name__])[0]
        ACCEPTANCE.append((name, False, f"{first[:160]} ({time.perf_counter() - start:.1f}s)"))
        raise
    ACCEPTANCE.append((name, True, f"{detail.get('msg', '')} ({time.perf_counter() - start:.1f}s)".strip()))


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
