import time

import pytest

RESULTS: list[str] = []


class Criterion:
    """Records one acceptance criterion's outcome and echoes it live."""

    def __init__(self, capsys):
        self.capsys = capsys

    def __call__(self, number: int, title: str, checks: dict, elapsed: float, limit: float):
        checks = {**checks, f"runtime {elapsed:.1f}s < {limit:g}s": elapsed < limit}
        ok = all(checks.values())
        failed = [k for k, v in checks.items() if not v]
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}"
        if failed:
            line += "  failed: " + "; ".join(failed)
        else:
            line += f"  ({elapsed:.1f}s)"
        RESULTS.append(line)
        with self.capsys.disabled():
            print("\n" + line)
            for k, v in checks.items():
                print(f"    [{'ok' if v else 'XX'}] {k}")
        assert ok, line


@pytest.fixture
def criterion(capsys):
    return Criterion(capsys)


@pytest.fixture
def clock():
    start = time.perf_counter()
    return lambda: time.perf_counter() - start


def pytest_terminal_summary(terminalreporter):
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS):
            terminalreporter.write_line(line)
