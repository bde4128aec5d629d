import contextlib
import time

import pytest

_LINES = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Context manager that records one PASS/FAIL line per acceptance criterion."""
    lines = request.config.stash.setdefault(_LINES, [])

    @contextlib.contextmanager
    def criterion(number: int, title: str):
        notes: list[str] = []
        t0 = time.perf_counter()
        try:
            yield notes.append
        except BaseException as exc:
            detail = str(exc).splitlines()[0] if str(exc) else type(exc).__name__
            line = f"criterion {number:2d} FAIL  {title}: {detail}"
            lines.append(line)
            print(line)
            raise
        notes.append(f"{time.perf_counter() - t0:.1f} s")
        line = f"criterion {number:2d} PASS  {title}: {'; '.join(notes)}"
        lines.append(line)
        print(line)

    return criterion


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
