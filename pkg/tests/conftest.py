import contextlib

import pytest

_LINES = []


@pytest.fixture
def criterion():
    """``with criterion(n, text) as notes:`` records one PASS/FAIL line for the summary.

    Strings appended to ``notes`` (measured values) are added to the line.
    """

    @contextlib.contextmanager
    def record(number, text):
        notes = []
        try:
            yield notes
        except BaseException as exc:
            first = str(exc).splitlines()[0] if str(exc) else ""
            notes.append(f"{type(exc).__name__}: {first}")
            _LINES.append((number, f"FAIL criterion {number}: {text} [{'; '.join(notes)}]"))
            raise
        tail = f" [{'; '.join(notes)}]" if notes else ""
        _LINES.append((number, f"PASS criterion {number}: {text}{tail}"))

    return record


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_LINES):
        terminalreporter.write_line(line)
