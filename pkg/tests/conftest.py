import contextlib

import pytest

_RESULTS = []


@pytest.fixture
def criterion():
    """Context manager recording one PASS/FAIL line for an acceptance criterion."""

    @contextlib.contextmanager
    def run(label):
        notes = []
        try:
            yield notes.append
        except BaseException:
            _RESULTS.append(("FAIL", label, "; ".join(notes)))
            raise
        _RESULTS.append(("PASS", label, "; ".join(notes)))
        print(f"PASS {label}: {'; '.join(notes)}")

    return run


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for status, label, detail in _RESULTS:
        terminalreporter.write_line(f"{status} {label}" + (f" | {detail}" if detail else ""))
