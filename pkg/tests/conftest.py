import pytest

_RESULTS = []


class _Recorder:
    def __call__(self, criterion: str, passed: bool, detail: str = "") -> bool:
        _RESULTS.append((criterion, bool(passed), detail))
        return bool(passed)


@pytest.fixture
def record():
    """Record one acceptance criterion outcome; printed in the terminal summary."""
    return _Recorder()


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion, passed, detail in _RESULTS:
        line = f"{'PASS' if passed else 'FAIL'}  {criterion}"
        if detail:
            line += f"  ({detail})"
        terminalreporter.write_line(line)
