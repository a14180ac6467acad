import pytest

_AC_LINES: dict[str, str] = {}


@pytest.fixture
def report():
    """Record one pass/fail line for an acceptance criterion."""

    def _report(criterion: str, passed: bool, detail: str) -> None:
        line = f"{criterion} {'PASS' if passed else 'FAIL'}: {detail}"
        _AC_LINES[criterion] = line
        print(line)

    return _report


def pytest_terminal_summary(terminalreporter):
    if not _AC_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_AC_LINES, key=lambda k: int(k.split("-")[1])):
        terminalreporter.write_line(_AC_LINES[key])
