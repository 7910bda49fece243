import pytest

_ACCEPTANCE = []


@pytest.fixture
def acceptance():
    """Record one summary line per acceptance criterion."""

    def record(number, name, passed, detail):
        line = f"AC{number:<2} {'PASS' if passed else 'FAIL'}  {name}: {detail}"
        _ACCEPTANCE.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)
