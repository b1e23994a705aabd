import pytest

_ACCEPTANCE: list[str] = []


@pytest.fixture(scope="session")
def acceptance():
    """Append ``PASS``/``FAIL`` lines that are echoed in the terminal summary."""
    return _ACCEPTANCE


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)
