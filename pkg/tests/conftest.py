import pytest


def pytest_configure(config):
    config.acceptance_verdicts = []


@pytest.fixture(scope="session")
def verdicts(pytestconfig):
    return pytestconfig.acceptance_verdicts


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "acceptance_verdicts", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
