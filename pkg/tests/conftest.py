import pytest

_RESULTS = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[_RESULTS] = {}


@pytest.fixture
def record(request):
    """Store one pass/fail line per acceptance criterion for the terminal summary."""
    results = request.config.stash[_RESULTS]

    def _record(number: int, name: str, passed: bool, detail: str) -> bool:
        results[number] = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {name}: {detail}"
        print(results[number])
        return passed

    return _record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash[_RESULTS]
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
