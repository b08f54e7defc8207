import pytest

_RESULTS = pytest.StashKey[dict]()


@pytest.fixture(scope="session")
def criterion(request):
    """Record one acceptance verdict: ``criterion(number, passed, detail)``."""
    results = request.config.stash.setdefault(_RESULTS, {})

    def record(number, passed, detail):
        results[number] = (bool(passed), detail)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_RESULTS, {})
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number in sorted(results):
        passed, detail = results[number]
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  criterion {number:>2d}: {detail}")
