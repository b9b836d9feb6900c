import pytest

OUTCOMES = pytest.StashKey[dict]()
NOTES = pytest.StashKey[dict]()


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion checked by this test")
    config.stash[OUTCOMES] = {}
    config.stash[NOTES] = {}


@pytest.fixture
def note(request):
    """Attach a one-line measurement to the criterion of the running test."""
    marker = request.node.get_closest_marker("criterion")

    def add(text):
        request.config.stash[NOTES].setdefault(marker.args[0], []).append(text)

    return add


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    report = yield
    marker = item.get_closest_marker("criterion")
    if marker and (report.when == "call" or report.failed):
        outcomes = item.config.stash[OUTCOMES]
        n = marker.args[0]
        outcomes[n] = outcomes.get(n, True) and report.passed
    return report


def pytest_terminal_summary(terminalreporter, config):
    outcomes = config.stash[OUTCOMES]
    if not outcomes:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(outcomes):
        notes = "; ".join(config.stash[NOTES].get(n, []))
        status = "PASS" if outcomes[n] else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status}" + (f" ({notes})" if notes else ""))
