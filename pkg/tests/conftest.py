import pytest

from fedload.dataset import generate_synthetic, prepare_clients

_criteria: dict[int, dict] = {}
_item_criteria: dict[str, int] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


def pytest_collection_modifyitems(items):
    for item in items:
        m = item.get_closest_marker("criterion")
        if m is not None:
            num, title = m.args
            _criteria.setdefault(num, {"title": title, "outcomes": []})
            _item_criteria[item.nodeid] = num


def pytest_runtest_logreport(report):
    num = _item_criteria.get(report.nodeid)
    if num is None:
        return
    # count the call phase, and setup errors that stop the call from running
    if report.when == "call" or (report.when == "setup" and not report.passed):
        _criteria[num]["outcomes"].append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_criteria):
        entry = _criteria[num]
        outs = entry["outcomes"]
        if not outs:
            status = "NOT RUN"
        elif all(o == "passed" for o in outs):
            status = "PASS"
        else:
            status = "FAIL"
        terminalreporter.write_line(f"criterion {num:2d}: {status:7s} {entry['title']}")


@pytest.fixture(scope="session")
def small_data():
    readings, weather = generate_synthetic(4, 8, seed=11)
    return readings, weather


@pytest.fixture(scope="session")
def small_clients(small_data):
    readings, weather = small_data
    return prepare_clients(readings, weather, window=12, horizon=1)
