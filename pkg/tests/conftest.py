import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one summary line per acceptance criterion, printed after the run
_criteria = {}


def pytest_collection_modifyitems(items):
    for item in items:
        mark = item.get_closest_marker("criterion")
        if mark is not None:
            num, title = mark.args
            entry = _criteria.setdefault(num, {"title": title, "nodes": {}, "notes": []})
            entry["nodes"][item.nodeid] = None


def pytest_runtest_logreport(report):
    for entry in _criteria.values():
        if report.nodeid in entry["nodes"]:
            if report.failed or (report.when == "call" and report.skipped):
                entry["nodes"][report.nodeid] = "FAIL" if report.failed else "SKIP"
            elif report.when == "call" and entry["nodes"][report.nodeid] is None:
                entry["nodes"][report.nodeid] = "PASS"
            entry["notes"] += [v for k, v in report.user_properties
                               if k == "note" and report.when == "call"]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_criteria):
        entry = _criteria[num]
        states = set(entry["nodes"].values())
        status = "PASS" if states == {"PASS"} else ("NOT RUN" if states <= {None} else "FAIL")
        terminalreporter.write_line(f"criterion {num:2d}: {status:7s} {entry['title']}")
        for note in entry["notes"]:
            terminalreporter.write_line(f"               {note}")


@pytest.fixture
def note(request):
    """Attach a measured value to the acceptance summary line."""
    return lambda text: request.node.user_properties.append(("note", text))
