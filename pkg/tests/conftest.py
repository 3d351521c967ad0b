import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

# criterion number -> (title, outcome, detail)
_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion check")


@pytest.fixture
def detail(request):
    """Attach a measured-value note to the criterion line of this test."""
    notes = []
    request.node.criterion_notes = notes
    return notes.append


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    n, title = mark.args
    if hasattr(rep, "wasxfail"):
        return
    ok = rep.passed
    notes = "; ".join(getattr(item, "criterion_notes", []))
    prev = _CRITERIA.get(n)
    if prev is not None:
        ok = ok and prev[1]
        notes = "; ".join(x for x in (prev[2], notes) if x)
    _CRITERIA[n] = (title, ok, notes)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok, notes = _CRITERIA[n]
        line = f"criterion {n} {'PASS' if ok else 'FAIL'} {title}"
        terminalreporter.write_line(line + (f" ({notes})" if notes else ""))
