import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

CRITERIA = {
    1: "average precision equals brute-force oracle, 1,000 lists, < 1 s",
    2: "IoU equals pixel-count oracle within 1e-12, 10,000 boxes, < 5 s",
    3: "detection FROC hand case exact and monotone on 500 fixtures",
    4: "perfect pipeline gives map 1.0 and std 0, < 10 s",
    5: "half-jittered detections give rate 0.5 +- 0.05 at max fppi",
    6: "holdout split deterministic, 10% in [800, 1200]; exclusion disjoint",
    7: "dataset, embedding, detection and index files round-trip byte-identically",
    8: "10,000-entry index plus 320 queries in < 60 s",
    9: "Logos in the Wild v2.0 stats 871 / 11,054 / 32,850 (optional, data-dependent)",
}

_outcomes: dict[int, list[str]] = {}
_notes: dict[int, list[str]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number): test belongs to a numbered acceptance criterion")


def _criterion(item):
    marker = item.get_closest_marker("acceptance")
    return marker.args[0] if marker else None


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    report = (yield).get_result()
    number = _criterion(item)
    if number is None:
        return
    if report.when == "call" or report.outcome != "passed":
        _outcomes.setdefault(number, []).append(report.outcome)


@pytest.fixture
def note(request):
    """Attach a short measurement to the criterion's summary line."""
    number = _criterion(request.node)
    return lambda text: _notes.setdefault(number, []).append(text)


def _verdict(outcomes):
    if not outcomes:
        return "NOT RUN"
    if "failed" in outcomes:
        return "FAIL"
    if all(o == "skipped" for o in outcomes):
        return "SKIP"
    return "PASS"


def pytest_terminal_summary(terminalreporter):
    if not _outcomes:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for number, title in CRITERIA.items():
        line = f"[{_verdict(_outcomes.get(number, [])):7}] {number}. {title}"
        if _notes.get(number):
            line += f"  ({'; '.join(_notes[number])})"
        terminalreporter.write_line(line)
