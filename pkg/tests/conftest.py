"""Roll test outcomes up into one PASS/FAIL line per acceptance criterion."""
from collections import defaultdict

CRITERIA = range(1, 10)

_criteria = {}  # nodeid -> criterion numbers
_outcomes = defaultdict(list)  # criterion -> [(nodeid, passed)]
_details = defaultdict(list)


def pytest_collection_modifyitems(items):
    for item in items:
        nums = [int(m.args[0]) for m in item.iter_markers("criterion")]
        if nums:
            _criteria[item.nodeid] = nums


def pytest_runtest_logreport(report):
    nums = _criteria.get(report.nodeid)
    if not nums:
        return
    # a failure in any phase fails the test; the call phase records the pass
    if report.failed or (report.when == "call" and report.passed):
        for n in nums:
            _outcomes[n].append((report.nodeid, report.passed))
    if report.when == "call":
        for n in nums:
            _details[n] += [v for k, v in report.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in CRITERIA:
        runs = _outcomes.get(n)
        if not runs:
            tr.write_line(f"criterion {n}: NOT RUN")
            continue
        failed = [nid for nid, ok in runs if not ok]
        status = "FAIL" if failed else "PASS"
        tests = len({nid for nid, _ in runs})
        line = f"criterion {n}: {status} ({tests} test{'s' * (tests != 1)})"
        if _details[n]:
            line += "  " + "; ".join(_details[n])
        tr.write_line(line)
        for nid in failed:
            tr.write_line(f"    failed: {nid}")
