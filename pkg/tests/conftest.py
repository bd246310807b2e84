"""Collects acceptance outcomes and prints one line per criterion at the end of the run."""
from collections import defaultdict

RESULTS = defaultdict(list)  # criterion number -> [(title, passed, detail)]


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    # setup errors count against the criterion; a clean setup is recorded by the call phase
    if call.when == "setup" and call.excinfo is None or call.when == "teardown":
        return
    number, title = marker.args
    detail = "; ".join(str(v) for k, v in item.user_properties if k == "detail")
    if call.when == "setup":
        detail = f"setup error: {call.excinfo.typename}"
    RESULTS[number].append((title, call.excinfo is None, detail))


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for number in sorted(RESULTS):
        parts = RESULTS[number]
        ok = all(p for _, p, _ in parts)
        title = parts[0][0]
        detail = " | ".join(d for _, _, d in parts if d)
        tr.write_line(f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}" + (f" -- {detail}" if detail else ""))
