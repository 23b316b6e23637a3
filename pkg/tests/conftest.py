import pytest

_CRITERIA: dict[int, dict] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion number and title")


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when not in ("setup", "call"):
        return
    n, title = marker.args
    entry = _CRITERIA.setdefault(n, {"title": title, "failed": False, "ran": False, "details": []})
    if call.excinfo is not None and not call.excinfo.errisinstance(pytest.skip.Exception):
        entry["failed"] = True
    if call.when == "call":
        entry["ran"] = True
        entry["details"] += [v for k, v in item.user_properties if k == "detail"]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        entry = _CRITERIA[n]
        status = "FAIL" if entry["failed"] or not entry["ran"] else "PASS"
        line = f"criterion {n}: {status}  {entry['title']}"
        if entry["details"]:
            line += "  [" + " | ".join(entry["details"]) + "]"
        terminalreporter.write_line(line)
