"""Collects acceptance-criterion outcomes and prints one line per criterion."""
import re

_CRITERIA = {}


def pytest_runtest_logreport(report):
    if "acceptance" not in report.keywords:
        return
    match = re.search(r"test_criterion_(\d+)", report.nodeid)
    if not match:
        return
    if report.when == "call" or (report.when == "setup" and report.failed):
        props = dict(report.user_properties)
        _CRITERIA[int(match.group(1))] = (report.passed, props, report.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        passed, props, duration = _CRITERIA[num]
        status = "PASS" if passed else "FAIL"
        limit = props.get("limit_s")
        budget = f" / limit {limit:g} s" if limit else ""
        detail = props.get("detail", "")
        terminalreporter.write_line(
            f"criterion {num}: {status}  ({props.get('elapsed_s', duration):.1f} s{budget})  {detail}")
