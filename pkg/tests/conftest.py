"""Shared pytest wiring: a per-criterion verdict table for the acceptance run."""

import re

_CRITERION = re.compile(r"test_criterion_(\d+)")


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    verdicts: dict[int, str] = {}
    for status, label in (("passed", "PASS"), ("failed", "FAIL"), ("error", "FAIL")):
        for report in terminalreporter.stats.get(status, []):
            nodeid = getattr(report, "nodeid", "")
            if "test_acceptance" not in nodeid:
                continue
            match = _CRITERION.search(nodeid)
            if not match:
                continue
            number = int(match.group(1))
            if label == "FAIL" or number not in verdicts:
                verdicts[number] = label
    if verdicts:
        terminalreporter.write_sep("-", "acceptance criteria")
        for number in sorted(verdicts):
            terminalreporter.write_line(f"criterion {number}: {verdicts[number]}")
