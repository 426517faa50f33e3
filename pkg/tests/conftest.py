"""Shared pytest wiring: prints one PASS/FAIL line per package-level
acceptance criterion after the run, so the gate is readable without
scanning the full test listing."""

import re

_CRITERION = re.compile(r"test_acceptance\.py::test_criterion_(\d+)")


def pytest_terminal_summary(terminalreporter):
    verdicts = {}
    for status, label in (("passed", "PASS"), ("failed", "FAIL"),
                          ("error", "FAIL")):
        for rep in terminalreporter.stats.get(status, []):
            m = _CRITERION.search(getattr(rep, "nodeid", ""))
            if m:
                verdicts[int(m.group(1))] = label
    if not verdicts:
        return
    terminalreporter.write_sep("-", "acceptance criteria")
    for n in sorted(verdicts):
        terminalreporter.write_line(f"criterion {n}: {verdicts[n]}")
