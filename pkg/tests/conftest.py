"""Shared pytest wiring.

After a run that exercised the end-to-end suite, echo its one-line
verdicts in the terminal summary so they are visible even when output
capture is on.
"""

import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "CRITERION_LINES", None) if mod is not None else None
    if lines:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
