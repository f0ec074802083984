"""Shared pytest wiring: echo acceptance verdict lines after the run.

Stdout from passing tests is captured and discarded, so the acceptance
tests also register their one-line verdicts here; the terminal-summary
hook prints the block where it is always visible.
"""

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("-", "acceptance")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
