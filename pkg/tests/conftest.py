"""Shared pytest hooks.

The acceptance tests record one summary line each; printing them from a
terminal-summary hook makes the PASS/FAIL table visible even when all
tests succeed and stdout capture swallows in-test prints.
"""

acceptance_lines: list = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not acceptance_lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance_lines:
        terminalreporter.write_line(line)
