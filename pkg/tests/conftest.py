"""Shared pytest hooks.

The acceptance tests report one PASS/FAIL line per criterion; stdout capture
would hide the lines for passing tests, so they are replayed uncaptured in a
terminal summary section at the end of the run.
"""

acceptance_lines = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not acceptance_lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in acceptance_lines:
        terminalreporter.write_line(line)
