"""Collects one PASS/FAIL line per acceptance criterion and prints them at the end."""

ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in ACCEPTANCE:
        terminalreporter.write_line(line)
