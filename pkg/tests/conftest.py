"""Shared test plumbing: the acceptance suite registers one line per
criterion here so the run always ends with an explicit pass/fail list,
whether or not stdout capture is on."""

ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
