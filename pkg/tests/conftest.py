"""Collects acceptance verdicts and echoes them in the terminal summary, so
the PASS/FAIL lines show up even when test output is captured."""

VERDICTS: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
