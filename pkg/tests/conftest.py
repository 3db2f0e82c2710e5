# The acceptance tests register one verdict line per criterion. Replaying
# them in the terminal summary keeps them visible under a plain `pytest`
# run, where per-test stdout is captured.

CRITERION_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if not CRITERION_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in CRITERION_LINES:
        terminalreporter.write_line(line)
