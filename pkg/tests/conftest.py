from acceptance_log import RESULTS, verdict_line


def pytest_terminal_summary(terminalreporter):
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        terminalreporter.write_line(verdict_line(number, *RESULTS[number]))
