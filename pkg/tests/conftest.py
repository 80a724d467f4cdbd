"""Collects one verdict line per acceptance criterion and prints them after the run."""

VERDICTS = []


def record(number: int, ok: bool, detail: str):
    VERDICTS.append((number, ok, detail))
    return ok


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(VERDICTS):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {number}: {detail}")
