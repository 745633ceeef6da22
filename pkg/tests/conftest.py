"""Collects one verdict line per acceptance criterion and prints them at the end."""

VERDICTS: dict[int, str] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    VERDICTS[criterion] = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(VERDICTS):
        terminalreporter.write_line(VERDICTS[k])
