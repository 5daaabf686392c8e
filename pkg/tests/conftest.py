"""Collects acceptance verdicts and prints them at the end of the run."""

ACCEPTANCE: list[tuple[str, bool, str]] = []


def record(name: str, passed: bool, detail: str) -> bool:
    line = f"ACCEPTANCE {'PASS' if passed else 'FAIL'} {name}: {detail}"
    print(line)
    ACCEPTANCE.append((name, passed, detail))
    return passed


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
