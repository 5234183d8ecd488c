import pytest

# (criterion number, title, passed, detail) rows collected by the acceptance suite
ACCEPTANCE_LINES: list[tuple[int, str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, ok, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"criterion {num:>2} {'PASS' if ok else 'FAIL'}  {title}: {detail}")


@pytest.fixture
def criterion():
    """Record and print one pass/fail line, then assert."""

    def record(num: int, title: str, ok: bool, detail: str = ""):
        ACCEPTANCE_LINES.append((num, title, bool(ok), detail))
        print(f"criterion {num} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
        assert ok, f"criterion {num} ({title}) failed: {detail}"

    return record
