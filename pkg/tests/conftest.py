import pytest

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def record():
    """Append a one-line PASS/FAIL verdict to the acceptance summary."""

    def _record(name: str, ok: bool, detail: str) -> bool:
        ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        print(ACCEPTANCE_LINES[-1])
        return ok

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
