import pytest

ACCEPTANCE: dict[str, tuple[bool, str]] = {}


@pytest.fixture
def verdict(request):
    """Record a one-line PASS/FAIL for an acceptance criterion, then assert it."""
    def record(ac: str, ok: bool, detail: str):
        ACCEPTANCE[ac] = (bool(ok), detail)
        line = f"{ac} {'PASS' if ok else 'FAIL'} {detail}"
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for ac in sorted(ACCEPTANCE, key=lambda k: int(k[2:])):
        ok, detail = ACCEPTANCE[ac]
        terminalreporter.write_line(f"{ac} {'PASS' if ok else 'FAIL'} {detail}")
