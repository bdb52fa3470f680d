import pytest

_ACCEPTANCE: dict = {}


@pytest.fixture
def record_criterion():
    """Store a one-line verdict for the acceptance summary."""
    def record(number: int, title: str, ok: bool, detail: str):
        _ACCEPTANCE[number] = (title, bool(ok), detail)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        title, ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail}")
