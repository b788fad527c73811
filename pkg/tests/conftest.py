import pytest

CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record():
    """``record(n, ok, detail)`` stores the verdict for acceptance criterion ``n``."""

    def _record(n: int, ok: bool, detail: str) -> bool:
        CRITERIA[n] = (bool(ok), detail)
        return bool(ok)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
