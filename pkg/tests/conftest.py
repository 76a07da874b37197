import pytest

# criterion number -> (passed, detail); filled by tests/test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool | None, str]] = {}


@pytest.fixture
def criterion():
    def record(number: int, passed: bool | None, detail: str):
        ACCEPTANCE[number] = (passed, detail)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        tag = "N/A " if passed is None else ("PASS" if passed else "FAIL")
        terminalreporter.write_line(f"criterion {n:2d}: {tag}  {detail}")
