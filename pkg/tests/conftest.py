import pytest

# (criterion number, passed, detail) appended by test_acceptance.py
ACCEPTANCE: list[tuple[int, bool, str]] = []


@pytest.fixture
def report():
    def _report(number: int, passed: bool, detail: str) -> None:
        ACCEPTANCE.append((number, passed, detail))
        print(f"\nCRITERION {number}: {'PASS' if passed else 'FAIL'} | {detail}")

    return _report


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"CRITERION {number}: {'PASS' if passed else 'FAIL'} | {detail}")
