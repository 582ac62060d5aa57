import pytest

CRITERIA = []


@pytest.fixture
def criterion(request):
    """Record and print one acceptance line; fails the test when ``ok`` is false."""

    def report(label: str, ok: bool, detail: str = ""):
        line = f"{label}: {'PASS' if ok else 'FAIL'}  {detail}".rstrip()
        CRITERIA.append(line)
        print(line)
        assert ok, line

    return report


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in CRITERIA:
            terminalreporter.write_line(line)
