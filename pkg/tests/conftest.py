import pytest

CRITERIA = {}


@pytest.fixture(scope="session")
def verdict():
    """Record ``(ok, detail)`` for an acceptance criterion; summarized at the end of the run."""

    def record(number, title, ok, detail):
        CRITERIA[number] = (title, bool(ok), detail)
        print(f"criterion {number:>2} {'PASS' if ok else 'FAIL'}: {title}: {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        title, ok, detail = CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2} {'PASS' if ok else 'FAIL'}: {title}: {detail}")
