import pytest

_CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Record a pass/fail line for an acceptance criterion: ``criterion(n, ok, detail)``."""
    store = request.config.stash.setdefault(_CRITERIA, {})

    def record(number: int, ok: bool, detail: str) -> None:
        store[number] = (bool(ok), detail)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_CRITERIA, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(store):
        ok, detail = store[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}")
