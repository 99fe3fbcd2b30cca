import pytest

_RESULTS: dict = {}


@pytest.fixture
def criterion():
    """``criterion(k, passed, detail)`` records one acceptance outcome for the summary."""

    def record(k, passed, detail=""):
        prev = _RESULTS.get(k)
        ok, text = bool(passed), detail
        if prev is not None:
            ok = ok and prev[0]
            text = f"{prev[1]}; {detail}" if prev[1] else detail
        _RESULTS[k] = (ok, text)
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(_RESULTS):
        ok, detail = _RESULTS[k]
        terminalreporter.write_line(f"criterion {k:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
