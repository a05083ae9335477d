import pytest

_verdicts = {}


@pytest.fixture
def criterion():
    """Record and assert one acceptance criterion; the verdicts are listed at the end of the run."""

    def record(number: int, ok: bool, detail: str):
        _verdicts[number] = (bool(ok), detail)
        print(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_verdicts):
        ok, detail = _verdicts[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
