import pytest

_CRITERIA: dict[int, tuple[str, bool, str]] = {}


@pytest.fixture
def record():
    """Store ``(number, name, passed, detail)`` for the acceptance summary."""

    def _record(number: int, name: str, passed: bool, detail: str = "") -> bool:
        _CRITERIA[number] = (name, bool(passed), detail)
        return bool(passed)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        name, passed, detail = _CRITERIA[number]
        tag = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"[{tag}] criterion {number} {name}: {detail}")
