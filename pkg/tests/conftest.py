import pytest

_VERDICTS: dict[int, tuple[bool, str]] = {}


class CriterionReport:
    """Collects one verdict per acceptance criterion for the end-of-run summary."""

    def record(self, number: int, ok: bool, detail: str) -> bool:
        _VERDICTS[number] = (bool(ok), detail)
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        return bool(ok)


@pytest.fixture(scope="session")
def criteria():
    return CriterionReport()


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_VERDICTS):
        ok, detail = _VERDICTS[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
