import pytest

_CRITERIA: list[tuple[str, bool, str]] = []


class CriterionLog:
    def record(self, name: str, ok: bool, detail: str) -> None:
        line = f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}"
        print(line)
        _CRITERIA.append((name, ok, line))


@pytest.fixture
def criterion():
    return CriterionLog()


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for _, _, line in sorted(_CRITERIA):
        terminalreporter.write_line(line)
