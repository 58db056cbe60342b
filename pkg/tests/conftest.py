import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_CRITERIA: list[tuple[int, str]] = []


@pytest.fixture
def record_criterion():
    """Log one status line for an acceptance criterion; echoed in the terminal summary."""

    def record(number: int, title: str, status: bool | str, detail: str) -> None:
        label = status if isinstance(status, str) else ("PASS" if status else "FAIL")
        line = f"[{label}] criterion {number} {title}: {detail}"
        _CRITERIA.append((number, line))
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_CRITERIA, key=lambda item: item[0]):
            terminalreporter.write_line(line)
