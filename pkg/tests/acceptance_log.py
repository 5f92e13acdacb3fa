"""Collects one verdict line per acceptance criterion for the terminal summary."""

LINES: list[str] = []
DETAILS: list[str] = []


def record(number: int, passed: bool, text: str) -> str:
    line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {text}"
    LINES.append(line)
    print(line)
    return line


def detail(text: str) -> None:
    DETAILS.append(text)
    print(text)
