import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_criterion_lines = []


def record_criterion(number: int, passed: bool, detail: str):
    """Collect one acceptance line; printed in the terminal summary."""
    status = "PASS" if passed else "FAIL"
    _criterion_lines.append(f"criterion {number:2d} [{status}] {detail}")


def pytest_terminal_summary(terminalreporter):
    if _criterion_lines:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in sorted(_criterion_lines):
            terminalreporter.write_line(line)
