"""Collects one verdict line per acceptance criterion and prints them at the end of the run."""
from __future__ import annotations

VERDICTS: list[str] = []


def record_verdict(name: str, passed: bool, detail: str = "") -> None:
    VERDICTS.append(f"{'PASS' if passed else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in VERDICTS:
        terminalreporter.write_line(line)
