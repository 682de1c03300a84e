"""Shared pytest plumbing.

Acceptance tests record one summary line per criterion; the lines are
printed in a dedicated section at the end of the run so the tee'd output
always carries an explicit verdict for every criterion.
"""

_criterion_lines: dict[int, str] = {}


def record_criterion(n: int, status: str, detail: str) -> None:
    _criterion_lines[n] = f"CRITERION {n:2d}: {status} ({detail})"


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _criterion_lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_criterion_lines):
        terminalreporter.write_line(_criterion_lines[n])
