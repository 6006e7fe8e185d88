"""Shared test plumbing: the acceptance verdict registry.

test_acceptance.py records one [PASS]/[FAIL] line per criterion here so the
verdicts are printed as a block at the end of the run regardless of output
capturing.
"""

ACCEPTANCE_VERDICTS: list[str] = []


def record_verdict(line: str) -> None:
    ACCEPTANCE_VERDICTS.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_VERDICTS:
        terminalreporter.write_line(line)
