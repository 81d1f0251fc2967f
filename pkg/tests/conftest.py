"""Shared test plumbing: the acceptance-criteria summary recorder.

Acceptance tests record one line per criterion; the lines are printed
after the test summary (so they survive pytest's output capture) and
written to tests/artifacts/acceptance_report.txt.
"""

import os

import pytest

_LINES = []
_ARTIFACTS = os.path.join(os.path.dirname(__file__), "artifacts")


def artifacts_dir() -> str:
    os.makedirs(_ARTIFACTS, exist_ok=True)
    return _ARTIFACTS


@pytest.fixture(scope="session")
def acceptance():
    """record(criterion, passed, detail, soft=False) -> None"""

    def record(criterion: int, passed: bool, detail: str,
               soft: bool = False) -> None:
        word = "PASS" if passed else ("FAIL (soft, not gating)" if soft
                                      else "FAIL")
        _LINES.append(f"criterion {criterion:2d}: {word}  {detail}")

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _LINES:
        return
    lines = sorted(_LINES)
    terminalreporter.write_sep("=", "acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
    with open(os.path.join(artifacts_dir(), "acceptance_report.txt"),
              "w") as fh:
        fh.write("\n".join(lines) + "\n")
