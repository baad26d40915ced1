"""Shared pytest plumbing: collects acceptance-criterion verdict lines and
prints them in the terminal summary."""

ACCEPTANCE_LINES = []


def record_criterion(name, passed, detail=""):
    verdict = "PASS" if passed else "FAIL"
    line = f"{name}: {verdict}" + (f" ({detail})" if detail else "")
    ACCEPTANCE_LINES.append(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
