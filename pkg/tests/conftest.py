import sys


def pytest_terminal_summary(terminalreporter):
    """Echo the acceptance-criterion PASS/FAIL lines, which fd-level capture
    would otherwise swallow."""
    mod = sys.modules.get("tests.test_acceptance") or sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULT_LINES", None) if mod else None
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
