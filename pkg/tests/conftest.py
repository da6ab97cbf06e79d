import sys


def pytest_terminal_summary(terminalreporter):
    lines = []
    for mod in list(sys.modules.values()):
        results = getattr(mod, "ACCEPTANCE_RESULTS", None)
        if isinstance(results, dict) and results:
            lines += [results[k] for k in sorted(results)]
    if lines:
        terminalreporter.section("acceptance criteria")
        for ln in lines:
            terminalreporter.write_line(ln)
