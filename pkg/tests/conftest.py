import sys


def pytest_terminal_summary(terminalreporter):
    """Print the acceptance verdict lines collected by test_acceptance, if it ran."""
    lines = []
    for name, mod in list(sys.modules.items()):
        if name.endswith("test_acceptance") and hasattr(mod, "RESULTS"):
            lines = [mod.RESULTS[k] for k in sorted(mod.RESULTS)]
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
