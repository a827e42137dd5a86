import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod and mod.RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(mod.RESULTS):
            terminalreporter.write_line(line)
