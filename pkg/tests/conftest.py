import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

# one "[ACCEPT] <n> PASS|FAIL ..." line per acceptance check, repeated in the summary
ACCEPT_LINES = {}


def record_acceptance(number, ok, detail):
    line = f"[ACCEPT] {number} {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPT_LINES[number] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPT_LINES:
        terminalreporter.section("acceptance")
        for n in sorted(ACCEPT_LINES):
            terminalreporter.write_line(ACCEPT_LINES[n])
