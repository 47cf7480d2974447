import sys
from pathlib import Path

# make tests/oracles.py importable from every test module
sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE = []


def record(name: str, ok: bool, detail: str) -> None:
    """Log one acceptance criterion for the end-of-run summary, then assert it."""
    ACCEPTANCE.append((name, ok, detail))
    assert ok, f"{name}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
