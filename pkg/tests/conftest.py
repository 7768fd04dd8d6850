from pathlib import Path

import pytest

from irmanifold.cli import main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture(scope="session")
def small_runs(tmp_path_factory):
    """Two independent ``run-all`` executions of the small cardiac config."""
    dirs = []
    for name in ("a", "b"):
        out = tmp_path_factory.mktemp(f"small_{name}")
        assert main(["run-all", "--config", str(CONFIGS / "small.json"), "--out", str(out)]) == 0
        dirs.append(out)
    return dirs


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, with the recorded measurements."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            nodeid = getattr(rep, "nodeid", "")
            if "test_acceptance.py::test_criterion_" not in nodeid or rep.when not in ("call", "setup"):
                continue
            if outcome == "passed" and rep.when != "call":
                continue
            name = nodeid.split("::")[-1]
            detail = ", ".join(f"{k}={v}" for k, v in getattr(rep, "user_properties", []))
            lines.append((name, "PASS" if outcome == "passed" else "FAIL", detail))
    if lines:
        terminalreporter.section("acceptance criteria")
        for name, status, detail in sorted(lines):
            terminalreporter.write_line(f"{status} {name}" + (f"  [{detail}]" if detail else ""))
