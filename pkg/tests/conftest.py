import numpy as np
import pytest
import torch

torch.set_num_threads(1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion, with the measured values."""
    lines = []
    for outcome in ("passed", "failed", "error"):
        for rep in terminalreporter.stats.get(outcome, []):
            props = dict(getattr(rep, "user_properties", []))
            if "criterion" not in props or (outcome == "passed" and rep.when != "call"):
                continue
            status = "PASS" if outcome == "passed" else "FAIL"
            detail = props.get("measured", "")
            lines.append((props["criterion"], f"{status}  criterion {props['criterion']}" + (f"  [{detail}]" if detail else "")))
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, text in sorted(lines, key=lambda x: int(x[0].split()[0])):
            terminalreporter.write_line(text)
