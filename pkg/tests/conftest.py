import json
from pathlib import Path
from types import SimpleNamespace

import pytest

from ggdquant import fixture
from ggdquant.netsim import capture_activations, capture_calibration

RECORDED = json.loads((Path(__file__).parent / "fixtures" / "seed0.json").read_text())


@pytest.fixture(scope="session")
def recorded():
    return RECORDED


@pytest.fixture(scope="session")
def net():
    """Seed-0 reference network with its calibration and evaluation sets."""
    model = fixture.reference_model(0)
    calib = fixture.synthetic_inputs(RECORDED["calib_size"], 0, "calibration")
    evals = fixture.synthetic_inputs(RECORDED["eval_size"], 0, "evaluation")
    return SimpleNamespace(
        model=model,
        calib=calib,
        evals=evals,
        stats=capture_calibration(model, calib),
        acts=capture_activations(model, calib),
    )


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion_line():
    """Record and print one pass/fail line for an acceptance criterion."""

    def emit(number, passed, detail):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return emit


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
