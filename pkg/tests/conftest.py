from __future__ import annotations

import numpy as np
import pytest

from ctdsg.dynamics import NoiseModel, SimConfig, StepSchedule
from ctdsg.graph import default_schedule
from ctdsg.objective import ObjectiveSet, reference_objectives

X0 = [[0.3, 2.0], [0.5, 1.3], [0.7, 2.7], [0.9, 1.0], [1.1, 3.0], [1.3, 1.6]]
X_STAR = np.array([1.5, 27.0 / 14.0])

ACCEPTANCE_LINES: list[str] = []


def reference_config(a: float = 1.0, horizon: float = 30.0, **changes) -> SimConfig:
    """The six-agent reference experiment at h = 1e-3, sampled every 0.1 s."""
    cfg = SimConfig(
        schedule=default_schedule(),
        objectives=ObjectiveSet(reference_objectives()),
        step=StepSchedule(2.0, a),
        noise=NoiseModel("sincos"),
        h=1e-3,
        horizon=horizon,
        x0=X0,
        seed=2024,
        sample_stride=100,
    )
    return cfg.replace(**changes) if changes else cfg


@pytest.fixture
def ref_cfg():
    return reference_config


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
