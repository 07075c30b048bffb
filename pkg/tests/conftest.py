import numpy as np
import pytest

from smpcval.probval import ProbabilisticLevels
from smpcval.sysmodel import ControllerDesign, LtiSystem
from smpcval.tightening import compute_tightening
from smpcval.uncertainty import DisturbanceModel

EXAMPLE_A = [[1.0, 0.0075], [-0.143, 0.996]]
EXAMPLE_B = [[4.798], [0.115]]


@pytest.fixture(scope="session")
def example_system():
    return LtiSystem.from_boxes(EXAMPLE_A, EXAMPLE_B, [2.0, 3.0], [0.2])


@pytest.fixture(scope="session")
def example_design(example_system):
    return ControllerDesign.from_system(example_system, np.diag([1.0, 10.0]), [[1.0]], 8)


@pytest.fixture(scope="session")
def example_model():
    return DisturbanceModel("truncated-gaussian", 2, 0.04 ** 2 * np.eye(2), 0.02, seed=1)


@pytest.fixture(scope="session")
def example_profile(example_system, example_design, example_model):
    return compute_tightening(example_system, example_design, example_model,
                              ProbabilisticLevels(0.05, 1e-6, 60))


@pytest.fixture(scope="session")
def feasible_states(example_system, example_design, example_profile):
    """100 states of the tightened feasible region, sampled uniformly in the box."""
    from smpcval.pipeline import feasibility_oracle
    from smpcval.uncertainty import sample_feasible_initial_states
    x0, _ = sample_feasible_initial_states(
        100, feasibility_oracle(example_system, example_design, example_profile), [2.0, 3.0], 11)
    return x0


TINY_CONFIG = """\
system:
  A: [[1.0, 0.0075], [-0.143, 0.996]]
  B: [[4.798], [0.115]]
  state_box: [2.0, 3.0]
  input_box: [0.2]
  dt: 0.02
design:
  Q: [[1.0, 0.0], [0.0, 10.0]]
  R: [[1.0]]
  N: 4
disturbance:
  kind: truncated-gaussian
  covariance: {cov}
  truncation_radius_sq: 0.02
tightening:
  epsilon: 0.2
  delta: 0.1
  r: 2
  seed: 1
  validation_samples: 500
sweep:
  epsilon: 0.3
  delta: 0.1
  r: 1
  rho_min: 1.0
  rho_max: 1.0e4
  n_C: 3
  M: 5
  seed: 3
  trace_rhos: [10]
  trace_count: 4
  chunk: 16
selection:
  policy: threshold
  threshold: 0.5
output:
  directory: out
fast:
  sweep:
    n_C: 2
"""


def tiny_config_text(zero_disturbance=False):
    cov = "[[0.0, 0.0], [0.0, 0.0]]" if zero_disturbance else "[[0.0016, 0.0], [0.0, 0.0016]]"
    return TINY_CONFIG.replace("{cov}", cov)


@pytest.fixture
def tiny_config(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(tiny_config_text())
    return path


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


def record_acceptance(criterion, ok, detail):
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
