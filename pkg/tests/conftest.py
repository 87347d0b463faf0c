import sys
import time
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from koopstitch import dynamics, edmd, lifting  # noqa: E402

# The defaults of the run configuration: 81 ICs, 1001 samples at dt=0.1,
# 30 RBFs of width 0.4, Koopman step of 15 samples.
DT, STEPS, LAG, N_RBF, SIGMA = 0.1, 1000, 15, 30, 0.4


class Study:
    """Simulated data plus fitted global and per-basin models for one system."""

    def __init__(self, name):
        start = time.perf_counter()
        self.system = dynamics.get_system(name)
        x0s = dynamics.grid_initial_conditions(dynamics.DEFAULT_GRIDS[name])
        self.trajs = dynamics.simulate_batch(self.system, x0s, DT, STEPS)
        self.states = np.vstack([t.states for t in self.trajs])
        self.dictionary = lifting.build_dictionary("gaussian_rbf", self.states, N_RBF, SIGMA, seed=0)
        self.labels = dynamics.label_by_final_state(self.trajs, dynamics.attractors(self.system))
        self.by_label = {
            lab: [t for t, l in zip(self.trajs, self.labels) if l == lab] for lab in ("left", "right")
        }
        self.global_model = edmd.fit_trajectories(self.trajs, self.dictionary, label="global", lag=LAG)
        self.local = {
            lab: edmd.fit_trajectories(ts, self.dictionary, label=lab, lag=LAG)
            for lab, ts in self.by_label.items()
        }
        self.seconds = time.perf_counter() - start


@pytest.fixture(scope="session")
def toggle():
    return Study("toggle_switch")


@pytest.fixture(scope="session")
def second_order():
    return Study("second_order")


@pytest.fixture(scope="session")
def pipeline_out(tmp_path_factory):
    """Output directory of one default toggle-switch pipeline run."""
    from koopstitch.cli import main

    out = tmp_path_factory.mktemp("pipeline")
    assert main(["pipeline", "--out", str(out)]) == 0
    return out


def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture(scope="session")
def acceptance_log(request):
    """Collects one PASS/FAIL line per acceptance criterion."""
    return request.config._acceptance_lines


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
