import numpy as np
import pytest
import torch

from miat.data import GridSpec, Lateral, Longitudinal, ManeuverLabel, TrajectorySample
from miat.model import ModelConfig


@pytest.fixture
def small_cfg():
    return ModelConfig(d_model=16, n_heads=4, ff_dim=32, mlp_hidden=16, history_len=6, future_len=5, prior_steps=2)


def make_sample(rng, T=6, F=5, D=2, occupancy=0.2, grid=GridSpec(), label=None):
    ego = np.cumsum(rng.normal(0, 1, (T, D)), axis=0)
    ego -= ego[-1]
    mask = rng.random((grid.n_cells, T)) < occupancy
    nbrs = rng.normal(0, 5, (grid.n_cells, T, D)) * mask[..., None]
    future = np.cumsum(rng.normal(0, 1, (F, 2)), axis=0)
    if label is None:
        label = ManeuverLabel(Lateral(int(rng.integers(3))), Longitudinal(int(rng.integers(3))))
    return TrajectorySample(ego.astype(np.float32), nbrs.astype(np.float32), mask,
                            future.astype(np.float32), label, ego_id=int(rng.integers(1000)), anchor_frame=0)


@pytest.fixture
def sample_factory():
    return make_sample


@pytest.fixture(autouse=True)
def _single_thread():
    torch.set_num_threads(1)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance():
    """Record and print one PASS/FAIL line for an acceptance criterion."""
    def record(number, name, passed, detail=""):
        line = f"criterion {number} [{name}]: {'PASS' if passed else 'FAIL'} {detail}".rstrip()
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
