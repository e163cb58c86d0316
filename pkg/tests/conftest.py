import numpy as np
import pytest
import torch

from videogeom import tensors


@pytest.fixture(autouse=True)
def _deterministic():
    tensors.set_deterministic(True)
    yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def trained_toy():
    """The toy model after the 200-step acceptance run (shared across tests)."""
    from videogeom.losses import LossWeights
    from videogeom.model import ModelConfig
    from videogeom.training import DataConfig, train_toy

    torch.manual_seed(0)
    data = DataConfig(kinds=("plane", "sphere"), n_frames=4, height=16, width=16, batch_size=2, seed=0)
    model, log = train_toy(ModelConfig(seed=0), data, steps=200, lr=2e-3, weights=LossWeights(0.1, 0.1))
    return model, log, data


# one line per acceptance criterion, printed in the terminal summary
ACCEPTANCE: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
