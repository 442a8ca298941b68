import numpy as np
import pytest

from paramtta.harness.config import ExperimentConfig
from paramtta.harness.train import offline_train


def small_config(seed: int = 0, **sections) -> ExperimentConfig:
    """A scaled-down experiment that trains in a few seconds."""
    base = ExperimentConfig(seed=seed).replace(
        offline={"n_train": 800, "n_test": 200, "steps": 700, "ae_steps": 300, "diff_steps": 300},
        generator={"warmup": 60, "snapshot_every": 10},
        stream={"batches_per_domain": 6},
    )
    return base.replace(**sections) if sections else base


@pytest.fixture(scope="session")
def small_artifacts():
    """Offline artifacts of the small config (dual adapter), trained once."""
    return offline_train(small_config())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one verdict line per acceptance criterion, echoed after the run
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
