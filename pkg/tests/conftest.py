import numpy as np
import pytest

from suslab import experiment
from suslab.config import default_config

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_RESULTS:
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_config(variant="SUS_F", **overrides):
    """A few-second configuration for unit and CLI tests."""
    base = dict(
        dataset__size=2000,
        attack__phase1_epochs=8,
        attack__phase2_epochs=8,
        victim__finetune_epochs=1,
    )
    base.update(overrides)
    return default_config(variant, **base)


@pytest.fixture(scope="session")
def small_sus_f():
    cfg = small_config("SUS_F")
    state, data = experiment.run_attack(cfg)
    return cfg, state, data


@pytest.fixture(scope="session")
def small_sus_r():
    cfg = small_config("SUS_R")
    state, data = experiment.run_attack(cfg)
    return cfg, state, data
