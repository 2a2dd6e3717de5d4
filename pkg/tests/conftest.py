import sys
import numpy as np
import pytest
import torch

from collabgen.zoo import AgentSpec

torch.set_num_threads(1)


def small_spec(agent_id=1, channels=8, feature_hw=(8, 16), obs_hw=(32, 64), depth="shallow",
               fov="wide", space=None, noise="clean", max_range=None):
    return AgentSpec(agent_id, f"a{agent_id}", depth, channels, tuple(feature_hw), tuple(obs_hw), fov,
                     space or f"space-{agent_id}", noise, max_range)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
