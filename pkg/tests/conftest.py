import numpy as np
import pytest

from crackseg.dat import DatConfig
from crackseg.model import ModelConfig
from crackseg.sae import SaeConfig
from crackseg.synthgen import SynthSpec, generate


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_model_cfg():
    """A small full-variant config that keeps tests fast."""
    return ModelConfig(sae=SaeConfig(embed_dim=8), dat=DatConfig(num_blocks=1, heads=2))


@pytest.fixture(scope="session")
def synth_root(tmp_path_factory):
    """Ten 32x32 synthetic images with masks."""
    root = tmp_path_factory.mktemp("synth")
    generate(SynthSpec(count=10, size=(32, 32), seed=3), root)
    return root


ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_log(pytestconfig):
    """Collects one result line per acceptance criterion for the terminal summary."""
    return pytestconfig.stash.setdefault(ACCEPTANCE_KEY, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
