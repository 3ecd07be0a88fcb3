import numpy as np
import pytest
import torch

from contrafeat.latent import compute_pca
from contrafeat.toyworld import ToyWorld, ToyWorldSpec


@pytest.fixture(scope="session")
def world():
    return ToyWorld(ToyWorldSpec(k_layers=5))


@pytest.fixture(scope="session")
def world64():
    return ToyWorld(ToyWorldSpec(k_layers=5), dtype=torch.float64)


@pytest.fixture(scope="session")
def tiny_spec():
    """8x8 images, one extractor stage: the gradient-check configuration."""
    return ToyWorldSpec(k_layers=5, image_size=8, stages=1)


@pytest.fixture(scope="session")
def basis(world):
    g = torch.Generator().manual_seed(0)
    return compute_pca(world.map_latent(world.sample_z(4000, g)).double().numpy())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from acceptance_support import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS):
            terminalreporter.write_line(line)
