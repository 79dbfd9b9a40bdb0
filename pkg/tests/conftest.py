"""Shared fixtures: tiny networks and a small in-memory synthetic corpus."""
import numpy as np
import pytest

from wealth_xai.model import AvgPool2d, Conv2d, ConvNet, GlobalAvgPool, Linear, ReLU
from wealth_xai.pipeline import MemorySites
from wealth_xai.synthgen import generate_corpus


def make_tiny_net(side=16, seed=0, relu=True, channels=(4, 6), extra_sides=()):
    """conv3x3 -> relu -> conv3x3/s2 -> relu -> avgpool2 -> gap -> linear, on side×side inputs."""
    rng = np.random.default_rng(seed)
    c1, c2 = channels
    layers = [Conv2d(rng.normal(0, 0.4, (3, 3, 3, c1)), rng.normal(0, 0.1, c1), 1, 1, "conv1")]
    if relu:
        layers.append(ReLU("relu1"))
    layers.append(Conv2d(rng.normal(0, 0.4, (3, 3, c1, c2)), rng.normal(0, 0.1, c2), 2, 1, "conv2"))
    if relu:
        layers.append(ReLU("relu2"))
    layers += [AvgPool2d(2, "pool1"), GlobalAvgPool("gap")]
    head = Linear(rng.normal(0, 1.0, c2), 0.3)
    return ConvNet(layers, head, input_sides=(side, *extra_sides))


@pytest.fixture
def tiny_net():
    return make_tiny_net


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_sites():
    """Twelve generated sites, shared read-only across tests."""
    return generate_corpus(12, seed=7)


@pytest.fixture(scope="session")
def small_source(small_sites):
    return MemorySites(small_sites)
