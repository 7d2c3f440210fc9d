import os
import sys
from pathlib import Path

import numpy as np
import pytest

from neurossm.model import NetworkConfig, init_network

MNIST_CANDIDATES = [os.environ.get("NEUROSSM_DATA"), "/root/data/mnist", str(Path(__file__).parent.parent / "data" / "mnist")]


def find_mnist():
    for c in MNIST_CANDIDATES:
        if c and (Path(c) / "t10k-images-idx3-ubyte").exists():
            return c
    return None


@pytest.fixture
def mnist_dir():
    d = find_mnist()
    if d is None:
        pytest.skip("MNIST files not found (set NEUROSSM_DATA)")
    return d


@pytest.fixture
def tiny_config():
    return NetworkConfig(input_dim=1, model_dim=6, state_dim=4, num_blocks=2, num_classes=3, seq_len=24)


@pytest.fixture
def tiny_net(tiny_config):
    net = init_network(tiny_config, seed=3)
    return with_random_biases(net, np.random.default_rng(3))


def with_random_biases(net, rng):
    """Biases start at zero; nonzero values keep ReLUs off their kink in gradient checks."""
    from neurossm.model import network_from_arrays

    arrays = net.named_arrays()
    for k, v in list(arrays.items()):
        if k.endswith(("encoder.b", "ssm_bias", "mix.b", "decoder.b")):
            arrays[k] = rng.normal(0, 0.3, v.shape)
    return network_from_arrays(net.config, arrays, seed=net.seed)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "ACCEPTANCE_LINES", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
