import os
from pathlib import Path

import numpy as np
import pytest

from gsmprune import nn
from gsmprune.tensor import make_rng

MNIST_DIR = Path(os.environ.get("GSM_DATA_DIR", Path(__file__).parents[1] / "data" / "mnist"))
HAVE_MNIST = (MNIST_DIR / "train-images-idx3-ubyte").exists() or \
    (MNIST_DIR / "train-images-idx3-ubyte.gz").exists()

needs_mnist = pytest.mark.skipif(not HAVE_MNIST, reason=f"MNIST IDX files not found in {MNIST_DIR}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_cnn():
    return nn.ModelSpec(
        [nn.Conv2d(3, 3, 2, 3, stride=1, pad=1), nn.ReLU(), nn.MaxPool2(),
         nn.Conv2d(2, 2, 3, 4, stride=2), nn.Flatten(), nn.FullyConnected(4, 3)],
        (2, 4, 4), 3)


def tiny_mlp():
    return nn.mlp([5, 4, 3, 3])


def random_params(model, seed=0, scale=1.0):
    rng = make_rng(seed)
    p = nn.init_params(model, rng)
    for b in p.biases:
        b[...] = rng.uniform(-0.1, 0.1, size=b.shape)
    for k in p.kernels:
        k *= scale
    return p


def pytest_configure(config):
    config.acceptance_lines = {}


def pytest_terminal_summary(terminalreporter, config):
    lines = config.acceptance_lines
    if lines:
        terminalreporter.section("acceptance criteria")
        for key in sorted(lines):
            terminalreporter.write_line(lines[key])
