import numpy as np
import pytest

from flipfed.nncore import Architecture, conv2d, dense, init_params


def small_conv_arch(channels=1, size=6, filters=2, hidden=5, classes=3):
    return Architecture((channels, size, size), (
        conv2d(filters, (3, 3)),
        dense(hidden),
        dense(classes, activation="identity"),
    ))


def small_mlp_arch(inputs=6, hidden=5, classes=3):
    return Architecture((inputs,), (dense(hidden), dense(classes, activation="identity")))


def finite_difference(fn, flat, eps=1e-5):
    """Central differences of scalar ``fn`` at every coordinate of ``flat``."""
    out = np.zeros_like(flat)
    for k in range(flat.size):
        e = np.zeros_like(flat)
        e[k] = eps
        out[k] = (fn(flat + e) - fn(flat - e)) / (2 * eps)
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def conv_model(rng):
    arch = small_conv_arch()
    return arch, init_params(arch, rng)
