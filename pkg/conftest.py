import os
import sys

import numpy as np
import pytest

# Add the project root directory to the Python path
project_root = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, project_root)

from discriminator.discriminator_module import MlpSpec, ModelParams, init_params


def make_params(input_dim: int = 2, hidden_dims=(6,), num_classes: int = 2, batchnorm=True,
                seed: int = 0) -> ModelParams:
    return init_params(MlpSpec(input_dim, list(hidden_dims), num_classes, batchnorm), seed)


def make_constant(params: ModelParams) -> ModelParams:
    """Zeroes the output layer: Q(.|x) is uniform and every score matrix is 0."""
    const = params.copy()
    last = const.last_layer
    const.weights[f"W{last}"] = np.zeros_like(const.weights[f"W{last}"])
    const.weights[f"b{last}"] = np.zeros_like(const.weights[f"b{last}"])
    return const


@pytest.fixture
def rng():
    return np.random.default_rng(42)


@pytest.fixture
def tiny_params():
    return make_params()


@pytest.fixture
def constant_params():
    return make_constant(make_params())
