import numpy as np
import pytest

from krecycle.operators import FoEParams, ImageVector, InpaintingProblem, Kernel


def random_params(rng, num_filters=2, kernel_size=3, weight_scale=0.3):
    log_weights = weight_scale * rng.standard_normal(num_filters)
    kernels = tuple(
        Kernel(0.3 * rng.standard_normal((kernel_size, kernel_size)))
        for _ in range(num_filters)
    )
    return FoEParams(log_weights, kernels)


def random_problem(rng, shape=(5, 5), keep=0.6, ridge=1e-3):
    n = shape[0] * shape[1]
    m = max(1, int(round(keep * n)))
    mask = rng.permutation(n)[:m]
    y = rng.standard_normal(m)
    x_true = ImageVector(rng.standard_normal(n), shape)
    return InpaintingProblem(mask_rows=np.sort(mask), y=y, ridge=ridge, shape=shape, x_true=x_true)


def random_image(rng, shape=(5, 5)):
    return ImageVector(rng.standard_normal(shape[0] * shape[1]), shape)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
