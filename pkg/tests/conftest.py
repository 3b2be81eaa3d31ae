"""Shared fixtures and finite-difference helpers."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
import pytest

import data_pipeline as dp
import tensor_core as tc
from tensor_core import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# Central differences over float32 function values cannot resolve gradient
# entries much below this: a few roundings of unit-scale outputs across a 2e-3 span.
FLOAT32_ATOL = 5e-4


def analytic_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray]) -> list[np.ndarray]:
    tensors = [Tensor(a, grad_enabled=True) for a in arrays]
    with tc.Tape() as tape:
        out = fn(*tensors)
        loss = out if out.size == 1 else tc.tensor_sum(out)
    by_node = tc.backward(tape, loss)
    return [by_node.get(t.node_id, np.zeros(t.shape, dtype=np.float32)).astype(np.float64) for t in tensors]


def numerical_gradients(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-3) -> list[np.ndarray]:
    """Central differences; the step is measured after rounding to float32.

    A non-scalar output is summed here in float64, so elements the shift leaves
    untouched cancel exactly.
    """
    arrays = [np.asarray(a, dtype=np.float32) for a in arrays]
    grads = []
    for i, base in enumerate(arrays):
        grad = np.zeros(base.shape)
        for idx in np.ndindex(base.shape):
            values = []
            shifted_points = []
            for sign in (1, -1):
                shifted = [a.copy() for a in arrays]
                shifted[i][idx] = np.float32(float(base[idx]) + sign * h)
                shifted_points.append(float(shifted[i][idx]))
                values.append(fn(*[Tensor(a) for a in shifted]).data.astype(np.float64))
            grad[idx] = (values[0] - values[1]).sum() / (shifted_points[0] - shifted_points[1])
        grads.append(grad)
    return grads


def assert_close_gradients(analytic: np.ndarray, numeric: np.ndarray, rtol: float = 1e-3, atol: float = 0.0) -> None:
    np.testing.assert_allclose(analytic, numeric, rtol=rtol, atol=atol)


def assert_gradients_match(
    fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], h: float = 1e-3, rtol: float = 1e-3, atol: float = 0.0
) -> None:
    for analytic, numeric in zip(analytic_gradients(fn, arrays), numerical_gradients(fn, arrays, h)):
        assert_close_gradients(analytic, numeric, rtol=rtol, atol=atol)


def uniform_scene(scene_id: str, size: int, code: int, value: float = -15.0) -> tuple[dp.SceneRaster, dp.LabelRaster]:
    data = np.full((2, size, size), value, dtype=np.float32)
    data[1] -= 8.0
    scene = dp.SceneRaster(scene_id, size, size, data)
    labels = dp.LabelRaster(size, size, np.full((size, size), code, dtype=np.uint8))
    return scene, labels


@pytest.fixture
def taxonomy() -> dp.ClassTaxonomy:
    return dp.default_taxonomy()


def learnable_batch(n: int, num_classes: int, size: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Class-template images plus mild noise, balanced over classes."""
    rng = np.random.default_rng(seed)
    templates = rng.standard_normal((num_classes, 2, size, size)).astype(np.float32)
    labels = np.arange(n) % num_classes
    images = templates[labels] + 0.1 * rng.standard_normal((n, 2, size, size)).astype(np.float32)
    return images.astype(np.float32), labels.astype(np.int64)
