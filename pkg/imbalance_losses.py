"""Training objectives for imbalanced ice classes: CE, weighted CE and focal loss.

All three are computed from log-softmax, so confident predictions never
underflow, and all three are differentiable through the tensor tape.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

import tensor_core as tc
from errors import InputError, ParameterError, ShapeError, TargetIndexError
from tensor_core import Tensor

logger = logging.getLogger(__name__)

LOSS_NAMES = ("ce", "wce", "focal")


@dataclass(frozen=True)
class ClassWeights:
    weights: tuple[float, ...]
    zero_count_classes: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.weights:
            raise ParameterError("class weights must not be empty")
        for c, w in enumerate(self.weights):
            if not math.isfinite(w) or w <= 0:
                raise ParameterError(f"class weight {c} must be positive and finite, got {w}")

    @property
    def has_zero_counts(self) -> bool:
        return bool(self.zero_count_classes)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.weights, dtype=np.float64)


@dataclass(frozen=True)
class FocalParams:
    gamma: float = 2.0
    alpha: tuple[float, ...] | None = None

    def __post_init__(self):
        if not math.isfinite(self.gamma) or self.gamma < 0:
            raise ParameterError(f"focal gamma must be non-negative, got {self.gamma}")
        if self.alpha is not None and any(not math.isfinite(a) or a <= 0 for a in self.alpha):
            raise ParameterError(f"focal alpha entries must be positive, got {self.alpha}")


def _check_targets(logits: Tensor, targets: Sequence[int]) -> np.ndarray:
    if logits.ndim != 2:
        raise ShapeError(f"logits must be B x K, got shape {logits.shape}")
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.shape[0] != logits.shape[0]:
        raise ShapeError(f"{targets.shape[0]} targets for a batch of {logits.shape[0]} logits")
    k = logits.shape[1]
    bad = (targets < 0) | (targets >= k)
    if bad.any():
        raise TargetIndexError(f"target {int(targets[bad][0])} outside [0, {k})")
    return targets


def _target_log_probs(logits: Tensor, targets: np.ndarray) -> Tensor:
    log_probs = tc.log_softmax(logits, axis=1)
    return log_probs[np.arange(targets.shape[0]), targets]


def per_sample_cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    targets = _check_targets(logits, targets)
    return -_target_log_probs(logits, targets)


def cross_entropy(logits: Tensor, targets: Sequence[int]) -> Tensor:
    """Batch mean of -log softmax(logits)[target]."""
    return tc.tensor_mean(per_sample_cross_entropy(logits, targets))


def weighted_cross_entropy(logits: Tensor, targets: Sequence[int], weights: ClassWeights) -> Tensor:
    """Class-weighted CE, normalised by the sum of the weights applied in the batch."""
    targets = _check_targets(logits, targets)
    w = weights.as_array()
    if w.shape[0] != logits.shape[1]:
        raise ParameterError(f"{w.shape[0]} class weights for {logits.shape[1]} classes")
    applied = w[targets]
    weighted = Tensor(applied) * _target_log_probs(logits, targets)
    return -tc.tensor_sum(weighted) / float(applied.sum())


def per_sample_focal(logits: Tensor, targets: Sequence[int], params: FocalParams) -> Tensor:
    """alpha_t * (1 - p_t)^gamma * -log p_t for each sample."""
    targets = _check_targets(logits, targets)
    log_pt = _target_log_probs(logits, targets)
    modulation = tc.pow_scalar(1.0 - tc.exp(log_pt), params.gamma)
    loss = -(modulation * log_pt)
    if params.alpha is not None:
        if len(params.alpha) != logits.shape[1]:
            raise ParameterError(f"{len(params.alpha)} focal alpha entries for {logits.shape[1]} classes")
        loss = Tensor(np.asarray(params.alpha, dtype=np.float64)[targets]) * loss
    return loss


def focal_loss(logits: Tensor, targets: Sequence[int], params: FocalParams = FocalParams()) -> Tensor:
    return tc.tensor_mean(per_sample_focal(logits, targets, params))


def class_weights_from_counts(counts: Sequence[int]) -> ClassWeights:
    """Inverse-frequency weights N / (K * n_c).

    Classes with zero samples get the largest computed weight and are listed in
    ``zero_count_classes``.
    """
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 1 or counts.size == 0:
        raise InputError(f"class counts must be a non-empty vector, got shape {counts.shape}")
    if (counts < 0).any():
        raise InputError(f"class counts must be non-negative, got {counts.tolist()}")
    if counts.sum() <= 0:
        raise InputError("class counts are all zero; cannot derive weights")
    n, k = counts.sum(), counts.size
    present = counts > 0
    weights = np.zeros(k)
    weights[present] = n / (k * counts[present])
    zero = tuple(int(c) for c in np.flatnonzero(~present))
    if zero:
        weights[~present] = weights[present].max()
        logger.warning("classes %s have no training samples; giving them the maximum weight %.4f", zero, weights.max())
    return ClassWeights(tuple(float(w) for w in weights), zero)


def compute_loss(
    name: str,
    logits: Tensor,
    targets: Sequence[int],
    weights: ClassWeights | None = None,
    focal: FocalParams | None = None,
) -> Tensor:
    """Dispatch on a configured loss name."""
    if name == "ce":
        return cross_entropy(logits, targets)
    if name == "wce":
        if weights is None:
            raise ParameterError("weighted cross-entropy needs class weights")
        return weighted_cross_entropy(logits, targets, weights)
    if name == "focal":
        return focal_loss(logits, targets, focal or FocalParams())
    raise ParameterError(f"unknown loss {name!r}; choose from {LOSS_NAMES}")
