"""Gaussian RBF targets, the regression loss and argmax keypoint read-out."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidParams, NonFiniteInput, ShapeMismatch

DEFAULT_EPSILON = 10.0


@dataclass(frozen=True, eq=False)
class RbfField:
    """n x m matrix ``exp(-epsilon * g**2)`` of geodesic distances ``g``."""

    values: np.ndarray
    epsilon: float = DEFAULT_EPSILON

    def __post_init__(self):
        v = np.array(self.values, dtype=np.float64, copy=True)
        if v.ndim == 1:
            v = v[:, None]
        v.flags.writeable = False
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape


@dataclass(frozen=True, eq=False)
class KeypointPrediction:
    indices: np.ndarray
    confidences: np.ndarray


def rbf_values(g, epsilon=DEFAULT_EPSILON):
    g = np.asarray(g, dtype=np.float64)
    return np.exp(-epsilon * g * g)


def rbf_map(geodesic, epsilon: float = DEFAULT_EPSILON) -> RbfField:
    """Map a geodesic field into ``(0, 1]``.

    Far from a keypoint the value underflows to exactly 0.0 (for the default
    epsilon, beyond about 8.6 m in float64 and about 3.2 m once cast to
    float32); that is the intended localised heat map.
    """
    if not epsilon > 0:
        raise InvalidParams(f"epsilon must be positive, got {epsilon}")
    g = np.asarray(getattr(geodesic, "values", geodesic), dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise NonFiniteInput("geodesic field contains non-finite values")
    if np.any(g < 0):
        raise InvalidParams("geodesic distances must be non-negative")
    return RbfField(rbf_values(g, epsilon), float(epsilon))


def extract_keypoints(field) -> KeypointPrediction:
    """Column-wise argmax; ties go to the lowest row index."""
    values = np.asarray(getattr(field, "values", field))
    if values.ndim == 1:
        values = values[:, None]
    if values.shape[0] < 1:
        raise ShapeMismatch("field has no rows")
    idx = np.argmax(values, axis=0)
    conf = values[idx, np.arange(values.shape[1])]
    return KeypointPrediction(idx.astype(np.int64), np.asarray(conf, dtype=np.float64))


def mse_loss(pred, target) -> float:
    """Mean of squared differences over all n * m entries."""
    pred = np.asarray(getattr(pred, "values", pred), dtype=np.float64)
    target = np.asarray(getattr(target, "values", target), dtype=np.float64)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"prediction shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff))
