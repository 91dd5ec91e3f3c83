"""Mahalanobis semi-metric derived from a softmax head.

The metric matrix is ``M = A A^T`` where column ``k`` of ``A`` is the class
weight ``w_k`` minus the mean class weight. ``M`` has rank at most ``K - 1``,
so the induced distance is only a semi-metric.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .datastore import EmbeddingSpace

_CLAMP = 1e-9


@dataclass(frozen=True, eq=False)
class MetricModel:
    metric_matrix: np.ndarray
    run_id: int = 0
    # rows of L with M = L^T L; points map to coordinates z @ L.T
    factor: np.ndarray = None

    def __post_init__(self):
        m = np.asarray(self.metric_matrix, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise ValueError("metric matrix must be square")
        m = 0.5 * (m + m.T)
        object.__setattr__(self, "metric_matrix", m)
        if self.factor is None:
            vals, vecs = np.linalg.eigh(m)
            vals = np.clip(vals, 0.0, None)
            object.__setattr__(self, "factor", (vecs * np.sqrt(vals)).T)

    @property
    def dim(self) -> int:
        return self.metric_matrix.shape[0]

    def coords(self, points) -> np.ndarray:
        """Map points so that Euclidean distance between images equals the metric distance."""
        return np.asarray(points, dtype=np.float64) @ self.factor.T


def metric_from_head(head_weights, run_id: int = 0, ridge: float = 0.0) -> MetricModel:
    w = np.asarray(head_weights, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] < 2:
        raise ValueError("head_weights must be D x K with K >= 2")
    a = w - w.mean(axis=1, keepdims=True)
    m = a @ a.T
    if not np.any(a):
        warnings.warn("all class weights coincide; metric is identically zero", RuntimeWarning, stacklevel=2)
    if ridge:
        m = m + ridge * np.eye(w.shape[0])
    return MetricModel(m, run_id)


def build_metric(space: EmbeddingSpace, ridge: float = 0.0) -> MetricModel:
    return metric_from_head(space.head_weights, space.run_id, ridge)


def mahalanobis(metric: MetricModel, a, b) -> float:
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    if not np.all(np.isfinite(diff)):
        raise ValueError("non-finite input")
    q = float(diff @ metric.metric_matrix @ diff)
    if q < 0:
        scale = float(diff @ diff) * float(np.abs(metric.metric_matrix).max())
        if q < -_CLAMP * max(scale, 1.0):
            raise ValueError(f"negative quadratic form {q}; metric matrix is not PSD")
        q = 0.0
    return float(np.sqrt(q))


def pairwise_distances(metric: MetricModel, rows, cols) -> np.ndarray:
    rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
    cols = np.atleast_2d(np.asarray(cols, dtype=np.float64))
    if rows.shape[1] != metric.dim or cols.shape[1] != metric.dim:
        raise ValueError("point dimension does not match the metric")
    return cdist(metric.coords(rows), metric.coords(cols))
