"""Embedding topology, cross-run topology robustness and candidate selection."""
from __future__ import annotations

import csv
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from . import kernels
from .datastore import AlignmentError, LabeledDataset, RunBundle, ensure_parent
from .metric import MetricModel, build_metric, pairwise_distances


@dataclass(frozen=True, eq=False)
class RobustnessTable:
    """Per-sample robustness ``r`` in (0, 1], kept in log form as well.

    ``log_scores`` is authoritative: with large reference sets the raw
    topology gap can exceed what ``exp`` represents, and candidate selection
    compares in the log domain.
    """

    sample_ids: np.ndarray
    log_scores: np.ndarray
    reference_set: np.ndarray
    pair_count: int

    def __post_init__(self):
        ls = np.asarray(self.log_scores, dtype=np.float64)
        if ls.shape != np.shape(self.sample_ids):
            raise ValueError("one score per sample required")
        if np.any(ls > 0) or not np.all(np.isfinite(ls)):
            raise ValueError("robustness must lie in (0, 1]")
        object.__setattr__(self, "log_scores", ls)
        object.__setattr__(self, "sample_ids", np.asarray(self.sample_ids, dtype=np.int64))
        object.__setattr__(self, "reference_set", np.asarray(self.reference_set, dtype=np.int64))

    @classmethod
    def from_scores(cls, sample_ids, scores, reference_set=(), pair_count=1):
        scores = np.asarray(scores, dtype=np.float64)
        if np.any(scores <= 0) or np.any(scores > 1):
            raise ValueError("robustness must lie in (0, 1]")
        return cls(sample_ids, np.log(scores), reference_set, pair_count)

    @property
    def scores(self) -> np.ndarray:
        return np.exp(self.log_scores)

    def write_csv(self, path, labels) -> None:
        path = ensure_parent(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "label", "r"])
            for sid, lab, r in zip(self.sample_ids, labels, self.scores):
                w.writerow([int(sid), int(lab), repr(float(r))])


@dataclass(frozen=True)
class CandidateSets:
    """Per-class candidates; ``members[k]`` holds (sample_id, row, log_r) sorted by id."""

    members: dict
    threshold_used: float

    def ids(self, k) -> list:
        return [m[0] for m in self.members[k]]

    def scores(self, k) -> np.ndarray:
        return np.exp([m[2] for m in self.members[k]])

    @property
    def classes(self):
        return sorted(self.members)


def topology(metric: MetricModel, space, sample_index: int, reference) -> np.ndarray:
    """Distances from one sample to each reference row, in the order given."""
    reference = np.asarray(reference, dtype=np.int64)
    n = space.embeddings.shape[0]
    if np.any(reference < 0) or np.any(reference >= n) or not 0 <= sample_index < n:
        raise IndexError("sample or reference index out of range")
    z = space.embeddings
    return pairwise_distances(metric, z[sample_index], z[reference])[0]


def reference_subsample(n: int, size: int, seed: int) -> np.ndarray:
    """Seeded uniform subset of row indices, sorted."""
    if size >= n:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=size, replace=False))


def _pair_gaps(c1, r1, c2, r2, threads):
    n = c1.shape[0]
    if threads <= 1 or n < 2 * threads:
        return kernels.topology_gap(c1, r1, c2, r2)
    bounds = np.linspace(0, n, threads + 1).astype(int)
    with ThreadPoolExecutor(threads) as pool:
        parts = pool.map(
            lambda ab: kernels.topology_gap(c1[ab[0]:ab[1]], r1, c2[ab[0]:ab[1]], r2),
            zip(bounds[:-1], bounds[1:]),
        )
        return np.concatenate(list(parts))


def robustness(
    bundle: RunBundle,
    metrics=None,
    reference=None,
    sample_ids=None,
    normalize: bool = False,
    threads: int = 1,
) -> RobustnessTable:
    """Topology robustness of every sample across the runs of ``bundle``.

    Each run's topology is measured with that run's own metric. With more than
    two runs the per-pair robustness values are averaged over all unordered
    pairs. ``normalize`` divides each gap by sqrt(len(reference)).
    """
    runs = list(bundle)
    if len(runs) < 2:
        raise AlignmentError("robustness needs at least two runs")
    n = runs[0].n
    if any(r.n != n or r.source_checksum != runs[0].source_checksum for r in runs):
        raise AlignmentError("runs are not aligned on the same samples")
    if metrics is None:
        metrics = [build_metric(r) for r in runs]
    if len(metrics) != len(runs):
        raise ValueError("one metric per run required")
    reference = np.arange(n) if reference is None else np.asarray(reference, dtype=np.int64)
    sample_ids = np.arange(n) if sample_ids is None else np.asarray(sample_ids, dtype=np.int64)
    if len(reference) == 0:
        raise ValueError("empty reference set")

    coords = [m.coords(r.embeddings) for m, r in zip(metrics, runs)]
    scale = 1.0 / math.sqrt(len(reference)) if normalize else 1.0
    logs = []
    for u, v in itertools.combinations(range(len(runs)), 2):
        gap = _pair_gaps(coords[u], coords[u][reference], coords[v], coords[v][reference], threads)
        logs.append(-gap * scale)
    logs = np.stack(logs)
    log_r = logsumexp(logs, axis=0) - math.log(len(logs))
    return RobustnessTable(sample_ids, np.minimum(log_r, 0.0), sample_ids[reference], len(logs))


def select_candidates(table: RobustnessTable, dataset: LabeledDataset, epsilon: float) -> CandidateSets:
    """Per class, keep samples whose r is at least ``epsilon`` times the class maximum."""
    if not 0 < epsilon <= 1:
        raise ValueError(f"epsilon must be in (0, 1], got {epsilon}")
    if not np.array_equal(table.sample_ids, dataset.ids):
        raise AlignmentError("robustness table and dataset list different samples")
    log_eps = math.log(epsilon)
    members = {}
    for k in range(dataset.class_count):
        rows = dataset.class_rows(k)
        if len(rows) == 0:
            raise ValueError(f"class {k} has no samples")
        ls = table.log_scores[rows]
        keep = rows[ls >= ls.max() + log_eps]
        members[k] = [(int(dataset.ids[i]), int(i), float(table.log_scores[i])) for i in keep]
    return CandidateSets(members, float(epsilon))
