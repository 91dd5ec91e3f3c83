"""Diversity filtering of candidate prototypes.

Each candidate is scored by its distance to the nearest candidate of strictly
higher robustness; the highest-robustness candidates (which have no such
neighbour) get the largest distance in the class. Prototypes are taken in
descending order of that score.
"""
from __future__ import annotations

import csv
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .datastore import ensure_parent
from .metric import MetricModel, pairwise_distances
from .uncertainty import CandidateSets

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Prototype:
    sample_id: int
    rank: int
    r: float
    e_value: float


@dataclass(frozen=True)
class PrototypeBook:
    prototypes: int
    entries: dict = field(default_factory=dict)

    def ids(self, k) -> list:
        return [p.sample_id for p in self.entries[k]]

    @property
    def classes(self):
        return sorted(self.entries)

    def __len__(self):
        return sum(len(v) for v in self.entries.values())

    def all_ids(self) -> np.ndarray:
        return np.array(sorted(p.sample_id for v in self.entries.values() for p in v), dtype=np.int64)

    def with_limit(self, t: int) -> "PrototypeBook":
        """The first ``t`` prototypes of every class."""
        return PrototypeBook(t, {k: v[:t] for k, v in self.entries.items()})

    def write_csv(self, path) -> None:
        path = ensure_parent(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["class", "rank", "sample_id", "r", "e_value"])
            for k in self.classes:
                for p in self.entries[k]:
                    w.writerow([k, p.rank, p.sample_id, repr(p.r), repr(p.e_value)])

    @classmethod
    def read_csv(cls, path) -> "PrototypeBook":
        entries: dict = {}
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != ["class", "rank", "sample_id", "r", "e_value"]:
                raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
            for row in reader:
                k = int(row["class"])
                entries.setdefault(k, []).append(
                    Prototype(int(row["sample_id"]), int(row["rank"]), float(row["r"]), float(row["e_value"]))
                )
        for k, v in entries.items():
            v.sort(key=lambda p: p.rank)
            if [p.rank for p in v] != list(range(1, len(v) + 1)):
                raise ValueError(f"{path}: class {k} ranks are not 1..{len(v)}")
        t = max((len(v) for v in entries.values()), default=0)
        return cls(t, entries)


def diversity_scores(distances, r) -> np.ndarray:
    """Distance to the nearest strictly-more-robust candidate, or max(distances) if none."""
    distances = np.asarray(distances, dtype=np.float64)
    if distances.size == 0:
        return np.zeros(0)
    return kernels.nearest_higher(distances, r, distances.max())


def select_order(e_values, r, ids) -> np.ndarray:
    # descending E, then descending r, then ascending id
    return np.lexsort((np.asarray(ids), -np.asarray(r), -np.asarray(e_values)))


def _filter_class(ids, rows, log_r, z, metric, t):
    if len(ids) == 0:
        raise ValueError("empty candidate class")
    d = pairwise_distances(metric, z[rows], z[rows])
    e = diversity_scores(d, log_r)
    order = select_order(e, log_r, ids)[: min(t, len(ids))]
    return [
        Prototype(int(ids[i]), rank, float(np.exp(log_r[i])), float(e[i]))
        for rank, i in enumerate(order, start=1)
    ]


def filter_diverse(
    candidates: CandidateSets, space, metric: MetricModel, t: int, threads: int = 1
) -> PrototypeBook:
    """Pick up to ``t`` diverse, robust prototypes per class from the candidates."""
    if t < 1:
        raise ValueError("prototype count must be >= 1")
    z = np.asarray(space.embeddings, dtype=np.float64)
    jobs = {}
    for k in candidates.classes:
        members = candidates.members[k]
        if not members:
            raise ValueError(f"class {k} has no candidates")
        if len(members) < t:
            warnings.warn(f"class {k}: only {len(members)} candidates for {t} prototypes", stacklevel=2)
        ids = np.array([m[0] for m in members])
        rows = np.array([m[1] for m in members])
        log_r = np.array([m[2] for m in members])
        jobs[k] = (ids, rows, log_r)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            futures = {k: pool.submit(_filter_class, *job, z, metric, t) for k, job in jobs.items()}
            entries = {k: f.result() for k, f in futures.items()}
    else:
        entries = {k: _filter_class(*job, z, metric, t) for k, job in jobs.items()}
    return PrototypeBook(t, entries)


def greedy_oracle(ids, distances, r_scores, t) -> list:
    """Step-by-step greedy selection written without the cached score array.

    Starts from the most robust candidate (smallest id on ties), then
    repeatedly appends the remaining candidate whose nearest more-robust
    candidate is farthest away. Candidates with no more-robust neighbour count
    as infinitely far. Ties go to higher robustness, then smaller id.
    """
    ids = [int(i) for i in ids]
    r = [float(v) for v in r_scores]
    n = len(ids)
    first = min(range(n), key=lambda i: (-r[i], ids[i]))
    chosen = [first]
    remaining = [i for i in range(n) if i != first]
    while len(chosen) < min(t, n):
        best, best_key = None, None
        for i in remaining:
            value = float("inf")
            for j in range(n):
                if r[j] > r[i] and distances[i][j] < value:
                    value = float(distances[i][j])
            key = (value, r[i], -ids[i])
            if best_key is None or key > best_key:
                best, best_key = i, key
        chosen.append(best)
        remaining.remove(best)
    return [ids[i] for i in chosen]
