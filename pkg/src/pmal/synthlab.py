"""Synthetic data with known per-sample noise, plus an analytic two-run pair.

Every sample is its mode mean plus isotropic Gaussian noise. A fixed fraction
of each class gets the larger noise scale, so sample quality is known exactly.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .datastore import EmbeddingSpace, LabeledDataset, RunBundle, align_runs, ensure_parent


@dataclass(frozen=True)
class SynthSpec:
    k_known: int = 10
    k_unknown: int = 5
    feature_dim: int = 16
    samples_per_class: int = 200
    class_mean_radius: float = 10.0
    sigma_lo: float = 0.5
    sigma_hi: float = 2.5
    degraded_fraction: float = 0.3
    modes_per_class: int = 1
    # spread of mode means around their class centre; 0 puts modes anywhere on the sphere
    mode_spread: float = 0.0
    rng_seed: int = 0

    def __post_init__(self):
        for name in ("k_known", "feature_dim", "samples_per_class", "modes_per_class"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.k_unknown < 0:
            raise ValueError("k_unknown must be >= 0")
        if self.class_mean_radius <= 0:
            raise ValueError("class_mean_radius must be positive")
        if not 0 < self.sigma_lo <= self.sigma_hi:
            raise ValueError("need 0 < sigma_lo <= sigma_hi")
        if not 0 <= self.degraded_fraction <= 1:
            raise ValueError("degraded_fraction must be in [0, 1]")
        if self.mode_spread < 0:
            raise ValueError("mode_spread must be >= 0")


@dataclass(frozen=True, eq=False)
class SynthTruth:
    sample_ids: np.ndarray
    labels: np.ndarray
    modes: np.ndarray
    sigmas: np.ndarray
    known: np.ndarray
    # (classes, modes, F); unknown classes follow the known ones
    mode_means: np.ndarray
    k_known: int

    def for_dataset(self, dataset: LabeledDataset) -> "SynthTruth":
        pos = np.searchsorted(self.sample_ids, dataset.ids)
        return SynthTruth(
            self.sample_ids[pos],
            self.labels[pos],
            self.modes[pos],
            self.sigmas[pos],
            self.known[pos],
            self.mode_means,
            self.k_known,
        )

    def clean_features(self) -> np.ndarray:
        cls = np.where(self.known, self.labels, self.labels + self.k_known)
        return self.mode_means[cls, self.modes]

    def write_csv(self, path):
        path = ensure_parent(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["sample_id", "label", "mode", "sigma"])
            for row in zip(self.sample_ids, self.labels, self.modes, self.sigmas):
                w.writerow([int(row[0]), int(row[1]), int(row[2]), repr(float(row[3]))])


def _sphere(rng, count, dim, radius):
    v = rng.standard_normal((count, dim))
    return radius * v / np.linalg.norm(v, axis=1, keepdims=True)


def generate(spec: SynthSpec):
    """Return (known dataset, unknown dataset, truth)."""
    rng = np.random.default_rng(spec.rng_seed)
    n_cls = spec.k_known + spec.k_unknown
    m, f = spec.modes_per_class, spec.feature_dim
    if spec.mode_spread > 0:
        centres = _sphere(rng, n_cls, f, spec.class_mean_radius)
        means = centres[:, None, :] + _sphere(rng, n_cls * m, f, spec.mode_spread).reshape(n_cls, m, f)
    else:
        means = _sphere(rng, n_cls * m, f, spec.class_mean_radius).reshape(n_cls, m, f)

    per = spec.samples_per_class
    n_bad = int(round(spec.degraded_fraction * per))
    feats, labels, modes, sigmas, known = [], [], [], [], []
    for c in range(n_cls):
        mode = np.arange(per) % m
        sigma = np.full(per, spec.sigma_lo)
        sigma[rng.permutation(per)[:n_bad]] = spec.sigma_hi
        noise = rng.standard_normal((per, f)) * sigma[:, None]
        feats.append(means[c, mode] + noise)
        is_known = c < spec.k_known
        labels.append(np.full(per, c if is_known else c - spec.k_known))
        modes.append(mode)
        sigmas.append(sigma)
        known.append(np.full(per, is_known))
    feats = np.concatenate(feats)
    labels = np.concatenate(labels)
    known = np.concatenate(known)
    ids = np.arange(len(feats))
    truth = SynthTruth(ids, labels, np.concatenate(modes), np.concatenate(sigmas), known, means, spec.k_known)
    known_ds = LabeledDataset(ids[known], feats[known], labels[known], spec.k_known)
    unknown_ds = LabeledDataset(ids[~known], feats[~known], labels[~known], max(spec.k_unknown, 1))
    return known_ds, unknown_ds, truth


def holdout(dataset: LabeledDataset, test_fraction: float, seed: int):
    """Stratified seeded split into (train, test)."""
    rng = np.random.default_rng(seed)
    test_rows = []
    for k in range(dataset.class_count):
        rows = dataset.class_rows(k)
        n_test = int(round(test_fraction * len(rows)))
        test_rows.append(rng.permutation(rows)[:n_test])
    test_rows = np.sort(np.concatenate(test_rows))
    train_rows = np.setdiff1d(np.arange(dataset.n), test_rows)
    return dataset.subset(train_rows), dataset.subset(test_rows)


def _random_map(rng, dim, max_cond=1e3):
    while True:
        q = rng.standard_normal((dim, dim))
        if np.linalg.cond(q) < max_cond:
            return q


def analytic_run_pair(
    dataset: LabeledDataset, truth: SynthTruth, seed: int, runs: int = 2, shared_noise: bool = False
) -> RunBundle:
    """Two (or more) embedding spaces standing in for independently trained models.

    Run ``u`` embeds ``x_u = clean + noise_u`` as ``x_u @ Q_u`` with a random
    well-conditioned map ``Q_u``; its head is ``Q_u^{-1}`` applied to the class
    means, which keeps logits and head-derived distances identical across runs.
    Noise is redrawn per run at each sample's recorded scale unless
    ``shared_noise`` (then the dataset's own noise is reused; a negative control).
    """
    t = truth.for_dataset(dataset)
    rng = np.random.default_rng(seed)
    clean = t.clean_features()
    f = dataset.feature_dim
    class_means = truth.mode_means[: dataset.class_count].mean(axis=1)
    spaces = []
    for u in range(runs):
        q = _random_map(rng, f)
        if shared_noise:
            x = dataset.features.astype(np.float64)
        else:
            x = clean + rng.standard_normal(clean.shape) * t.sigmas[:, None]
        w = np.linalg.solve(q, class_means.T)
        spaces.append(EmbeddingSpace(u + 1, x @ q, w, np.zeros(dataset.class_count), dataset.checksum()))
    return align_runs(spaces)
