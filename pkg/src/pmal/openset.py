"""Known/unknown scoring, exact AUROC and evaluation reports.

Scores are oriented so that larger means "more likely known"; knowns are the
positive class of the ROC.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .backbone import MlpModel, embed, forward_batch
from .datastore import LabeledDataset, ensure_parent
from .mining import PrototypeBook
from .protolearn import class_distances, prototype_embeddings


@dataclass(frozen=True, eq=False)
class OsrScores:
    sample_ids: np.ndarray
    is_known: np.ndarray
    scores: np.ndarray
    predicted: np.ndarray

    def __post_init__(self):
        n = len(self.scores)
        for name in ("sample_ids", "is_known", "predicted"):
            if len(getattr(self, name)) != n:
                raise ValueError("all score fields need one entry per sample")
        if not np.all(np.isfinite(self.scores)):
            raise ValueError("rejection scores must be finite")

    def __len__(self):
        return len(self.scores)

    @classmethod
    def concat(cls, parts):
        parts = list(parts)
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in ("sample_ids", "is_known", "scores", "predicted")))


@dataclass
class OsrReport:
    rule: str
    closed_set_accuracy: float
    auroc: float
    roc_points: list = field(default_factory=list)
    n_known: int = 0
    n_unknown: int = 0

    def as_text(self) -> str:
        return (
            f"rule = {self.rule}\n"
            f"accuracy = {self.closed_set_accuracy:.6f}\n"
            f"auroc = {self.auroc:.6f}\n"
            f"n_known = {self.n_known}\n"
            f"n_unknown = {self.n_unknown}\n"
        )

    def write(self, path):
        ensure_parent(path).write_text(self.as_text(), encoding="utf-8")

    def write_roc_csv(self, path):
        path = ensure_parent(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["threshold", "fpr", "tpr"])
            for fpr, tpr, thr in self.roc_points:
                w.writerow([repr(float(thr)), repr(float(fpr)), repr(float(tpr))])

    def write_roc_svg(self, path, size=320):
        pad = 30
        span = size - 2 * pad
        pts = " ".join(f"{pad + fpr * span:.2f},{size - pad - tpr * span:.2f}" for fpr, tpr, _ in self.roc_points)
        svg = (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}">\n'
            f'<rect x="{pad}" y="{pad}" width="{span}" height="{span}" fill="none" stroke="#999"/>\n'
            f'<line x1="{pad}" y1="{size - pad}" x2="{size - pad}" y2="{pad}" stroke="#ccc" stroke-dasharray="4"/>\n'
            f'<polyline points="{pts}" fill="none" stroke="#1f5fa8" stroke-width="2"/>\n'
            f'<text x="{pad}" y="{pad - 8}" font-size="12">{self.rule.upper()} AUROC {self.auroc:.4f}</text>\n'
            f'<text x="{size / 2}" y="{size - 8}" font-size="11" text-anchor="middle">FPR</text>\n'
            f'<text x="10" y="{size / 2}" font-size="11">TPR</text>\n'
            "</svg>\n"
        )
        ensure_parent(path).write_text(svg, encoding="utf-8")


def score_pr(model: MlpModel, dataset: LabeledDataset, is_known: bool) -> OsrScores:
    """Maximum softmax probability as the score, argmax as the prediction."""
    _, _, probs = forward_batch(model, dataset.features)
    return OsrScores(
        dataset.ids.copy(),
        np.full(dataset.n, bool(is_known)),
        probs.max(axis=1),
        np.argmax(probs, axis=1),
    )


def score_dr(
    model: MlpModel,
    proto_embeds,
    dataset: LabeledDataset,
    is_known: bool,
    mode: str = "attention",
    scale_dim=None,
) -> OsrScores:
    """Negative distance to the closest prototype set; that set's class is the prediction."""
    z = embed(model, dataset.features)
    dist = class_distances(z, proto_embeds, mode, scale_dim)
    classes = np.array(proto_embeds.classes)
    return OsrScores(
        dataset.ids.copy(),
        np.full(dataset.n, bool(is_known)),
        -dist.min(axis=1),
        classes[np.argmin(dist, axis=1)],
    )


def _split(scores: OsrScores):
    s = np.asarray(scores.scores, dtype=np.float64)
    known = np.asarray(scores.is_known, dtype=bool)
    pos, neg = s[known], s[~known]
    if len(pos) == 0 or len(neg) == 0:
        raise ValueError("AUROC needs at least one known and one unknown sample")
    return pos, neg


def auroc(scores: OsrScores) -> float:
    """Probability that a random known outscores a random unknown, ties counted half."""
    pos, neg = _split(scores)
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[: len(pos)].sum() - len(pos) * (len(pos) + 1) / 2.0
    return float(u / (len(pos) * len(neg)))


def roc_points(scores: OsrScores) -> list:
    """(fpr, tpr, threshold) at every distinct threshold, from (0, 0) to (1, 1)."""
    pos, neg = _split(scores)
    s = np.concatenate([pos, neg])
    known = np.concatenate([np.ones(len(pos), bool), np.zeros(len(neg), bool)])
    order = np.argsort(-s, kind="mergesort")
    s, known = s[order], known[order]
    tp = np.cumsum(known)
    fp = np.cumsum(~known)
    last = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    points = [(0.0, 0.0, float("inf"))]
    for i in last:
        points.append((fp[i] / len(neg), tp[i] / len(pos), float(s[i])))
    return points


def trapezoid_area(points) -> float:
    fpr = np.array([p[0] for p in points])
    tpr = np.array([p[1] for p in points])
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


def evaluate(
    model: MlpModel,
    known_test: LabeledDataset,
    unknown_test: LabeledDataset,
    rule: str = "dr",
    book: PrototypeBook | None = None,
    train: LabeledDataset | None = None,
    mode: str = "attention",
    scale_dim=None,
) -> OsrReport:
    """Closed-set accuracy on knowns and known-vs-unknown AUROC for one rule."""
    rule = rule.lower()
    if known_test.n == 0 or unknown_test.n == 0:
        raise ValueError("known and unknown test sets must be non-empty")
    if rule == "pr":
        parts = [score_pr(model, known_test, True), score_pr(model, unknown_test, False)]
    elif rule == "dr":
        if book is None or train is None:
            raise ValueError("distance rejection needs the prototype book and its training set")
        pe = prototype_embeddings(model, train, book)
        parts = [
            score_dr(model, pe, known_test, True, mode, scale_dim),
            score_dr(model, pe, unknown_test, False, mode, scale_dim),
        ]
    else:
        raise ValueError(f"unknown rule {rule!r}")
    acc = float(np.mean(parts[0].predicted == known_test.labels))
    scores = OsrScores.concat(parts)
    return OsrReport(rule, acc, auroc(scores), roc_points(scores), known_test.n, unknown_test.n)


def read_report(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    for line in lines:
        if "=" in line:
            key, value = (s.strip() for s in line.split("=", 1))
            try:
                out[key] = float(value)
            except ValueError:
                out[key] = value
    return out
