"""Prototype margin loss and the phase-two training loop.

Prototype embeddings are recomputed from the fixed prototype samples with the
current parameters and are treated as constants in each step: no gradient
flows through them.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .backbone import MlpModel, TrainConfig, embed, fit, softmax
from .datastore import LabeledDataset, ensure_parent
from .mining import PrototypeBook

log = logging.getLogger(__name__)

MODES = ("attention", "nearest")


@dataclass(frozen=True)
class ProtoLossConfig:
    margin: float = 0.5
    weight: float = 1.0
    distance_mode: str = "attention"
    refresh_policy: str = "per_step"
    # None -> embedding dimension
    scale_dim: int | None = None

    def __post_init__(self):
        if self.margin <= 0:
            raise ValueError("margin must be positive")
        if self.weight < 0:
            raise ValueError("loss weight must be >= 0")
        if self.distance_mode not in MODES:
            raise ValueError(f"distance_mode must be one of {MODES}")
        if self.refresh_policy not in ("per_step", "per_epoch"):
            raise ValueError("refresh_policy must be per_step or per_epoch")
        if self.scale_dim is not None and self.scale_dim <= 0:
            raise ValueError("scale_dim must be positive")


@dataclass
class PrototypeEmbeddings:
    """Class -> D x T matrix whose columns embed that class's prototype samples."""

    matrices: dict
    model_version: int = 0

    @property
    def classes(self):
        return sorted(self.matrices)


def prototype_embeddings(model: MlpModel, dataset: LabeledDataset, book: PrototypeBook, version: int = 0):
    mats = {}
    for k in book.classes:
        rows = dataset.index_of(book.ids(k))
        mats[k] = embed(model, dataset.features[rows]).T
    return PrototypeEmbeddings(mats, version)


# ---------------------------------------------------------------------------
# distances


def _check_norm(norm, what):
    if np.any(norm == 0):
        raise ValueError(f"zero-norm {what}: cosine distance undefined")


def set_distance_with_grad(z, protos, mode="attention", scale_dim=None):
    """Point-to-set distances for a batch and their gradients w.r.t. the points.

    Args:
        z: (B, D) embeddings.
        protos: (D, T) prototype embeddings, held constant.
    Returns:
        (B,) distances in [0, 2] and (B, D) gradients.
    """
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    p = np.asarray(protos, dtype=np.float64)
    if p.ndim != 2 or p.shape[0] != z.shape[1] or p.shape[1] < 1:
        raise ValueError("prototype matrix must be D x T with T >= 1")
    nz = np.linalg.norm(z, axis=1)
    _check_norm(nz, "embedding")
    if mode == "attention":
        scale = math.sqrt(scale_dim if scale_dim is not None else z.shape[1])
        a = softmax(z @ p / scale)
        y = a @ p.T
        ny = np.linalg.norm(y, axis=1)
        _check_norm(ny, "attended prototype")
        cos = np.sum(z * y, axis=1) / (nz * ny)
        dcos_dz = y / (nz * ny)[:, None] - (cos / nz**2)[:, None] * z
        dcos_dy = z / (nz * ny)[:, None] - (cos / ny**2)[:, None] * y
        dcos_da = dcos_dy @ p
        dcos_ds = a * (dcos_da - np.sum(a * dcos_da, axis=1, keepdims=True))
        grad = -(dcos_dz + dcos_ds @ p.T / scale)
    elif mode == "nearest":
        npn = np.linalg.norm(p, axis=0)
        _check_norm(npn, "prototype")
        cos_all = (z @ p) / np.outer(nz, npn)
        best = np.argmax(cos_all, axis=1)
        cos = cos_all[np.arange(len(z)), best]
        pb = p[:, best].T
        grad = -(pb / (nz * npn[best])[:, None] - (cos / nz**2)[:, None] * z)
    else:
        raise ValueError(f"unknown distance mode {mode!r}")
    d = np.clip(1.0 - cos, 0.0, 2.0)
    return d, grad


def point_to_set_distance(z, protos, mode="attention", scale_dim=None) -> float:
    d, _ = set_distance_with_grad(np.asarray(z)[None, :], protos, mode, scale_dim)
    return float(d[0])


def class_distances(z, proto_embeds: PrototypeEmbeddings, mode="attention", scale_dim=None, with_grad=False):
    """Distances (B, K') to every class set, columns ordered by ``proto_embeds.classes``."""
    classes = proto_embeds.classes
    out = [set_distance_with_grad(z, proto_embeds.matrices[k], mode, scale_dim) for k in classes]
    dist = np.stack([d for d, _ in out], axis=1)
    if with_grad:
        return dist, np.stack([g for _, g in out], axis=1)
    return dist


# ---------------------------------------------------------------------------
# loss


def prototype_loss(z, labels, proto_embeds: PrototypeEmbeddings, cfg: ProtoLossConfig, with_grad=False):
    """Mean hinge ``[d(own set) - d(closest other set) + margin]_+``.

    Returns (loss, rival class per sample) and, if ``with_grad``, the (B, D)
    gradient of the unweighted loss.
    """
    classes = np.array(proto_embeds.classes)
    if len(classes) < 2:
        raise ValueError("need prototype sets for at least two classes")
    labels = np.asarray(labels, dtype=np.int64)
    col = np.searchsorted(classes, labels)
    if np.any(col >= len(classes)) or np.any(classes[np.minimum(col, len(classes) - 1)] != labels):
        raise ValueError("every label needs a prototype set")
    res = class_distances(z, proto_embeds, cfg.distance_mode, cfg.scale_dim, with_grad)
    dist, grads = res if with_grad else (res, None)
    b = len(labels)
    rows = np.arange(b)
    others = dist.copy()
    others[rows, col] = np.inf
    rival_col = np.argmin(others, axis=1)
    hinge = dist[rows, col] - dist[rows, rival_col] + cfg.margin
    loss = float(np.mean(np.maximum(hinge, 0.0)))
    rivals = classes[rival_col]
    if not with_grad:
        return loss, rivals
    active = (hinge > 0).astype(np.float64)[:, None]
    g = active * (grads[rows, col] - grads[rows, rival_col]) / b
    return loss, rivals, g


# ---------------------------------------------------------------------------
# training


@dataclass
class LossCurve:
    rows: list = field(default_factory=list)

    def add(self, step, l_cls, l_p, l_total):
        self.rows.append((step, l_cls, l_p, l_total))

    def write_csv(self, path):
        path = ensure_parent(path)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["step", "L_cls", "L_p", "L_total"])
            for step, a, b, c in self.rows:
                w.writerow([step, repr(a), repr(b), repr(c)])


def optimize_embedding(
    model: MlpModel,
    dataset: LabeledDataset,
    book: PrototypeBook,
    train_cfg: TrainConfig,
    proto_cfg: ProtoLossConfig = ProtoLossConfig(),
    curve: LossCurve | None = None,
) -> MlpModel:
    """Continue training ``model`` on cross-entropy plus the weighted prototype loss."""
    missing = set(range(dataset.class_count)) - set(book.classes)
    if missing:
        raise ValueError(f"no prototypes for classes {sorted(missing)}")
    state = {"embeds": None, "epoch": -1, "l_p": 0.0}

    def hook_for_step(current, epoch, step):
        if state["embeds"] is None or proto_cfg.refresh_policy == "per_step" or epoch != state["epoch"]:
            state["embeds"] = prototype_embeddings(current, dataset, book, version=step)
            state["epoch"] = epoch

        def hook(z, y):
            l_p, _, g = prototype_loss(z, y, state["embeds"], proto_cfg, with_grad=True)
            state["l_p"] = l_p
            return proto_cfg.weight * l_p, proto_cfg.weight * g

        return hook

    def on_step(step, total):
        if curve is not None:
            l_p = state["l_p"]
            curve.add(step, total - proto_cfg.weight * l_p, l_p, total)

    return fit(model, dataset, train_cfg, hook_for_step, on_step)
