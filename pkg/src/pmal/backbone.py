"""One-hidden-layer perceptron with a softmax head and hand-written backprop.

Layout: ``x -> relu(x W1 + b1) -> z = h W2 + b2 -> logits = z W + b``.
``z`` is the embedding that the prototype machinery works on.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .datastore import (
    ArchiveError,
    EmbeddingSpace,
    LabeledDataset,
    _prepare_dir,
    _read_manifest,
    read_matrix,
    write_matrix,
)

log = logging.getLogger(__name__)

PARAM_NAMES = ("hidden_weights", "hidden_bias", "embed_weights", "embed_bias", "head_weights", "head_bias")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class MlpModel:
    layer_sizes: tuple
    class_count: int
    rng_seed: int
    params: dict = field(repr=False)
    # filled in by fit(); not persisted
    history: list = field(default_factory=list, repr=False, compare=False)

    @property
    def input_dim(self) -> int:
        return self.layer_sizes[0]

    @property
    def embed_dim(self) -> int:
        return self.layer_sizes[2]

    def copy(self) -> "MlpModel":
        return replace(self, params={k: v.copy() for k, v in self.params.items()}, history=list(self.history))

    def n_params(self) -> int:
        return sum(v.size for v in self.params.values())


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    learning_rate: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 20
    rng_seed: int = 0
    hidden_dim: int = 64
    embed_dim: int = 16

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        for name in ("batch_size", "learning_rate", "lr_decay_factor", "lr_decay_every", "hidden_dim", "embed_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")


def _glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


def init_model(input_dim: int, hidden_dim: int, embed_dim: int, class_count: int, seed: int) -> MlpModel:
    rng = np.random.default_rng(seed)
    params = {
        "hidden_weights": _glorot(rng, input_dim, hidden_dim),
        "hidden_bias": np.zeros(hidden_dim),
        "embed_weights": _glorot(rng, hidden_dim, embed_dim),
        "embed_bias": np.zeros(embed_dim),
        "head_weights": _glorot(rng, embed_dim, class_count),
        "head_bias": np.zeros(class_count),
    }
    return MlpModel((input_dim, hidden_dim, embed_dim), class_count, seed, params)


def softmax(logits, axis=-1):
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    shifted = logits - np.max(logits, axis=axis, keepdims=True)
    return shifted - np.log(np.sum(np.exp(shifted), axis=axis, keepdims=True))


def _hidden(model, x):
    p = model.params
    pre = x @ p["hidden_weights"] + p["hidden_bias"]
    return pre, np.maximum(pre, 0.0)


def embed(model: MlpModel, features) -> np.ndarray:
    """Embeddings for a batch of feature rows."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ValueError(f"expected rows of dimension {model.input_dim}, got shape {x.shape}")
    _, h = _hidden(model, x)
    return h @ model.params["embed_weights"] + model.params["embed_bias"]


def forward_batch(model: MlpModel, features):
    z = embed(model, features)
    logits = z @ model.params["head_weights"] + model.params["head_bias"]
    return z, logits, softmax(logits)


def forward(model: MlpModel, features):
    """Embedding, logits and class probabilities for one feature vector."""
    x = np.asarray(features, dtype=np.float64)
    if x.shape != (model.input_dim,):
        raise ValueError(f"expected a vector of length {model.input_dim}, got shape {x.shape}")
    z, logits, probs = forward_batch(model, x[None, :])
    return z[0], logits[0], probs[0]


# hook(z, labels) -> (weighted extra loss, d extra / d z)
LossHook = Callable[[np.ndarray, np.ndarray], tuple]


def loss_and_gradients(model: MlpModel, features, labels, extra: Optional[LossHook] = None):
    """Mean cross-entropy (plus an optional embedding-space term) and its gradient.

    ``extra`` receives the batch embeddings and labels and returns the extra
    loss value together with its gradient with respect to the embeddings.
    Weight decay is left to the optimiser.
    """
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("batch must be a non-empty matrix")
    p = model.params
    b = len(x)
    pre, h = _hidden(model, x)
    z = h @ p["embed_weights"] + p["embed_bias"]
    logits = z @ p["head_weights"] + p["head_bias"]
    logp = log_softmax(logits)
    loss = -np.mean(logp[np.arange(b), y])

    dlogits = np.exp(logp)
    dlogits[np.arange(b), y] -= 1.0
    dlogits /= b
    dz = dlogits @ p["head_weights"].T
    if extra is not None:
        extra_loss, extra_dz = extra(z, y)
        loss = loss + extra_loss
        dz = dz + extra_dz
    if not np.isfinite(loss):
        raise TrainingDiverged(f"non-finite loss {loss}")

    dh = dz @ p["embed_weights"].T
    dh[pre <= 0] = 0.0
    grads = {
        "hidden_weights": x.T @ dh,
        "hidden_bias": dh.sum(axis=0),
        "embed_weights": h.T @ dz,
        "embed_bias": dz.sum(axis=0),
        "head_weights": z.T @ dlogits,
        "head_bias": dlogits.sum(axis=0),
    }
    return float(loss), grads


def dataset_loss(model: MlpModel, dataset: LabeledDataset) -> float:
    _, logits, _ = forward_batch(model, dataset.features)
    logp = log_softmax(logits)
    return float(-np.mean(logp[np.arange(dataset.n), dataset.labels]))


def accuracy(model: MlpModel, dataset: LabeledDataset) -> float:
    _, logits, _ = forward_batch(model, dataset.features)
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))


def fit(
    model: MlpModel,
    dataset: LabeledDataset,
    cfg: TrainConfig,
    hook_for_step: Optional[Callable[[MlpModel, int, int], Optional[LossHook]]] = None,
    on_step: Optional[Callable[[int, float], None]] = None,
) -> MlpModel:
    """SGD with momentum and step decay, starting from a copy of ``model``.

    ``hook_for_step(model, epoch, step)`` may return an extra loss hook for the
    upcoming step; it sees the current parameters, so callers can refresh
    anything that depends on them.
    """
    if dataset.n == 0:
        raise ValueError("cannot train on an empty dataset")
    if dataset.feature_dim != model.input_dim or dataset.class_count != model.class_count:
        raise ValueError("dataset dimensions do not match the model")
    model = model.copy()
    rng = np.random.default_rng(cfg.rng_seed)
    velocity = {k: np.zeros_like(v) for k, v in model.params.items()}
    x_all = dataset.features.astype(np.float64)
    y_all = dataset.labels
    batch = min(cfg.batch_size, dataset.n)
    step = 0
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)
        order = rng.permutation(dataset.n)
        running = 0.0
        for start in range(0, dataset.n, batch):
            idx = order[start:start + batch]
            hook = hook_for_step(model, epoch, step) if hook_for_step is not None else None
            loss, grads = loss_and_gradients(model, x_all[idx], y_all[idx], hook)
            for name, param in model.params.items():
                g = grads[name] + cfg.weight_decay * param
                v = velocity[name]
                v *= cfg.momentum
                v += g
                param -= lr * v
                if not np.all(np.isfinite(param)):
                    raise TrainingDiverged(f"parameter {name} became non-finite at epoch {epoch}, step {step}")
            running += loss * len(idx)
            if on_step is not None:
                on_step(step, loss)
            step += 1
        model.history.append(running / dataset.n)
        log.debug("epoch %d lr %.4g loss %.5f", epoch, lr, running / dataset.n)
    return model


def train_classifier(dataset: LabeledDataset, cfg: TrainConfig) -> MlpModel:
    """Train a fresh softmax classifier; deterministic in ``cfg.rng_seed``."""
    if dataset.class_count < 2:
        raise ValueError("need at least two classes")
    model = init_model(dataset.feature_dim, cfg.hidden_dim, cfg.embed_dim, dataset.class_count, cfg.rng_seed)
    initial = dataset_loss(model, dataset)
    model = fit(model, dataset, cfg)
    final = dataset_loss(model, dataset)
    log.info("seed %d: training loss %.4f -> %.4f", cfg.rng_seed, initial, final)
    return model


def extract_embedding_space(model: MlpModel, dataset: LabeledDataset, run_id: int) -> EmbeddingSpace:
    if dataset.feature_dim != model.input_dim or dataset.class_count != model.class_count:
        raise ValueError("dataset dimensions do not match the model")
    z = embed(model, dataset.features)
    return EmbeddingSpace(
        run_id,
        z.astype(np.float32),
        model.params["head_weights"].astype(np.float32),
        model.params["head_bias"].astype(np.float32),
        dataset.checksum(),
    )


# ---------------------------------------------------------------------------
# checkpoints


def save_model(model: MlpModel, path, force: bool = False) -> None:
    path = _prepare_dir(path, force)
    manifest = {
        "format": "PMAL",
        "version": 1,
        "kind": "checkpoint",
        "layer_sizes": list(model.layer_sizes),
        "k": model.class_count,
        "rng_seed": model.rng_seed,
    }
    for name in PARAM_NAMES:
        arr = model.params[name]
        mat = arr.reshape(1, -1) if arr.ndim == 1 else arr
        write_matrix(path / f"{name}.bin", mat)
        manifest[name] = {"file": f"{name}.bin", "rows": mat.shape[0], "cols": mat.shape[1]}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")


def load_model(path) -> MlpModel:
    path = Path(path)
    manifest = _read_manifest(path, "checkpoint")
    try:
        f, h, d = (int(v) for v in manifest["layer_sizes"])
        k = int(manifest["k"])
        seed = int(manifest["rng_seed"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ArchiveError(f"{path}: checkpoint manifest lacks layer_sizes/k/rng_seed") from exc
    shapes = {
        "hidden_weights": (f, h),
        "hidden_bias": (1, h),
        "embed_weights": (h, d),
        "embed_bias": (1, d),
        "head_weights": (d, k),
        "head_bias": (1, k),
    }
    params = {}
    for name, shape in shapes.items():
        m = read_matrix(path / manifest.get(name, {}).get("file", f"{name}.bin"))
        if m.shape != shape:
            raise ArchiveError(f"{path}: {name} is {m.shape}, expected {shape}")
        if not np.all(np.isfinite(m)):
            raise ArchiveError(f"{path}: {name} has non-finite entries")
        params[name] = m.astype(np.float64).reshape(shape if shape[0] != 1 else (shape[1],))
    return MlpModel((f, h, d), k, seed, params)
