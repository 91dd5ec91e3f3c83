"""MNIST IDX files (big-endian) and the known/unknown split used for evaluation."""
from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np

from .datastore import LabeledDataset

_DTYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}
_CODES = {np.dtype(v).newbyteorder(">").str: k for k, v in _DTYPES.items()}


class IdxError(ValueError):
    pass


def _open(path):
    path = Path(path)
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path) -> np.ndarray:
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0:
        raise IdxError(f"{path}: not an IDX file")
    code, ndim = raw[2], raw[3]
    if code not in _DTYPES:
        raise IdxError(f"{path}: unknown element type 0x{code:02x}")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    dtype = np.dtype(_DTYPES[code])
    offset = 4 + 4 * ndim
    count = int(np.prod(dims)) if dims else 0
    if len(raw) - offset != count * dtype.itemsize:
        raise IdxError(f"{path}: payload size does not match dimensions {dims}")
    return np.frombuffer(raw, dtype=dtype, offset=offset).reshape(dims)


def write_idx(path, array) -> None:
    a = np.asarray(array)
    big = a.dtype.newbyteorder(">") if a.dtype.itemsize > 1 else a.dtype
    code = _CODES.get(np.dtype(big).str)
    if code is None:
        raise IdxError(f"dtype {a.dtype} has no IDX code")
    header = bytes([0, 0, code, a.ndim]) + struct.pack(f">{a.ndim}I", *a.shape)
    payload = a.astype(big).tobytes()
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(header + payload)


def load_split(images_path, labels_path):
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxError("image and label counts differ")
    x = images.reshape(images.shape[0], -1).astype(np.float32) / 255.0
    return x, labels.astype(np.int64)


def choose_known(seed: int, n_classes: int = 10, n_known: int = 4) -> list:
    rng = np.random.default_rng(seed)
    return sorted(int(c) for c in rng.choice(n_classes, size=n_known, replace=False))


def _per_class_subset(labels, classes, per_class, rng):
    rows = []
    for c in classes:
        idx = np.flatnonzero(labels == c)
        if per_class is not None and per_class < len(idx):
            idx = np.sort(rng.choice(idx, size=per_class, replace=False))
        rows.append(idx)
    return np.sort(np.concatenate(rows))


def make_osr_split(train_x, train_y, test_x, test_y, known, seed, per_class=None, test_per_class=None):
    """Known-class train/test sets relabelled to 0..len(known)-1, and an unknown test set.

    Sample ids are the row numbers in the source files; test ids are offset by
    the train file length so ids stay unique across the three sets.
    """
    known = sorted(int(c) for c in known)
    if len(set(known)) < 2:
        raise ValueError("need at least two known classes")
    rng = np.random.default_rng(seed)
    remap = {c: i for i, c in enumerate(known)}
    unknown = sorted(set(np.unique(np.concatenate([train_y, test_y])).tolist()) - set(known))
    if not unknown:
        raise ValueError("no classes left over for the unknown set")
    tr = _per_class_subset(train_y, known, per_class, rng)
    te = _per_class_subset(test_y, known, test_per_class, rng)
    un = _per_class_subset(test_y, unknown, test_per_class, rng)
    offset = len(train_y)
    relabel = np.vectorize(remap.get)
    known_train = LabeledDataset(tr, train_x[tr], relabel(train_y[tr]), len(known))
    known_test = LabeledDataset(te + offset, test_x[te], relabel(test_y[te]), len(known))
    umap = {c: i for i, c in enumerate(unknown)}
    unknown_test = LabeledDataset(un + offset, test_x[un], np.vectorize(umap.get)(test_y[un]), len(unknown))
    return known_train, known_test, unknown_test


_MNIST_STEMS = {
    "train_images": ("train-images-idx3-ubyte", "train-images.idx3-ubyte"),
    "train_labels": ("train-labels-idx1-ubyte", "train-labels.idx1-ubyte"),
    "test_images": ("t10k-images-idx3-ubyte", "t10k-images.idx3-ubyte"),
    "test_labels": ("t10k-labels-idx1-ubyte", "t10k-labels.idx1-ubyte"),
}


def find_mnist_files(directory) -> dict:
    """Locate the four standard MNIST IDX files (optionally gzipped) in ``directory``."""
    directory = Path(directory)
    found = {}
    for key, stems in _MNIST_STEMS.items():
        for stem in stems:
            for name in (stem, stem + ".gz"):
                if (directory / name).is_file():
                    found[key] = directory / name
                    break
            if key in found:
                break
        if key not in found:
            raise FileNotFoundError(f"{directory}: no {stems[0]}[.gz]")
    return found


def load_mnist(directory):
    """(train_x, train_y, test_x, test_y) with pixels scaled to [0, 1]."""
    files = find_mnist_files(directory)
    train_x, train_y = load_split(files["train_images"], files["train_labels"])
    test_x, test_y = load_split(files["test_images"], files["test_labels"])
    return train_x, train_y, test_x, test_y
