"""Datasets, embedding spaces and their on-disk container.

Every matrix lives in its own file: a 16 byte little-endian header
(``PMAL``, version, rows, cols) followed by row-major float32 values. A
directory groups the matrices under a ``manifest.json``.
"""
from __future__ import annotations

import json
import os
import shutil
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .kernels import fnv1a64

MAGIC = b"PMAL"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sIII")


class ArchiveError(ValueError):
    """Raised for any malformed, inconsistent or non-finite archive content."""


class AlignmentError(ValueError):
    """Raised when embedding runs do not describe the same samples."""


# ---------------------------------------------------------------------------
# value types


@dataclass(frozen=True, eq=False)
class LabeledDataset:
    """Feature vectors with class labels and stable, strictly increasing ids."""

    ids: np.ndarray
    features: np.ndarray
    labels: np.ndarray
    class_count: int

    def __post_init__(self):
        ids = np.ascontiguousarray(self.ids, dtype=np.int64)
        features = np.ascontiguousarray(self.features, dtype=np.float32)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if features.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        n = features.shape[0]
        if ids.shape != (n,) or labels.shape != (n,):
            raise ValueError("ids, labels and features disagree on sample count")
        if n > 1 and np.any(np.diff(ids) <= 0):
            raise ValueError("sample ids must be unique and strictly increasing")
        if self.class_count < 1:
            raise ValueError("class_count must be positive")
        if n and (labels.min() < 0 or labels.max() >= self.class_count):
            raise ValueError(f"labels must lie in 0..{self.class_count - 1}")
        if not np.all(np.isfinite(features)):
            raise ValueError("features contain non-finite entries")
        for name, arr in (("ids", ids), ("features", features), ("labels", labels)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def __len__(self):
        return self.n

    def checksum(self) -> str:
        h = fnv1a64(self.features.astype("<f4").tobytes())
        h = fnv1a64(self.labels.astype("<u4").tobytes(), h)
        return f"{h:016x}"

    def index_of(self, sample_ids) -> np.ndarray:
        """Row positions of the given sample ids; raises KeyError on unknown ids."""
        sample_ids = np.asarray(sample_ids, dtype=np.int64)
        pos = np.searchsorted(self.ids, sample_ids)
        pos = np.clip(pos, 0, max(self.n - 1, 0))
        if self.n == 0 or np.any(self.ids[pos] != sample_ids):
            missing = sample_ids[(self.n == 0) | (self.ids[pos] != sample_ids)]
            raise KeyError(f"unknown sample ids: {missing[:5].tolist()}")
        return pos

    def subset(self, rows) -> "LabeledDataset":
        rows = np.sort(np.asarray(rows, dtype=np.int64))
        return LabeledDataset(self.ids[rows], self.features[rows], self.labels[rows], self.class_count)

    def class_rows(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.labels == k)


@dataclass(frozen=True, eq=False)
class EmbeddingSpace:
    """One trained run: per-sample embeddings plus the softmax head.

    Arrays are kept as float32 (archive-native) unless float64 is passed in,
    which analytic fixtures use to stay clear of rounding noise.
    """

    run_id: int
    embeddings: np.ndarray
    head_weights: np.ndarray
    head_bias: np.ndarray
    source_checksum: str

    def __post_init__(self):
        arrays = {}
        for name in ("embeddings", "head_weights", "head_bias"):
            arr = np.asarray(getattr(self, name))
            if arr.dtype not in (np.float32, np.float64):
                arr = arr.astype(np.float64)
            arrays[name] = np.ascontiguousarray(arr)
        z, w, b = arrays["embeddings"], arrays["head_weights"], arrays["head_bias"]
        if z.ndim != 2 or w.ndim != 2 or b.ndim != 1:
            raise ValueError("embeddings and head_weights must be matrices, head_bias a vector")
        if w.shape[0] != z.shape[1]:
            raise ValueError(f"head_weights has {w.shape[0]} rows, embeddings have {z.shape[1]} columns")
        if b.shape[0] != w.shape[1]:
            raise ValueError(f"head_bias has {b.shape[0]} entries, head has {w.shape[1]} classes")
        for name, arr in arrays.items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} contains non-finite entries")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]

    @property
    def d(self) -> int:
        return self.embeddings.shape[1]

    @property
    def k(self) -> int:
        return self.head_weights.shape[1]

    def content_hash(self) -> str:
        h = fnv1a64(self.embeddings.astype("<f4").tobytes())
        h = fnv1a64(self.head_weights.astype("<f4").tobytes(), h)
        h = fnv1a64(self.head_bias.astype("<f4").tobytes(), h)
        return f"{h:016x}"

    def same_as(self, other: "EmbeddingSpace") -> bool:
        return (
            self.run_id == other.run_id
            and self.source_checksum == other.source_checksum
            and all(
                a.shape == b.shape and a.tobytes() == b.tobytes()
                for a, b in (
                    (self.embeddings, other.embeddings),
                    (self.head_weights, other.head_weights),
                    (self.head_bias, other.head_bias),
                )
            )
        )


@dataclass(frozen=True)
class RunBundle:
    runs: tuple = field(default_factory=tuple)

    @property
    def u(self) -> int:
        return len(self.runs)

    @property
    def source_checksum(self) -> str:
        return self.runs[0].source_checksum

    def __iter__(self):
        return iter(self.runs)

    def __getitem__(self, i):
        return self.runs[i]


def align_runs(spaces) -> RunBundle:
    """Bundle two or more runs after checking they embed the same samples."""
    spaces = list(spaces)
    if len(spaces) < 2:
        raise AlignmentError(f"need at least 2 runs, got {len(spaces)}")
    first = spaces[0]
    for s in spaces[1:]:
        if s.source_checksum != first.source_checksum:
            raise AlignmentError(
                f"run {s.run_id} was built from dataset {s.source_checksum}, "
                f"run {first.run_id} from {first.source_checksum}"
            )
        if (s.n, s.d, s.k) != (first.n, first.d, first.k):
            raise AlignmentError(
                f"run {s.run_id} has shape (n={s.n}, d={s.d}, k={s.k}), "
                f"expected (n={first.n}, d={first.d}, k={first.k})"
            )
    return RunBundle(tuple(spaces))


# ---------------------------------------------------------------------------
# matrix container


def write_matrix(path, matrix) -> None:
    m = np.asarray(matrix)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ValueError("only vectors and matrices can be stored")
    data = np.ascontiguousarray(m, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, data.shape[0], data.shape[1]))
        fh.write(data.tobytes())


def read_matrix(path) -> np.ndarray:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ArchiveError(f"cannot read {path}: {exc}") from exc
    if len(raw) < _HEADER.size:
        raise ArchiveError(f"{path.name}: truncated header")
    magic, version, rows, cols = _HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise ArchiveError(f"{path.name}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ArchiveError(f"{path.name}: unsupported version {version}")
    expected = _HEADER.size + 4 * rows * cols
    if len(raw) != expected:
        raise ArchiveError(
            f"{path.name}: header says {rows}x{cols} ({expected} bytes) but file has {len(raw)} bytes"
        )
    out = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(rows, cols)
    return out.astype(np.float32)


def write_u32(path, values) -> None:
    np.ascontiguousarray(values, dtype="<u4").tofile(path)


def read_u32(path, count: int) -> np.ndarray:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) != 4 * count:
        raise ArchiveError(f"{path.name}: expected {count} u32 values, found {len(raw) / 4:g}")
    return np.frombuffer(raw, dtype="<u4").astype(np.int64)


def _prepare_dir(path, force: bool) -> Path:
    path = Path(path)
    if path.exists():
        if not force:
            raise FileExistsError(f"{path} exists; pass force=True to overwrite")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()
    path.mkdir(parents=True)
    return path


def _read_manifest(path: Path, kind: str) -> dict:
    try:
        manifest = json.loads((path / "manifest.json").read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ArchiveError(f"{path}: no manifest.json") from exc
    except (OSError, json.JSONDecodeError) as exc:
        raise ArchiveError(f"{path}: unreadable manifest ({exc})") from exc
    if manifest.get("format") != "PMAL":
        raise ArchiveError(f"{path}: manifest format is {manifest.get('format')!r}, expected 'PMAL'")
    if manifest.get("version") != FORMAT_VERSION:
        raise ArchiveError(f"{path}: unsupported manifest version {manifest.get('version')!r}")
    if manifest.get("kind", kind) != kind:
        raise ArchiveError(f"{path}: manifest describes a {manifest.get('kind')!r}, expected {kind!r}")
    return manifest


def _load_entry(path: Path, manifest: dict, name: str, rows: int, cols: int) -> np.ndarray:
    try:
        entry = manifest[name]
        file = entry["file"]
        if (entry["rows"], entry["cols"]) != (rows, cols):
            raise ArchiveError(
                f"manifest entry {name} is {entry['rows']}x{entry['cols']}, expected {rows}x{cols}"
            )
    except (KeyError, TypeError) as exc:
        raise ArchiveError(f"manifest entry {name!r} missing or malformed") from exc
    m = read_matrix(path / file)
    if m.shape != (rows, cols):
        raise ArchiveError(f"{file}: stored shape {m.shape[0]}x{m.shape[1]}, expected {rows}x{cols}")
    if not np.all(np.isfinite(m)):
        raise ArchiveError(f"{file}: non-finite entries")
    return m


# ---------------------------------------------------------------------------
# embedding archives


def write_embedding_archive(space: EmbeddingSpace, path, force: bool = False) -> None:
    """Write ``space`` as a directory archive at ``path``."""
    for name in ("embeddings", "head_weights", "head_bias"):
        arr = getattr(space, name)
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"{name} contains non-finite entries")
        if arr.dtype != np.float32 and not np.array_equal(arr.astype(np.float32), arr):
            warnings.warn(f"{name} is rounded to float32 on write", stacklevel=2)
    path = _prepare_dir(path, force)
    n, d, k = space.n, space.d, space.k
    manifest = {
        "format": "PMAL",
        "version": FORMAT_VERSION,
        "kind": "embedding",
        "run_id": int(space.run_id),
        "n": n,
        "d": d,
        "k": k,
        "source_checksum": space.source_checksum,
        "Z": {"file": "Z.bin", "rows": n, "cols": d},
        "W": {"file": "W.bin", "rows": d, "cols": k},
        "b": {"file": "b.bin", "rows": 1, "cols": k},
    }
    write_matrix(path / "Z.bin", space.embeddings)
    write_matrix(path / "W.bin", space.head_weights)
    write_matrix(path / "b.bin", space.head_bias)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")


def read_embedding_archive(path) -> EmbeddingSpace:
    path = Path(path)
    manifest = _read_manifest(path, "embedding")
    try:
        n, d, k = int(manifest["n"]), int(manifest["d"]), int(manifest["k"])
        run_id = int(manifest["run_id"])
        checksum = str(manifest["source_checksum"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ArchiveError(f"{path}: manifest lacks n/d/k/run_id/source_checksum") from exc
    z = _load_entry(path, manifest, "Z", n, d)
    w = _load_entry(path, manifest, "W", d, k)
    b = _load_entry(path, manifest, "b", 1, k)
    try:
        return EmbeddingSpace(run_id, z, w, b.reshape(k), checksum)
    except ValueError as exc:
        raise ArchiveError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# datasets


def write_dataset(dataset: LabeledDataset, path, force: bool = False) -> None:
    path = _prepare_dir(path, force)
    n, f = dataset.features.shape
    if n and dataset.ids.max() > np.iinfo(np.uint32).max:
        raise ValueError("sample ids must fit in u32")
    manifest = {
        "format": "PMAL",
        "version": FORMAT_VERSION,
        "kind": "dataset",
        "n": n,
        "f": f,
        "k": dataset.class_count,
        "checksum": dataset.checksum(),
        "X": {"file": "X.bin", "rows": n, "cols": f},
        "labels": {"file": "labels.u32", "count": n},
        "ids": {"file": "ids.u32", "count": n},
    }
    write_matrix(path / "X.bin", dataset.features.reshape(n, f))
    write_u32(path / "labels.u32", dataset.labels)
    write_u32(path / "ids.u32", dataset.ids)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2), encoding="utf-8")


def read_dataset(path) -> LabeledDataset:
    path = Path(path)
    manifest = _read_manifest(path, "dataset")
    try:
        n, f, k = int(manifest["n"]), int(manifest["f"]), int(manifest["k"])
        labels_file = manifest["labels"]["file"]
        ids_file = manifest["ids"]["file"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ArchiveError(f"{path}: manifest lacks n/f/k/labels/ids") from exc
    x = _load_entry(path, manifest, "X", n, f)
    labels = read_u32(path / labels_file, n)
    ids = read_u32(path / ids_file, n)
    try:
        ds = LabeledDataset(ids, x, labels, k)
    except ValueError as exc:
        raise ArchiveError(f"{path}: {exc}") from exc
    if "checksum" in manifest and manifest["checksum"] != ds.checksum():
        raise ArchiveError(f"{path}: checksum mismatch (manifest {manifest['checksum']}, data {ds.checksum()})")
    return ds


def ensure_parent(path) -> Path:
    path = Path(path)
    os.makedirs(path.parent, exist_ok=True)
    return path
