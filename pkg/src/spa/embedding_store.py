"""On-disk embedding matrices, label files and few-shot reference sets.

An embedding matrix lives in two files: a JSON header ``<name>.json`` and a
raw payload ``<name>.bin`` of little-endian float32 values in row-major
order.  Everything is converted to float64 on load.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    DimensionMismatch,
    MalformedHeader,
    NonFiniteValue,
    OutOfRangeLabel,
    ParseError,
    SizeMismatch,
    ZeroRow,
)

HEADER_FIXED = {"dtype": "f32", "byte_order": "little", "layout": "row-major"}
_F32_LE = np.dtype("<f4")


def data_path_for(header_path) -> Path:
    """Payload path paired with a header path (``x.json`` -> ``x.bin``)."""
    return Path(header_path).with_suffix(".bin")


def _read_header(header_path) -> dict:
    try:
        with open(header_path, "r", encoding="utf-8") as fh:
            header = json.load(fh)
    except json.JSONDecodeError as exc:
        raise MalformedHeader(f"{header_path}: not valid JSON ({exc})") from exc
    if not isinstance(header, dict):
        raise MalformedHeader(f"{header_path}: header must be a JSON object")
    for key in ("rows", "cols"):
        val = header.get(key)
        if not isinstance(val, int) or isinstance(val, bool) or val < 0:
            raise MalformedHeader(f"{header_path}: '{key}' must be a non-negative integer")
    for key, expected in HEADER_FIXED.items():
        if header.get(key) != expected:
            raise MalformedHeader(f"{header_path}: '{key}' must be {expected!r}, got {header.get(key)!r}")
    return header


def load_embedding_matrix(header_path, data_path=None, allow_empty: bool = False) -> np.ndarray:
    """Load an ``rows x cols`` float32 matrix and return it as float64."""
    header = _read_header(header_path)
    data_path = data_path_for(header_path) if data_path is None else Path(data_path)
    rows, cols = header["rows"], header["cols"]
    if not allow_empty and (rows < 1 or cols < 1):
        raise MalformedHeader(f"{header_path}: rows and cols must be >= 1")
    raw = Path(data_path).read_bytes()
    expected = rows * cols * _F32_LE.itemsize
    if len(raw) != expected:
        raise SizeMismatch(f"{data_path}: payload has {len(raw)} bytes, header implies {expected}")
    m = np.frombuffer(raw, dtype=_F32_LE).astype(np.float64).reshape(rows, cols)
    if not np.all(np.isfinite(m)):
        bad = np.argwhere(~np.isfinite(m))[0]
        raise NonFiniteValue(f"{data_path}: non-finite value at row {bad[0]}, col {bad[1]}")
    return m


def save_embedding_matrix(header_path, m, data_path=None, extra: dict | None = None) -> None:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise DimensionMismatch(f"expected a 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NonFiniteValue("refusing to write non-finite values")
    data_path = data_path_for(header_path) if data_path is None else Path(data_path)
    header = {"rows": int(m.shape[0]), "cols": int(m.shape[1]), **HEADER_FIXED}
    if extra:
        header.update(extra)
    Path(header_path).parent.mkdir(parents=True, exist_ok=True)
    with open(header_path, "w", encoding="utf-8") as fh:
        json.dump(header, fh, indent=2, sort_keys=True)
    Path(data_path).write_bytes(np.ascontiguousarray(m, dtype=_F32_LE).tobytes())


def load_labels(path, k: int) -> np.ndarray:
    """Read one integer label per line.  Blank trailing lines are ignored."""
    labels = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            s = line.strip()
            if not s:
                continue
            try:
                val = int(s)
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: not an integer: {s!r}") from exc
            if val < 0:
                raise ParseError(f"{path}:{lineno}: negative label {val}")
            if val >= k:
                raise OutOfRangeLabel(f"{path}:{lineno}: label {val} not in [0, {k})")
            labels.append(val)
    return np.asarray(labels, dtype=np.int64)


def save_labels(path, labels) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        fh.writelines(f"{int(v)}\n" for v in labels)


def check_paired(m: np.ndarray, labels: np.ndarray) -> None:
    if len(labels) != m.shape[0]:
        raise DimensionMismatch(f"{len(labels)} labels for {m.shape[0]} embedding rows")


def l2_normalize(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    if np.any(norms == 0):
        row = int(np.argwhere(norms[..., 0] == 0)[0][0])
        raise ZeroRow(f"row {row} has zero norm")
    return m / norms


@dataclass(frozen=True)
class ReferenceSet:
    """Labelled reference embeddings ``R`` (N x D) with one-hot phase association ``C`` (N x K)."""

    embeddings: np.ndarray
    assoc: np.ndarray

    def __post_init__(self):
        if self.embeddings.ndim != 2 or self.assoc.ndim != 2:
            raise DimensionMismatch("reference embeddings and assoc must be 2-D")
        if self.embeddings.shape[0] != self.assoc.shape[0]:
            raise DimensionMismatch(
                f"{self.embeddings.shape[0]} reference rows but {self.assoc.shape[0]} assoc rows")
        if not (np.all((self.assoc == 0) | (self.assoc == 1)) and np.all(self.assoc.sum(axis=1) == 1)):
            raise DimensionMismatch("every assoc row must contain exactly one 1")

    @classmethod
    def from_labels(cls, embeddings, labels, k: int) -> "ReferenceSet":
        labels = np.asarray(labels, dtype=np.int64)
        if labels.size and (labels.min() < 0 or labels.max() >= k):
            raise OutOfRangeLabel(f"reference labels must lie in [0, {k})")
        assoc = np.zeros((len(labels), k))
        assoc[np.arange(len(labels)), labels] = 1.0
        return cls(np.asarray(embeddings, dtype=np.float64), assoc)

    @property
    def labels(self) -> np.ndarray:
        return np.argmax(self.assoc, axis=1)

    @property
    def k(self) -> int:
        return self.assoc.shape[1]

    @property
    def shots_per_phase(self) -> np.ndarray:
        return self.assoc.sum(axis=0).astype(np.int64)


def load_reference_set(manifest_path, normalize: bool = True) -> ReferenceSet:
    """Load a reference manifest.

    Manifest layout::

        {"k": 7, "phases": [[{"header": "ref_p0.json", "data": "ref_p0.bin"}], ...]}

    Entry ``phases[c]`` lists the embedding files whose rows all belong to
    phase ``c``.  Relative paths are resolved against the manifest directory.
    """
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise MalformedHeader(f"{manifest_path}: not valid JSON ({exc})") from exc
    phases = manifest.get("phases") if isinstance(manifest, dict) else None
    if not isinstance(phases, list) or not phases:
        raise MalformedHeader(f"{manifest_path}: 'phases' must be a non-empty list")
    k = manifest.get("k", len(phases))
    if k != len(phases):
        raise MalformedHeader(f"{manifest_path}: k={k} but {len(phases)} phase entries")
    base = manifest_path.parent
    blocks, labels = [], []
    for c, entries in enumerate(phases):
        for entry in entries:
            if not isinstance(entry, dict) or "header" not in entry:
                raise MalformedHeader(f"{manifest_path}: phase {c} entry lacks 'header'")
            header = base / entry["header"]
            data = base / entry["data"] if "data" in entry else None
            m = load_embedding_matrix(header, data)
            blocks.append(m)
            labels.extend([c] * m.shape[0])
    if not blocks:
        raise MalformedHeader(f"{manifest_path}: no reference embeddings listed")
    cols = {b.shape[1] for b in blocks}
    if len(cols) != 1:
        raise DimensionMismatch(f"{manifest_path}: reference files disagree on dimension {sorted(cols)}")
    emb = np.vstack(blocks)
    if normalize:
        emb = l2_normalize(emb)
    return ReferenceSet.from_labels(emb, labels, k)


def save_reference_set(manifest_path, refs: ReferenceSet, stem: str = "ref") -> None:
    """Write one embedding file per phase plus the JSON manifest."""
    manifest_path = Path(manifest_path)
    base = manifest_path.parent
    base.mkdir(parents=True, exist_ok=True)
    labels = refs.labels
    phases = []
    for c in range(refs.k):
        rows = refs.embeddings[labels == c]
        if rows.shape[0] == 0:
            phases.append([])
            continue
        name = f"{stem}_p{c}"
        save_embedding_matrix(base / f"{name}.json", rows)
        phases.append([{"header": f"{name}.json", "data": f"{name}.bin"}])
    manifest = {"k": refs.k, "phases": phases}
    manifest_path.write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")

