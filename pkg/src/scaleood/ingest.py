"""Feature, head and manifest file I/O.

Binary layouts (all little-endian, 32-bit words):

  features   b"OODF" | version u32 | N u32 | D u32 | flags u32 | N*D f32 row-major
  head       b"OODH" | version u32 | K u32 | D u32 | K*D f32 weights | K f32 bias
  extractor  b"OODM" | version u32 | D_in u32 | H u32 | H*D_in f32 weights | H f32 bias

Feature flag bit 0 marks a post-ReLU set. Everything is widened to float64 on load.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import os
import struct
import tempfile
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

try:
    import jsonschema  # type: ignore
except Exception:
    jsonschema = None  # optional

from .errors import IngestError, ManifestError

logger = logging.getLogger(__name__)

FEATURE_MAGIC = b"OODF"
HEAD_MAGIC = b"OODH"
EXTRACTOR_MAGIC = b"OODM"
FORMAT_VERSION = 1
FLAG_POST_RELU = 0x1

SPLITS = ("id", "ood-near", "ood-far", "validation")
FORMATS = ("binary", "csv")

_SCHEMA_PATH = Path(__file__).resolve().parents[2] / "docs" / "schema" / "manifest.schema.json"

PathLike = Union[str, os.PathLike]


def _first_non_finite(data: np.ndarray) -> Optional[Tuple[int, int]]:
    bad = np.argwhere(~np.isfinite(data))
    if bad.size == 0:
        return None
    return int(bad[0][0]), int(bad[0][1])


@dataclass(frozen=True)
class FeatureSet:
    """N x D activations with dataset tag, split and optional labels.

    Arrays are stored as read-only float64 (labels as int64) so a loaded set
    can be shared across threads.
    """
    data: np.ndarray
    tag: str = ""
    split: str = "id"
    labels: Optional[np.ndarray] = None
    post_relu: bool = False

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim != 2:
            raise IngestError(f"{self.tag or 'feature set'}: expected a 2-D matrix, got shape {data.shape}")
        bad = _first_non_finite(data)
        if bad is not None:
            raise IngestError(f"{self.tag or 'feature set'}: non-finite value at row {bad[0]}, column {bad[1]}")
        if self.post_relu and data.size and data.min() < 0:
            row, col = (int(v) for v in np.argwhere(data < 0)[0])
            raise IngestError(
                f"{self.tag or 'feature set'}: negative value at row {row}, column {col} in a post-ReLU set"
            )
        if self.split not in SPLITS:
            raise IngestError(f"Unknown split '{self.split}'. Expected one of: {', '.join(SPLITS)}.")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        if self.labels is not None:
            labels = np.array(self.labels, dtype=np.int64, copy=True).reshape(-1)
            if labels.shape[0] != data.shape[0]:
                raise IngestError(
                    f"{self.tag or 'feature set'}: {labels.shape[0]} labels for {data.shape[0]} samples"
                )
            if labels.size and labels.min() < 0:
                raise IngestError(f"{self.tag or 'feature set'}: negative class label")
            labels.setflags(write=False)
            object.__setattr__(self, "labels", labels)

    @property
    def n_samples(self) -> int:
        return int(self.data.shape[0])

    @property
    def dim(self) -> int:
        return int(self.data.shape[1])

    def check_labels(self, n_classes: int) -> None:
        if self.labels is not None and self.labels.size and int(self.labels.max()) >= n_classes:
            raise IngestError(
                f"{self.tag or 'feature set'}: label {int(self.labels.max())} out of range for a {n_classes}-class head"
            )


@dataclass(frozen=True)
class PreActSet(FeatureSet):
    """Pre-ReLU activations: same layout as FeatureSet, negatives allowed."""

    def __post_init__(self):
        if self.post_relu:
            raise IngestError("PreActSet cannot be flagged post-ReLU.")
        super().__post_init__()


@dataclass(frozen=True)
class LinearHead:
    """Final linear layer: logits z = W a + b with W (K x D), b (K)."""
    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        w = np.array(self.weights, dtype=np.float64, copy=True)
        b = np.array(self.bias, dtype=np.float64, copy=True).reshape(-1)
        if w.ndim != 2:
            raise IngestError(f"Head weights must be 2-D, got shape {w.shape}")
        if w.shape[0] != b.shape[0]:
            raise IngestError(f"Head weights have {w.shape[0]} rows but bias has {b.shape[0]} entries")
        if not (np.isfinite(w).all() and np.isfinite(b).all()):
            raise IngestError("Head contains non-finite values")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "bias", b)

    @property
    def n_classes(self) -> int:
        return int(self.weights.shape[0])

    @property
    def dim(self) -> int:
        return int(self.weights.shape[1])


@dataclass(frozen=True)
class ManifestEntry:
    path: Path
    tag: str
    split: str
    format: str = "binary"
    labels: bool = False
    labels_path: Optional[Path] = None


@dataclass(frozen=True)
class DatasetManifest:
    entries: Tuple[ManifestEntry, ...]
    head_path: Path
    preacts: Tuple[ManifestEntry, ...] = field(default_factory=tuple)

    @property
    def id_entry(self) -> ManifestEntry:
        return next(e for e in self.entries if e.split == "id")


# ---------------------------------------------------------------------------
# atomic writes


def atomic_write_bytes(path: PathLike, payload: bytes) -> None:
    """Write to a temp file in the target directory, then rename over `path`."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{target.name}.", dir=str(target.parent))
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(payload)
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# binary codec


def _read_header(raw: bytes, magic: bytes, path: PathLike) -> Tuple[int, ...]:
    if len(raw) < 4 or raw[:4] != magic:
        raise IngestError(f"{path}: bad magic bytes (expected {magic!r}).")
    n_words = 4 if magic == FEATURE_MAGIC else 3
    need = 4 + 4 * n_words
    if len(raw) < need:
        raise IngestError(f"{path}: unexpected end of file in header.")
    words = struct.unpack_from(f"<{n_words}I", raw, 4)
    if words[0] != FORMAT_VERSION:
        raise IngestError(f"{path}: unsupported format version {words[0]} (supported: {FORMAT_VERSION}).")
    return words


def _payload(raw: bytes, offset: int, count: int, path: PathLike, rows: int, cols: int) -> np.ndarray:
    have, partial = divmod(len(raw) - offset, 4)
    if not partial and have != count and rows and have % rows == 0:
        raise IngestError(
            f"{path}: dimension mismatch: header says D={cols} but payload has {have // rows} values per row."
        )
    if have < count:
        raise IngestError(f"{path}: unexpected end of file: expected {count} floats, found {have}.")
    if partial:
        raise IngestError(f"{path}: payload is not a whole number of 32-bit floats.")
    if have > count:
        raise IngestError(f"{path}: {have - count} trailing floats after declared payload.")
    return np.frombuffer(raw, dtype="<f4", count=count, offset=offset)


def _decode_features(raw: bytes, path: PathLike) -> Tuple[np.ndarray, bool]:
    _, n, d, flags = _read_header(raw, FEATURE_MAGIC, path)
    values = _payload(raw, 20, n * d, path, n, d).reshape(n, d)
    bad = _first_non_finite(values)
    if bad is not None:
        raise IngestError(f"{path}: non-finite value at row {bad[0]}, column {bad[1]}.")
    return values.astype(np.float64), bool(flags & FLAG_POST_RELU)


def _encode_features(data: np.ndarray, post_relu: bool) -> bytes:
    n, d = data.shape
    header = FEATURE_MAGIC + struct.pack("<4I", FORMAT_VERSION, n, d, FLAG_POST_RELU if post_relu else 0)
    return header + np.ascontiguousarray(data, dtype="<f4").tobytes()


# ---------------------------------------------------------------------------
# csv codec


def _decode_csv(text: str, path: PathLike, labels: bool) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    rows: List[List[float]] = []
    label_col: List[int] = []
    width = None
    for i, rec in enumerate(csv.reader(io.StringIO(text))):
        if not rec or all(not c.strip() for c in rec):
            continue
        if labels:
            try:
                label_col.append(int(rec[-1]))
            except ValueError:
                raise IngestError(f"{path}: row {i}: label '{rec[-1].strip()}' is not an integer.")
            rec = rec[:-1]
        if width is None:
            width = len(rec)
        elif len(rec) != width:
            raise IngestError(f"{path}: dimension mismatch at row {i}: expected {width} values, got {len(rec)}.")
        vals = []
        for j, cell in enumerate(rec):
            try:
                v = float(cell)
            except ValueError:
                raise IngestError(f"{path}: row {i}, column {j}: cannot parse '{cell.strip()}' as a float.")
            if not np.isfinite(v):
                raise IngestError(f"{path}: non-finite value at row {i}, column {j}.")
            vals.append(v)
        rows.append(vals)
    if not rows or not width:
        raise IngestError(f"{path}: no samples found.")
    data = np.asarray(rows, dtype=np.float64)
    return data, (np.asarray(label_col, dtype=np.int64) if labels else None)


def _encode_csv(data: np.ndarray, labels: Optional[np.ndarray]) -> str:
    out = io.StringIO()
    for i, row in enumerate(data):
        cells = [f"{float(v):.9g}" for v in row]
        if labels is not None:
            cells.append(str(int(labels[i])))
        out.write(",".join(cells) + "\n")
    return out.getvalue()


# ---------------------------------------------------------------------------
# public loaders / writers


def load_features(
    path: PathLike,
    format: str = "binary",
    *,
    tag: Optional[str] = None,
    split: str = "id",
    labels: bool = False,
    labels_path: Optional[PathLike] = None,
    post_relu: Optional[bool] = None,
) -> FeatureSet:
    """Load a feature matrix. Row i of the file is sample i of the set."""
    p = Path(path)
    if not p.exists():
        raise IngestError(f"{p}: file not found.")
    tag = tag or p.stem
    if format == "binary":
        data, flagged = _decode_features(p.read_bytes(), p)
        lab = None
        relu = flagged if post_relu is None else post_relu
    elif format == "csv":
        data, lab = _decode_csv(p.read_text(encoding="utf-8"), p, labels)
        relu = bool(post_relu)
    else:
        raise IngestError(f"Unknown feature format '{format}'. Supported: {', '.join(FORMATS)}.")
    if labels_path is not None:
        lab = load_labels(labels_path)
    fs = FeatureSet(data, tag=tag, split=split, labels=lab, post_relu=relu)
    logger.info("loaded %s (%s): N=%d D=%d", tag, split, fs.n_samples, fs.dim)
    return fs


def load_preacts(path: PathLike, format: str = "binary", *, tag: Optional[str] = None) -> PreActSet:
    fs = load_features(path, format, tag=tag, post_relu=False)
    return PreActSet(fs.data, tag=fs.tag, split=fs.split)


def write_features(fs: FeatureSet, path: PathLike, format: str = "binary") -> None:
    if format == "binary":
        atomic_write_bytes(path, _encode_features(fs.data, fs.post_relu))
    elif format == "csv":
        atomic_write_text(path, _encode_csv(fs.data, fs.labels))
    else:
        raise IngestError(f"Unknown feature format '{format}'. Supported: {', '.join(FORMATS)}.")


def load_head(path: PathLike) -> LinearHead:
    p = Path(path)
    if not p.exists():
        raise IngestError(f"{p}: file not found.")
    raw = p.read_bytes()
    _, k, d = _read_header(raw, HEAD_MAGIC, p)
    values = _payload(raw, 16, k * d + k, p, 0, d)
    head = LinearHead(values[: k * d].reshape(k, d), values[k * d:])
    logger.info("loaded head %s: K=%d D=%d", p.name, k, d)
    return head


def write_head(head: LinearHead, path: PathLike) -> None:
    k, d = head.weights.shape
    header = HEAD_MAGIC + struct.pack("<3I", FORMAT_VERSION, k, d)
    body = np.concatenate([head.weights.reshape(-1), head.bias]).astype("<f4").tobytes()
    atomic_write_bytes(path, header + body)


def load_extractor(path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    """Hidden layer of the toy model: (weights H x D_in, bias H)."""
    p = Path(path)
    if not p.exists():
        raise IngestError(f"{p}: file not found.")
    raw = p.read_bytes()
    _, d_in, h = _read_header(raw, EXTRACTOR_MAGIC, p)
    values = _payload(raw, 16, h * d_in + h, p, 0, d_in).astype(np.float64)
    return values[: h * d_in].reshape(h, d_in), values[h * d_in:]


def write_extractor(weights: np.ndarray, bias: np.ndarray, path: PathLike) -> None:
    h, d_in = weights.shape
    header = EXTRACTOR_MAGIC + struct.pack("<3I", FORMAT_VERSION, d_in, h)
    body = np.concatenate([np.asarray(weights).reshape(-1), np.asarray(bias).reshape(-1)]).astype("<f4").tobytes()
    atomic_write_bytes(path, header + body)


def load_labels(path: PathLike) -> np.ndarray:
    """One integer class index per line."""
    p = Path(path)
    if not p.exists():
        raise IngestError(f"{p}: file not found.")
    out = []
    for i, line in enumerate(p.read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        try:
            out.append(int(line))
        except ValueError:
            raise IngestError(f"{p}: row {i}: label '{line.strip()}' is not an integer.")
    return np.asarray(out, dtype=np.int64)


def write_labels(labels: Sequence[int], path: PathLike) -> None:
    atomic_write_text(path, "".join(f"{int(v)}\n" for v in labels))


# ---------------------------------------------------------------------------
# manifest


def _entry(raw: dict, root: Path, where: str, default_split: Optional[str] = None) -> ManifestEntry:
    if not isinstance(raw, dict) or "path" not in raw:
        raise ManifestError(f"{where}: entry must be an object with a 'path'.")
    split = raw.get("split", default_split)
    if split not in SPLITS:
        raise ManifestError(f"{where}: unknown split '{split}'. Expected one of: {', '.join(SPLITS)}.")
    fmt = raw.get("format", "binary")
    if fmt not in FORMATS:
        raise ManifestError(f"{where}: unknown format '{fmt}'.")
    path = root / raw["path"]
    lp = raw.get("labels_path")
    return ManifestEntry(
        path=path,
        tag=str(raw.get("tag", Path(raw["path"]).stem)),
        split=split,
        format=fmt,
        labels=bool(raw.get("labels", False)),
        labels_path=(root / lp) if lp else None,
    )


def parse_manifest(data: dict, root: PathLike = ".") -> DatasetManifest:
    """Build a DatasetManifest from its JSON object; paths resolve against `root`."""
    root = Path(root)
    if not isinstance(data, dict):
        raise ManifestError("Top level of a manifest must be an object.")
    if jsonschema is not None and _SCHEMA_PATH.exists():
        try:
            jsonschema.validate(data, json.loads(_SCHEMA_PATH.read_text(encoding="utf-8")))
        except jsonschema.ValidationError as e:  # type: ignore[attr-defined]
            raise ManifestError(f"schema: {e.message}")
    raw_entries = data.get("entries")
    if not isinstance(raw_entries, list) or not raw_entries:
        raise ManifestError("'entries' must be a non-empty list.")
    if "head" not in data:
        raise ManifestError("Missing required 'head' path.")
    entries = tuple(_entry(e, root, f"entries[{i}]") for i, e in enumerate(raw_entries))
    preacts = tuple(
        _entry(e, root, f"preacts[{i}]", default_split="id") for i, e in enumerate(data.get("preacts") or [])
    )
    n_id = sum(1 for e in entries if e.split == "id")
    if n_id != 1:
        raise ManifestError(f"Manifest must tag exactly one entry with split 'id' (found {n_id}).")
    tags = [e.tag for e in entries]
    if len(set(tags)) != len(tags):
        raise ManifestError("Manifest entry tags must be unique.")
    pre_tags = [e.tag for e in preacts]
    if len(set(pre_tags)) != len(pre_tags):
        raise ManifestError("Manifest preacts tags must be unique.")
    return DatasetManifest(entries=entries, head_path=root / data["head"], preacts=preacts)


def load_manifest(path: PathLike) -> DatasetManifest:
    p = Path(path)
    if not p.exists():
        raise ManifestError(f"{p}: manifest not found.")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ManifestError(f"{p}: invalid JSON: {e}")
    return parse_manifest(data, p.parent)


def _load_entry(entry: ManifestEntry) -> FeatureSet:
    if not entry.path.exists():
        raise ManifestError(f"entry '{entry.tag}': missing file {entry.path}")
    try:
        return load_features(
            entry.path, entry.format, tag=entry.tag, split=entry.split,
            labels=entry.labels, labels_path=entry.labels_path,
        )
    except ManifestError:
        raise
    except IngestError as e:
        raise ManifestError(f"entry '{entry.tag}': {e}")


def load_manifest_sets(
    manifest: DatasetManifest, threads: int = 1
) -> Tuple[LinearHead, Dict[str, FeatureSet]]:
    """Load the head and every entry (concurrently when threads > 1), in entry order."""
    if not manifest.head_path.exists():
        raise ManifestError(f"head: missing file {manifest.head_path}")
    try:
        head = load_head(manifest.head_path)
    except IngestError as e:
        raise ManifestError(f"head: {e}")
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        sets = list(pool.map(_load_entry, manifest.entries))
    for entry, fs in zip(manifest.entries, sets):
        if fs.dim != head.dim:
            raise ManifestError(f"entry '{entry.tag}': dimension {fs.dim} does not match head D={head.dim}")
        try:
            fs.check_labels(head.n_classes)
        except IngestError as e:
            raise ManifestError(f"entry '{entry.tag}': {e}")
    return head, {fs.tag: fs for fs in sets}


def load_manifest_preacts(manifest: DatasetManifest, threads: int = 1) -> Dict[str, PreActSet]:
    tags = [e.tag for e in manifest.preacts]
    if len(set(tags)) != len(tags):
        raise ManifestError("Manifest preacts tags must be unique.")

    def _one(entry: ManifestEntry) -> PreActSet:
        if not entry.path.exists():
            raise ManifestError(f"preacts '{entry.tag}': missing file {entry.path}")
        try:
            return load_preacts(entry.path, entry.format, tag=entry.tag)
        except IngestError as e:
            raise ManifestError(f"preacts '{entry.tag}': {e}")

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        sets = list(pool.map(_one, manifest.preacts))
    return {s.tag: s for s in sets}


def validate_manifest(manifest: DatasetManifest, threads: int = 1) -> List[Tuple[str, int, int]]:
    """Load everything the manifest references; return (tag, n_samples, dim) per entry."""
    _, sets = load_manifest_sets(manifest, threads)
    return [(tag, fs.n_samples, fs.dim) for tag, fs in sets.items()]
