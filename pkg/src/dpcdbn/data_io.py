"""Dataset ingestion (IDX, CSV), normalization, and the binary model container."""

from __future__ import annotations

import csv
import json
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    BadMagic,
    CorruptContainer,
    DimMismatch,
    NegativeFeature,
    ParseError,
    SchemaMismatch,
    TruncatedFile,
    VersionMismatch,
)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801

CONTAINER_MAGIC = b"DPCN"
CONTAINER_VERSION = 1


@dataclass
class RawDataset:
    """Unprocessed instances (matrices or vectors) with optional labels."""

    instances: list[np.ndarray]
    labels: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.instances:
            shape = np.asarray(self.instances[0]).shape
            for inst in self.instances:
                if np.asarray(inst).shape != shape:
                    raise DimMismatch("instances must share a common shape")
        # a labels-only dataset (no instances) is a valid intermediate
        if self.instances and self.labels is not None and len(self.labels) != len(self.instances):
            raise DimMismatch("labels length must match the instance count")

    def __len__(self) -> int:
        return len(self.instances)


@dataclass
class NormalizedDataset:
    """Instances with non-negative entries in [0, 1]; provenance records the scaling."""

    instances: list[np.ndarray]
    provenance: str
    labels: Optional[np.ndarray] = None

    def __len__(self) -> int:
        return len(self.instances)


def load_idx(path) -> RawDataset:
    """Parse a big-endian IDX file (u8 images -> [0,1] matrices, or u8 labels)."""
    data = Path(path).read_bytes()
    if len(data) < 4:
        raise TruncatedFile(f"{path}: shorter than the magic field")
    (magic,) = struct.unpack(">I", data[:4])
    if magic == IDX_IMAGES_MAGIC:
        if len(data) < 16:
            raise TruncatedFile(f"{path}: truncated image header")
        n, rows, cols = struct.unpack(">III", data[4:16])
        expected = 16 + n * rows * cols
        if len(data) < expected:
            raise TruncatedFile(f"{path}: payload shorter than {n}x{rows}x{cols} pixels")
        if len(data) > expected:
            raise DimMismatch(f"{path}: {len(data) - expected} trailing bytes")
        pixels = np.frombuffer(data, dtype=np.uint8, count=n * rows * cols, offset=16)
        images = pixels.reshape(n, rows, cols).astype(float) / 255.0
        return RawDataset(instances=[images[i] for i in range(n)])
    if magic == IDX_LABELS_MAGIC:
        if len(data) < 8:
            raise TruncatedFile(f"{path}: truncated label header")
        (n,) = struct.unpack(">I", data[4:8])
        if len(data) < 8 + n:
            raise TruncatedFile(f"{path}: payload shorter than {n} labels")
        if len(data) > 8 + n:
            raise DimMismatch(f"{path}: {len(data) - 8 - n} trailing bytes")
        labels = np.frombuffer(data, dtype=np.uint8, count=n, offset=8).astype(int)
        return RawDataset(instances=[np.empty((0, 0))] * 0, labels=labels)
    raise BadMagic(f"{path}: unsupported IDX magic 0x{magic:08x}")


def load_idx_pair(images_path, labels_path) -> RawDataset:
    """Load an image file and its label file and zip them together."""
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if labels.labels is None or images.labels is not None:
        raise BadMagic("expected an image file and a label file, in that order")
    if len(labels.labels) != len(images.instances):
        raise DimMismatch("image and label counts disagree")
    return RawDataset(instances=images.instances, labels=labels.labels)


def write_idx_images(path, images: np.ndarray) -> None:
    """Write [0,1] float images as a u8 IDX file (round-trips through load_idx)."""
    images = np.asarray(images)
    n, rows, cols = images.shape
    payload = struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols)
    pixels = np.clip(np.round(images * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(payload + pixels.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels)
    payload = struct.pack(">II", IDX_LABELS_MAGIC, len(labels))
    Path(path).write_bytes(payload + labels.astype(np.uint8).tobytes())


def normalize(raw: RawDataset, mode: str = "l2") -> NormalizedDataset:
    """Scale instances into the non-negative unit regime.

    ``l2``: divide each instance by max(1, its flattened L2 norm), so the norm
    constraint holds.  ``pixel``: divide by max(1, largest entry), keeping
    per-pixel values in [0, 1] (the patch sums then feed the sensitivity bound
    directly).  Both modes are idempotent.  Negative entries are rejected.
    """
    if mode not in ("l2", "pixel"):
        raise ValueError(f"unknown normalization mode {mode!r}")
    out = []
    for idx, inst in enumerate(raw.instances):
        inst = np.asarray(inst, dtype=float)
        if np.any(inst < 0):
            raise NegativeFeature(f"instance {idx} has a negative entry")
        if mode == "l2":
            denom = max(1.0, float(np.linalg.norm(inst.ravel())))
        else:
            denom = max(1.0, float(inst.max())) if inst.size else 1.0
        out.append(inst / denom)
    return NormalizedDataset(instances=out, provenance=f"normalize:{mode}", labels=raw.labels)


def load_csv(path, schema: Sequence[str], label_column: Optional[str] = None) -> RawDataset:
    """Parse a numeric CSV whose header must match ``schema`` exactly."""
    schema = list(schema)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaMismatch(f"{path}: empty file") from None
        if header != schema:
            raise SchemaMismatch(f"{path}: header {header} does not match schema {schema}")
        label_idx = None
        if label_column is not None:
            if label_column not in schema:
                raise SchemaMismatch(f"label column {label_column!r} not in schema")
            label_idx = schema.index(label_column)
        instances, labels = [], []
        for row_no, row in enumerate(reader, start=2):
            if len(row) != len(schema):
                raise ParseError(f"{path}:{row_no}: expected {len(schema)} cells", row=row_no)
            values = []
            for col_no, cell in enumerate(row):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise ParseError(
                        f"{path}:{row_no}: column {schema[col_no]!r} is not numeric: {cell!r}",
                        row=row_no,
                        col=col_no,
                    ) from None
            if label_idx is not None:
                labels.append(values.pop(label_idx))
            instances.append(np.array(values))
    return RawDataset(
        instances=instances,
        labels=np.array(labels) if label_idx is not None else None,
    )


def write_container(path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    """Versioned little-endian container: JSON metadata, raw arrays, CRC32 trailer."""
    manifest = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape)})
        blobs.append(arr.tobytes())
    header = {"meta": meta, "arrays": manifest}
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    body = CONTAINER_MAGIC + struct.pack("<B", CONTAINER_VERSION)
    body += struct.pack("<I", len(header_bytes)) + header_bytes
    for blob in blobs:
        body += blob
    body += struct.pack("<I", zlib.crc32(body))
    Path(path).write_bytes(body)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    if len(data) < 13:
        raise CorruptContainer(f"{path}: too short to be a model container")
    if data[:4] != CONTAINER_MAGIC:
        raise CorruptContainer(f"{path}: bad container magic")
    version = data[4]
    if version != CONTAINER_VERSION:
        raise VersionMismatch(f"{path}: container version {version}, expected {CONTAINER_VERSION}")
    (crc_stored,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(data[:-4]) != crc_stored:
        raise CorruptContainer(f"{path}: checksum mismatch")
    (header_len,) = struct.unpack("<I", data[5:9])
    header_end = 9 + header_len
    if header_end > len(data) - 4:
        raise CorruptContainer(f"{path}: truncated header")
    try:
        header = json.loads(data[9:header_end].decode())
    except (ValueError, UnicodeDecodeError) as exc:
        raise CorruptContainer(f"{path}: unreadable header: {exc}") from None
    arrays = {}
    offset = header_end
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        nbytes = count * 8
        if offset + nbytes > len(data) - 4:
            raise CorruptContainer(f"{path}: truncated array {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(
            data, dtype="<f8", count=count, offset=offset
        ).reshape(entry["shape"])
        offset += nbytes
    if offset != len(data) - 4:
        raise CorruptContainer(f"{path}: trailing bytes after the last array")
    return header["meta"], arrays


def save_model(model, path) -> None:
    """Serialize a trained model; round-trips byte-identically."""
    meta, arrays = model.to_payload()
    write_container(path, meta, arrays)


def load_model(path):
    from .network import TrainedModel  # lazy: data_io must not depend on network at import

    meta, arrays = read_container(path)
    return TrainedModel.from_payload(meta, arrays)
