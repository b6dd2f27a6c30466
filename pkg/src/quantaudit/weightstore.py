"""Flat checkpoint archives: manifest.json + a single weights.bin blob.

A checkpoint directory holds exactly two files:

* ``manifest.json`` -- step number, tensor descriptors (name, shape, dtype,
  offset, nbytes) and free-form string metadata, written with sorted keys so
  the bytes are stable.
* ``weights.bin`` -- row-major little-endian float32 data, each tensor
  aligned to a 64-byte boundary.

Only float32 tensors of rank 1 or 2 are supported.
"""

from __future__ import annotations

import fnmatch
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "weights.bin"
ALIGNMENT = 64
DTYPE = "f32"


class CheckpointError(Exception):
    """Raised for malformed, corrupted or inconsistent checkpoints."""


@dataclass
class TensorRecord:
    """Descriptor of one tensor inside the blob."""

    name: str
    shape: tuple[int, ...]
    offset: int
    nbytes: int
    dtype: str = DTYPE

    def validate(self) -> None:
        if not self.name:
            raise CheckpointError("tensor name must be non-empty")
        if len(self.shape) not in (1, 2):
            raise CheckpointError(
                f"tensor {self.name!r}: rank must be 1 or 2, got shape {self.shape}"
            )
        if any(d <= 0 for d in self.shape):
            raise CheckpointError(f"tensor {self.name!r}: non-positive dimension in {self.shape}")
        if self.dtype != DTYPE:
            raise CheckpointError(f"tensor {self.name!r}: unsupported dtype {self.dtype!r}")
        expected = 4 * math.prod(self.shape)
        if self.nbytes != expected:
            raise CheckpointError(
                f"tensor {self.name!r}: nbytes {self.nbytes} != 4*prod(shape) {expected}"
            )


@dataclass
class CheckpointManifest:
    """One training snapshot: step, tensor directory, metadata."""

    step: int
    tensors: list[TensorRecord] = field(default_factory=list)
    meta: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        if self.step < 0:
            raise CheckpointError(f"step must be non-negative, got {self.step}")
        names = [t.name for t in self.tensors]
        if len(names) != len(set(names)):
            dupes = sorted({n for n in names if names.count(n) > 1})
            raise CheckpointError(f"duplicate tensor names: {dupes}")
        spans = sorted((t.offset, t.offset + t.nbytes, t.name) for t in self.tensors)
        for (_, end_a, name_a), (start_b, _, name_b) in zip(spans, spans[1:]):
            if start_b < end_a:
                raise CheckpointError(f"overlapping tensors: {name_a!r} and {name_b!r}")
        for t in self.tensors:
            t.validate()

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "tensors": [
                {
                    "name": t.name,
                    "shape": list(t.shape),
                    "dtype": t.dtype,
                    "offset": t.offset,
                    "nbytes": t.nbytes,
                }
                for t in self.tensors
            ],
            "meta": dict(self.meta),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CheckpointManifest":
        try:
            records = [
                TensorRecord(
                    name=t["name"],
                    shape=tuple(t["shape"]),
                    offset=t["offset"],
                    nbytes=t["nbytes"],
                    dtype=t.get("dtype", DTYPE),
                )
                for t in d["tensors"]
            ]
            manifest = cls(step=d["step"], tensors=records, meta=dict(d.get("meta", {})))
        except (KeyError, TypeError) as exc:
            raise CheckpointError(f"malformed manifest: {exc}") from exc
        manifest.validate()
        return manifest


@dataclass
class QuantSelector:
    """Name-pattern filter deciding which tensors a probe touches.

    A tensor is selected iff it matches some include pattern, matches no
    exclude pattern, and has at least ``min_dims`` dimensions.  The defaults
    quantize every matrix except embeddings, normalization parameters and
    biases, which is the standard weight-only PTQ surface.
    """

    include_patterns: list[str] = field(default_factory=lambda: ["*"])
    exclude_patterns: list[str] = field(
        default_factory=lambda: ["*embed*", "*norm*", "*bias*"]
    )
    min_dims: int = 2

    def matches(self, name: str, ndim: int) -> bool:
        if ndim < self.min_dims:
            return False
        if not any(fnmatch.fnmatchcase(name, p) for p in self.include_patterns):
            return False
        return not any(fnmatch.fnmatchcase(name, p) for p in self.exclude_patterns)


def _align(offset: int) -> int:
    return (offset + ALIGNMENT - 1) // ALIGNMENT * ALIGNMENT


def build_manifest(step: int, tensors: dict[str, np.ndarray],
                   meta: dict[str, str] | None = None) -> CheckpointManifest:
    """Lay out tensors (name-sorted) into blob offsets and return the manifest."""
    records = []
    offset = 0
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        offset = _align(offset)
        nbytes = 4 * arr.size
        records.append(TensorRecord(name=name, shape=tuple(arr.shape),
                                    offset=offset, nbytes=nbytes))
        offset += nbytes
    manifest = CheckpointManifest(step=step, tensors=records, meta=dict(meta or {}))
    manifest.validate()
    return manifest


def write_checkpoint(manifest: CheckpointManifest, tensors: dict[str, np.ndarray],
                     dir: str | Path) -> Path:
    """Write manifest.json + weights.bin; round-trips bit-identically."""
    manifest.validate()
    provided = set(tensors)
    declared = {t.name for t in manifest.tensors}
    if provided != declared:
        raise CheckpointError(
            f"manifest/tensor mismatch: missing={sorted(declared - provided)} "
            f"extra={sorted(provided - declared)}"
    )
    path = Path(dir)
    path.mkdir(parents=True, exist_ok=True)

    total = max((t.offset + t.nbytes for t in manifest.tensors), default=0)
    blob = bytearray(total)
    for rec in manifest.tensors:
        arr = np.ascontiguousarray(np.asarray(tensors[rec.name], dtype=np.float32))
        if tuple(arr.shape) != rec.shape:
            raise CheckpointError(
                f"tensor {rec.name!r}: shape {tuple(arr.shape)} != declared {rec.shape}"
            )
        raw = arr.astype("<f4", copy=False).tobytes()
        if len(raw) != rec.nbytes:
            raise CheckpointError(f"tensor {rec.name!r}: byte length mismatch")
        blob[rec.offset:rec.offset + rec.nbytes] = raw

    (path / BLOB_NAME).write_bytes(bytes(blob))
    manifest_bytes = json.dumps(manifest.to_dict(), sort_keys=True, indent=1).encode("utf-8")
    (path / MANIFEST_NAME).write_bytes(manifest_bytes)
    return path


def read_checkpoint(dir: str | Path) -> tuple[CheckpointManifest, dict[str, np.ndarray]]:
    """Read a checkpoint directory back into (manifest, name->array)."""
    path = Path(dir)
    manifest_path = path / MANIFEST_NAME
    blob_path = path / BLOB_NAME
    if not manifest_path.is_file():
        raise CheckpointError(f"missing {MANIFEST_NAME} in {path}")
    if not blob_path.is_file():
        raise CheckpointError(f"missing {BLOB_NAME} in {path}")
    try:
        manifest = CheckpointManifest.from_dict(json.loads(manifest_path.read_text("utf-8")))
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"unparseable manifest in {path}: {exc}") from exc

    blob = blob_path.read_bytes()
    tensors: dict[str, np.ndarray] = {}
    for rec in manifest.tensors:
        end = rec.offset + rec.nbytes
        if end > len(blob):
            raise CheckpointError(
                f"corrupted blob in {path}: tensor {rec.name!r} needs bytes "
                f"[{rec.offset}, {end}) but blob has {len(blob)}"
            )
        arr = np.frombuffer(blob, dtype="<f4", count=rec.nbytes // 4, offset=rec.offset)
        tensors[rec.name] = arr.reshape(rec.shape).copy()
    return manifest, tensors


def is_checkpoint_dir(path: Path) -> bool:
    return (path / MANIFEST_NAME).is_file() and (path / BLOB_NAME).is_file()


def list_checkpoints(root: str | Path) -> list[tuple[int, Path]]:
    """Enumerate valid checkpoints under root, sorted ascending by step.

    Malformed entries are skipped with a warning so a long sweep survives
    one bad directory.
    """
    root = Path(root)
    if not root.is_dir():
        raise CheckpointError(f"not a directory: {root}")
    found = []
    for entry in sorted(root.iterdir()):
        if not entry.is_dir() or not is_checkpoint_dir(entry):
            continue
        try:
            manifest = CheckpointManifest.from_dict(
                json.loads((entry / MANIFEST_NAME).read_text("utf-8"))
            )
        except (CheckpointError, json.JSONDecodeError, OSError) as exc:
            logger.warning("skipping malformed checkpoint %s: %s", entry, exc)
            continue
        found.append((manifest.step, entry))
    found.sort(key=lambda sp: sp[0])
    return found


def select_quantizable(manifest: CheckpointManifest,
                       sel: QuantSelector | None = None) -> list[str]:
    """Name-sorted list of tensors the probe should quantize."""
    sel = sel or QuantSelector()
    return sorted(t.name for t in manifest.tensors if sel.matches(t.name, len(t.shape)))


def checkpoint_step_dir(root: str | Path, step: int) -> Path:
    """Canonical per-step directory name used by the trainer and sweeps."""
    return Path(root) / f"step-{step:08d}"
