"""
weightstore.py

Checkpoints on disk: a `manifest.json` describing every tensor plus a single
`weights.bin` blob of little-endian f32 data, each tensor 64-byte aligned.
"""
import fnmatch
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np
from marshmallow import ValidationError

from errors import CheckpointError, CorruptionError, ShapeMismatchError
from schemas import CheckpointManifestSchema, QuantSelectorSchema

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "weights.bin"
ALIGNMENT = 64
F32 = np.dtype("<f4")


@dataclass(frozen=True)
class TensorRecord:
    name: str
    shape: tuple
    dtype: str = "f32"
    offset: int = 0
    nbytes: int = 0

    @property
    def numel(self):
        return int(np.prod(self.shape))


@dataclass
class CheckpointManifest:
    step: int
    tensors: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @classmethod
    def for_tensors(cls, step, tensors, meta=None):
        """Describe `tensors` (name -> array) with offsets laid out in name order."""
        records, offset = [], 0
        for name in sorted(tensors):
            shape = tuple(int(d) for d in np.shape(tensors[name]))
            nbytes = int(np.prod(shape)) * F32.itemsize
            records.append(TensorRecord(name=name, shape=shape, offset=offset, nbytes=nbytes))
            offset = _align(offset + nbytes)
        return cls(step=int(step), tensors=records, meta=dict(meta or {}))

    def names(self):
        return [t.name for t in self.tensors]

    def record(self, name):
        for t in self.tensors:
            if t.name == name:
                return t
        raise KeyError(name)


@dataclass(frozen=True)
class QuantSelector:
    include_patterns: tuple = ("*",)
    exclude_patterns: tuple = ("*embed*", "*norm*", "*bias*")
    min_dims: int = 2

    @classmethod
    def from_dict(cls, data):
        loaded = QuantSelectorSchema().load(data or {})
        return cls(tuple(loaded["include_patterns"]), tuple(loaded["exclude_patterns"]), loaded["min_dims"])

    def matches(self, name, ndim):
        if ndim < self.min_dims:
            return False
        if not any(fnmatch.fnmatchcase(name, p) for p in self.include_patterns):
            return False
        return not any(fnmatch.fnmatchcase(name, p) for p in self.exclude_patterns)


def _align(offset):
    return -(-offset // ALIGNMENT) * ALIGNMENT


def _manifest_to_dict(manifest):
    return {
        "step": manifest.step,
        "tensors": [
            {"name": t.name, "shape": list(t.shape), "dtype": t.dtype, "offset": t.offset, "nbytes": t.nbytes}
            for t in manifest.tensors
        ],
        "meta": {k: str(manifest.meta[k]) for k in sorted(manifest.meta)},
    }


def _manifest_from_dict(data):
    loaded = CheckpointManifestSchema().load(data)
    records = [
        TensorRecord(name=t["name"], shape=tuple(t["shape"]), dtype=t["dtype"], offset=t["offset"], nbytes=t["nbytes"])
        for t in loaded["tensors"]
    ]
    for r in records:
        if r.nbytes != r.numel * F32.itemsize:
            raise ValidationError(f"Tensor {r.name}: nbytes {r.nbytes} does not match shape {list(r.shape)}.")
    return CheckpointManifest(step=loaded["step"], tensors=records, meta=dict(loaded["meta"]))


def _layout(manifest, tensors):
    """Check every descriptor against its array and recompute aligned offsets."""
    missing = [n for n in manifest.names() if n not in tensors]
    if missing:
        raise ShapeMismatchError(f"Manifest describes tensors that were not provided: {missing}")
    if len(set(manifest.names())) != len(manifest.tensors):
        raise CheckpointError("Manifest contains duplicate tensor names.")

    records, arrays, offset = [], [], 0
    for rec in sorted(manifest.tensors, key=lambda t: t.name):
        if not rec.name:
            raise CheckpointError("Tensor names must be non-empty.")
        if len(rec.shape) not in (1, 2):
            raise ShapeMismatchError(
                f"Tensor {rec.name}: only 1-D and 2-D tensors are supported, got {list(rec.shape)}."
            )
        array = np.asarray(tensors[rec.name])
        if array.size != rec.numel:
            raise ShapeMismatchError(
                f"Tensor {rec.name}: declared shape {list(rec.shape)} holds {rec.numel} elements, "
                f"data has {array.size}."
            )
        array = np.ascontiguousarray(array, dtype=F32).reshape(rec.shape)
        nbytes = array.nbytes
        records.append(TensorRecord(name=rec.name, shape=tuple(rec.shape), offset=offset, nbytes=nbytes))
        arrays.append(array)
        offset = _align(offset + nbytes)
    return records, arrays


def write_checkpoint(manifest, tensors, directory):
    """Write `manifest.json` and `weights.bin` under `directory` and return it.

    The manifest is written last, so a directory without one is an
    incomplete write and is skipped by `list_checkpoints`.
    """
    records, arrays = _layout(manifest, tensors)
    os.makedirs(directory, exist_ok=True)

    blob_path = os.path.join(directory, BLOB_NAME)
    tmp_blob = blob_path + ".tmp"
    with open(tmp_blob, "wb") as f:
        position = 0
        for rec, array in zip(records, arrays):
            if rec.offset > position:
                f.write(b"\x00" * (rec.offset - position))
            f.write(array.tobytes(order="C"))
            position = rec.offset + rec.nbytes
    os.replace(tmp_blob, blob_path)

    written = CheckpointManifest(step=int(manifest.step), tensors=records, meta=dict(manifest.meta))
    manifest_path = os.path.join(directory, MANIFEST_NAME)
    tmp_manifest = manifest_path + ".tmp"
    with open(tmp_manifest, "w", encoding="utf-8") as f:
        json.dump(_manifest_to_dict(written), f, indent=2)
        f.write("\n")
    os.replace(tmp_manifest, manifest_path)
    return directory


def read_manifest(directory):
    path = os.path.join(directory, MANIFEST_NAME)
    if not os.path.isfile(path):
        raise CheckpointError(f"Missing {MANIFEST_NAME} in {directory}")
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
        return _manifest_from_dict(data)
    except (ValueError, ValidationError) as e:
        # json.JSONDecodeError is a ValueError
        raise CheckpointError(f"Invalid manifest {path}: {e}") from e


def read_checkpoint(directory):
    """Return (manifest, {name: float32 array}) exactly as written."""
    manifest = read_manifest(directory)
    blob_path = os.path.join(directory, BLOB_NAME)
    if not os.path.isfile(blob_path):
        raise CheckpointError(f"Missing {BLOB_NAME} in {directory}")
    with open(blob_path, "rb") as f:
        blob = f.read()

    expected = max((t.offset + t.nbytes for t in manifest.tensors), default=0)
    if len(blob) != expected:
        raise CorruptionError(f"{blob_path}: expected {expected} bytes, found {len(blob)}.")

    tensors = {}
    for rec in manifest.tensors:
        data = np.frombuffer(blob, dtype=F32, count=rec.numel, offset=rec.offset)
        tensors[rec.name] = data.reshape(rec.shape).astype(np.float32)
    return manifest, tensors


def checkpoint_dirname(step):
    return f"step_{int(step):08d}"


def list_checkpoints(root):
    """Return [(step, path)] for every valid checkpoint directly under `root`, ascending by step."""
    if not os.path.isdir(root):
        raise CheckpointError(f"Checkpoint root {root} is not a readable directory.")

    found = {}
    for entry in sorted(os.listdir(root)):
        path = os.path.join(root, entry)
        if not os.path.isdir(path):
            continue
        if not os.path.isfile(os.path.join(path, MANIFEST_NAME)):
            continue
        try:
            manifest = read_manifest(path)
        except CheckpointError as e:
            logger.warning("Skipping malformed checkpoint %s: %s", path, e)
            continue
        if manifest.step in found:
            logger.warning("Skipping %s: step %d already provided by %s", path, manifest.step, found[manifest.step])
            continue
        found[manifest.step] = path
    return sorted(found.items())


def select_quantizable(manifest, selector=None):
    """Name-sorted list of tensors the probes act on."""
    selector = selector or QuantSelector()
    return sorted(t.name for t in manifest.tensors if selector.matches(t.name, len(t.shape)))
