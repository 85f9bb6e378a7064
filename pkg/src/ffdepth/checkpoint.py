"""Checkpoint archive format.

A checkpoint is a single zip file (stored, not compressed) holding:

- manifest.json : format version, iteration, phase, config hash, codec /
  schedule / arch parameters, optimizer hyperparameters
- tensors.json  : sorted index of tensor names with dtype and shape
- tensors/<name>.bin : raw little-endian bytes per tensor
- digest.txt    : sha256 over every other entry (names + bytes, sorted)

Every zip entry uses a fixed 1980 timestamp and sorted order, so saving the
same checkpoint twice produces byte-identical files. Loading verifies the
digest (corruption check) and the format version. This module is numpy-only;
the trainer converts to and from torch tensors.
"""

from __future__ import annotations

import hashlib
import json
import zipfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1

_FIXED_DATE = (1980, 1, 1, 0, 0, 0)


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptionError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    manifest: dict
    tensors: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def iteration(self) -> int:
        return int(self.manifest["iteration"])

    @property
    def phase(self) -> str:
        return str(self.manifest["phase"])


def _le_dtype(arr: np.ndarray) -> str:
    dt = arr.dtype.newbyteorder("<")
    return dt.str


def _entry_bytes(ckpt: Checkpoint) -> list[tuple[str, bytes]]:
    manifest = dict(ckpt.manifest)
    manifest["format_version"] = FORMAT_VERSION
    entries = [("manifest.json",
                json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode())]
    index = []
    for name in sorted(ckpt.tensors):
        # asarray keeps 0-d shapes; ascontiguousarray would promote them to 1-d
        arr = np.asarray(ckpt.tensors[name], order="C")
        dtype = _le_dtype(arr)
        index.append({"name": name, "dtype": dtype, "shape": list(arr.shape)})
        entries.append((f"tensors/{name}.bin", arr.astype(dtype, copy=False).tobytes()))
    entries.insert(1, ("tensors.json",
                       json.dumps(index, sort_keys=True, separators=(",", ":")).encode()))
    return entries


def _digest(entries: list[tuple[str, bytes]]) -> str:
    h = hashlib.sha256()
    for name, blob in sorted(entries):
        h.update(name.encode())
        h.update(b"\x00")
        h.update(blob)
        h.update(b"\x00")
    return h.hexdigest()


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    path = Path(path)
    entries = _entry_bytes(ckpt)
    entries.append(("digest.txt", _digest(entries).encode()))
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, blob in entries:
            info = zipfile.ZipInfo(name, date_time=_FIXED_DATE)
            info.compress_type = zipfile.ZIP_STORED
            info.external_attr = 0o600 << 16
            zf.writestr(info, blob)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            names = set(zf.namelist())
            required = {"manifest.json", "tensors.json", "digest.txt"}
            if not required <= names:
                raise CheckpointCorruptionError(
                    f"{path}: missing entries {sorted(required - names)}"
                )
            blobs = {n: zf.read(n) for n in names}
    except zipfile.BadZipFile as e:
        raise CheckpointCorruptionError(f"{path}: unreadable archive: {e}") from e

    stored = blobs.pop("digest.txt").decode()
    actual = _digest(sorted(blobs.items()))
    if stored != actual:
        raise CheckpointCorruptionError(
            f"{path}: content digest mismatch (stored {stored[:12]}.., "
            f"actual {actual[:12]}..)"
        )

    manifest = json.loads(blobs["manifest.json"])
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, this build reads {FORMAT_VERSION}"
        )
    tensors = {}
    for meta in json.loads(blobs["tensors.json"]):
        raw = blobs[f"tensors/{meta['name']}.bin"]
        arr = np.frombuffer(raw, dtype=meta["dtype"]).reshape(meta["shape"]).copy()
        tensors[meta["name"]] = arr
    return Checkpoint(manifest=manifest, tensors=tensors)
