"""Single-file checkpoint container.

Layout::

    b"LPVXCKPT"                 8-byte magic
    uint64 little-endian        header length in bytes
    header                      UTF-8 JSON
    blob data                   raw little-endian arrays, back to back

The header records ``format_version``, the config snapshot, epoch, rng state,
loss history and, per blob, its name, dtype tag, shape, offset, size and
SHA-256. Every blob is verified before anything is returned, so a damaged
file never loads partially.
"""

from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"LPVXCKPT"
FORMAT_VERSION = "1.0"


class CheckpointError(RuntimeError):
    """Raised for unreadable, corrupt or incompatible checkpoints."""


@dataclass
class Checkpoint:
    config: dict
    params: dict
    epoch: int = 0
    step: int = 0
    rng_state: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    optimizer: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    format_version: str = FORMAT_VERSION


def _le_dtype(arr: np.ndarray) -> np.ndarray:
    return arr.astype(arr.dtype.newbyteorder("<"), copy=False)


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Write ``ckpt`` atomically (temp file, then rename)."""
    path = Path(path)
    blobs, entries, offset = [], [], 0
    arrays = dict(ckpt.params)
    for group, state in ckpt.optimizer.get("arrays", {}).items():
        arrays.update({f"optim::{group}::{k}": v for k, v in state.items()})
    for name in sorted(arrays):
        arr = np.ascontiguousarray(_le_dtype(np.asarray(arrays[name])))
        data = arr.tobytes()
        entries.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(data),
            "sha256": hashlib.sha256(data).hexdigest(),
        })
        blobs.append(data)
        offset += len(data)
    header = {
        "format_version": ckpt.format_version,
        "config": ckpt.config,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "rng_state": ckpt.rng_state,
        "history": ckpt.history,
        "optimizer_meta": ckpt.optimizer.get("meta", {}),
        "extra": ckpt.extra,
        "blobs": entries,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for data in blobs:
            fh.write(data)
    tmp.replace(path)
    return path


def load_checkpoint(path, config: dict | None = None) -> Checkpoint:
    """Read and verify a checkpoint.

    If ``config`` is given and differs from the stored snapshot, the stored
    snapshot wins and a warning is emitted.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    raw = path.read_bytes()
    if raw[:8] != MAGIC or len(raw) < 16:
        raise CheckpointError(f"{path} is not a checkpoint file")
    (head_len,) = struct.unpack("<Q", raw[8:16])
    if 16 + head_len > len(raw):
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16:16 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc

    version = str(header.get("format_version", ""))
    if version.split(".")[0] != FORMAT_VERSION.split(".")[0]:
        raise CheckpointError(f"{path}: format version {version!r} incompatible with {FORMAT_VERSION}")

    base = 16 + head_len
    arrays = {}
    for entry in header["blobs"]:
        start = base + entry["offset"]
        data = raw[start:start + entry["nbytes"]]
        if len(data) != entry["nbytes"] or hashlib.sha256(data).hexdigest() != entry["sha256"]:
            raise CheckpointError(f"{path}: corrupt blob {entry['name']!r}")
        arrays[entry["name"]] = np.frombuffer(data, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()

    params, optim = {}, {}
    for name, arr in arrays.items():
        if name.startswith("optim::"):
            _, group, key = name.split("::", 2)
            optim.setdefault(group, {})[key] = arr
        else:
            params[name] = arr

    if config is not None and config != header["config"]:
        warnings.warn(f"{path}: supplied config differs from the checkpoint snapshot; using the snapshot",
                      stacklevel=2)
    return Checkpoint(
        config=header["config"],
        params=params,
        epoch=header["epoch"],
        step=header["step"],
        rng_state=header["rng_state"],
        history=header["history"],
        optimizer={"meta": header.get("optimizer_meta", {}), "arrays": optim},
        extra=header.get("extra", {}),
        format_version=version,
    )


def checkpoint_id(path) -> str:
    """Short content hash identifying a checkpoint file."""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
