"""Binary checkpoint format.

Layout (little-endian)::

    b"OMAE" | u32 version | u32 header_bytes | header JSON (utf-8) | tensor data

The header lists every tensor as ``[name, shape]`` in storage order; the data
section is the concatenation of their float32 values. Model parameters and
optimizer moments live in separate tables.
"""

import json
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC = b"OMAE"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    config: dict
    params: OrderedDict
    optimizer: OrderedDict = None
    meta: dict = field(default_factory=dict)

    def encoder_state(self):
        return OrderedDict((k, v) for k, v in self.params.items() if k.startswith("encoder."))


def _f32(arr):
    return np.ascontiguousarray(np.asarray(arr), dtype="<f4")


def _table(tensors):
    out = OrderedDict()
    for name, value in tensors.items():
        if name in out:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        out[name] = _f32(value)
    return out


def to_bytes(ckpt):
    params = _table(ckpt.params)
    optim = _table(ckpt.optimizer) if ckpt.optimizer is not None else None
    header = {
        "kind": ckpt.kind,
        "config": ckpt.config,
        "meta": ckpt.meta,
        "params": [[n, list(a.shape)] for n, a in params.items()],
        "optimizer": None if optim is None else [[n, list(a.shape)] for n, a in optim.items()],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    chunks = [_PREFIX.pack(MAGIC, VERSION, len(head)), head]
    chunks += [a.tobytes() for a in params.values()]
    if optim is not None:
        chunks += [a.tobytes() for a in optim.values()]
    return b"".join(chunks)


def from_bytes(blob, source="<bytes>"):
    if len(blob) < _PREFIX.size:
        raise CheckpointError(f"{source}: truncated checkpoint (no header)")
    magic, version, head_len = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointError(f"{source}: bad magic {magic!r}, not a checkpoint")
    if version != VERSION:
        raise CheckpointError(f"{source}: unsupported checkpoint version {version} (expected {VERSION})")
    pos = _PREFIX.size
    if len(blob) < pos + head_len:
        raise CheckpointError(f"{source}: truncated checkpoint header")
    try:
        header = json.loads(blob[pos:pos + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{source}: corrupt header ({exc})") from None
    pos += head_len

    def read_table(entries):
        nonlocal pos
        out = OrderedDict()
        for name, shape in entries:
            if name in out:
                raise CheckpointError(f"{source}: duplicate tensor name {name!r}")
            count = int(np.prod(shape, dtype=np.int64))
            end = pos + 4 * count
            if end > len(blob):
                raise CheckpointError(f"{source}: truncated checkpoint while reading {name!r}")
            out[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape).copy()
            pos = end
        return out

    params = read_table(header["params"])
    optim = read_table(header["optimizer"]) if header["optimizer"] is not None else None
    if pos != len(blob):
        raise CheckpointError(f"{source}: {len(blob) - pos} unexpected trailing bytes")
    return Checkpoint(header["kind"], header["config"], params, optim, header["meta"])


def save_checkpoint(ckpt, path):
    """Write atomically; an interrupted save never leaves a partial file at ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    os.replace(tmp, path)
    return path


def load_checkpoint(path, kind=None):
    path = Path(path)
    ckpt = from_bytes(path.read_bytes(), source=str(path))
    if kind is not None and ckpt.kind != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {ckpt.kind!r}")
    return ckpt


def model_checkpoint(kind, model, config, optimizer=None, **meta):
    """Snapshot a module (and optionally its AdamW state) into a Checkpoint."""
    optim = None
    if optimizer is not None:
        optim = optimizer.state_dict()
        meta["optimizer_step"] = optimizer.step_count
    return Checkpoint(kind, config, model.state_dict(), optim, meta)
