"""Binary checkpoint format.

Layout::

    b"MPDC" | uint32 version | uint32 header length | JSON header | payloads

All integers little-endian.  The header lists every tensor's name, group
(``param`` or ``buffer``) and shape in payload order; each payload is raw
little-endian float32.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .architectures import Network, NetworkSpec
from .tensor import RngState

MAGIC = b"MPDC"
VERSION = 1
_PREFIX = struct.Struct("<4sII")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    spec: NetworkSpec
    params: dict
    buffers: dict
    mean: np.ndarray
    std: np.ndarray
    class_weights: np.ndarray
    epoch: int = 0
    rng: RngState = field(default_factory=lambda: RngState(0))
    schedule: dict | None = None

    @property
    def role(self):
        return self.spec.role

    def network(self) -> Network:
        return Network(self.spec, self.params, self.buffers)


def _header(ck: Checkpoint, tensors):
    return {
        "spec": ck.spec.to_json(),
        "role": ck.spec.role,
        "normalization": {"mean": [float(v) for v in ck.mean], "std": [float(v) for v in ck.std]},
        "class_weights": [float(v) for v in ck.class_weights],
        "epoch": int(ck.epoch),
        "rng": ck.rng.to_dict(),
        "schedule": ck.schedule,
        "tensors": [{"name": n, "group": g, "shape": list(a.shape)} for g, n, a in tensors],
    }


def dumps(ck: Checkpoint) -> bytes:
    tensors = [("param", n, ck.params[n]) for n in sorted(ck.params)]
    tensors += [("buffer", n, ck.buffers[n]) for n in sorted(ck.buffers)]
    header = json.dumps(_header(ck, tensors), sort_keys=True).encode()
    chunks = [_PREFIX.pack(MAGIC, VERSION, len(header)), header]
    chunks += [np.ascontiguousarray(a, dtype="<f4").tobytes() for _, _, a in tensors]
    return b"".join(chunks)


def loads(data: bytes) -> Checkpoint:
    if len(data) < _PREFIX.size:
        raise CheckpointError("truncated checkpoint: missing file header")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (this build reads {VERSION})")
    start = _PREFIX.size
    if len(data) < start + hlen:
        raise CheckpointError("truncated checkpoint: incomplete JSON header")
    try:
        header = json.loads(data[start:start + hlen])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"corrupt checkpoint header: {e}") from None
    offset = start + hlen
    expected = sum(4 * int(np.prod(t["shape"])) for t in header["tensors"])
    if len(data) - offset != expected:
        kind = "truncated" if len(data) - offset < expected else "oversized"
        raise CheckpointError(f"{kind} checkpoint: payload is {len(data) - offset} bytes, header declares {expected}")
    params, buffers = {}, {}
    for t in header["tensors"]:
        shape = tuple(t["shape"])
        nbytes = 4 * int(np.prod(shape))
        arr = np.frombuffer(data, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape)
        (params if t["group"] == "param" else buffers)[t["name"]] = arr.astype(np.float32)
        offset += nbytes
    spec = NetworkSpec.from_json(header["spec"])
    norm = header["normalization"]
    return Checkpoint(spec, params, buffers, np.array(norm["mean"]), np.array(norm["std"]),
                      np.array(header["class_weights"]), header["epoch"], RngState.from_dict(header["rng"]),
                      header.get("schedule"))


def write_atomic(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_checkpoint(path, state, schedule=None):
    """Write a checkpoint from a ``TrainState`` or a ``Checkpoint``."""
    if isinstance(state, Checkpoint):
        ck = state
    else:
        ck = Checkpoint(state.net.spec, state.net.params, state.net.buffers, state.mean, state.std,
                        state.class_weights, state.epoch, state.rng,
                        schedule.to_json() | {"epoch": state.epoch} if schedule is not None else None)
    write_atomic(path, dumps(ck))
    return Path(path)


def load_checkpoint(path) -> Checkpoint:
    return loads(Path(path).read_bytes())
