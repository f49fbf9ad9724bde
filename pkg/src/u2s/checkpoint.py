"""Binary checkpoint persistence with a bit-exact round trip.

Layout (all integers little-endian):
  magic           4 bytes  b"U2S1"
  version         u32
  fingerprint     u32 length + utf-8 bytes
  stage           u32 length + utf-8 bytes
  csm flag        u8; when 1: u64 length + utf-8 JSON (same schema as csm.json)
  parameters      u32 count, then name-sorted records
  optimizer       f64 lr, f64 momentum, f64 weight_decay, then velocity
                  records with the same layout as parameters

A record is: u32 name length, name utf-8, u32 rank, u64 extents[rank],
then rank-major (row-major) f64 values.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .autodiff import OptimizerState
from .csm import Csm, csm_from_dict, csm_to_dict

MAGIC = b"U2S1"
VERSION = 1


class CheckpointError(Exception):
    """Base class for checkpoint I/O failures."""


class CheckpointMagicError(CheckpointError):
    """File does not start with the checkpoint magic bytes."""


class CheckpointTruncatedError(CheckpointError):
    """File ended before the declared contents."""


class CheckpointVersionError(CheckpointError):
    """File uses an unsupported format version."""


class FingerprintMismatchError(CheckpointError):
    """Checkpoint was produced under a different configuration."""


@dataclass
class Checkpoint:
    fingerprint: str
    stage: str
    params: dict[str, np.ndarray]
    optimizer: OptimizerState
    csm: Csm | None = None
    class_names: list[str] = field(default_factory=list)
    version: int = VERSION


def _write_record(fh, name: str, arr: np.ndarray) -> None:
    encoded = name.encode("utf-8")
    fh.write(struct.pack("<I", len(encoded)))
    fh.write(encoded)
    fh.write(struct.pack("<I", arr.ndim))
    for extent in arr.shape:
        fh.write(struct.pack("<Q", extent))
    fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", ckpt.version))
        for text in (ckpt.fingerprint, ckpt.stage):
            encoded = text.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
        if ckpt.csm is None:
            fh.write(struct.pack("<B", 0))
        else:
            payload = json.dumps(
                csm_to_dict(ckpt.csm, ckpt.class_names), sort_keys=True
            ).encode("utf-8")
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)
        fh.write(struct.pack("<I", len(ckpt.params)))
        for name in sorted(ckpt.params):
            _write_record(fh, name, ckpt.params[name])
        opt = ckpt.optimizer
        fh.write(struct.pack("<ddd", opt.learning_rate, opt.momentum, opt.weight_decay))
        fh.write(struct.pack("<I", len(opt.velocity)))
        for name in sorted(opt.velocity):
            _write_record(fh, name, opt.velocity[name])


def _read(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointTruncatedError(f"expected {n} more bytes, got {len(data)}")
    return data


def _read_record(fh) -> tuple[str, np.ndarray]:
    (name_len,) = struct.unpack("<I", _read(fh, 4))
    name = _read(fh, name_len).decode("utf-8")
    (rank,) = struct.unpack("<I", _read(fh, 4))
    shape = tuple(struct.unpack("<Q", _read(fh, 8))[0] for _ in range(rank))
    count = int(np.prod(shape)) if shape else 1
    values = np.frombuffer(_read(fh, 8 * count), dtype="<f8").astype(np.float64)
    return name, values.reshape(shape)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if len(magic) < 4:
            raise CheckpointTruncatedError("file shorter than the magic header")
        if magic != MAGIC:
            raise CheckpointMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read(fh, 4))
        if version != VERSION:
            raise CheckpointVersionError(f"unsupported version {version}, expected {VERSION}")
        texts = []
        for _ in range(2):
            (n,) = struct.unpack("<I", _read(fh, 4))
            texts.append(_read(fh, n).decode("utf-8"))
        fingerprint, stage = texts
        (has_csm,) = struct.unpack("<B", _read(fh, 1))
        csm = None
        class_names: list[str] = []
        if has_csm:
            (n,) = struct.unpack("<Q", _read(fh, 8))
            csm, class_names = csm_from_dict(json.loads(_read(fh, n).decode("utf-8")))
        (count,) = struct.unpack("<I", _read(fh, 4))
        params = dict(_read_record(fh) for _ in range(count))
        lr, momentum, weight_decay = struct.unpack("<ddd", _read(fh, 24))
        (count,) = struct.unpack("<I", _read(fh, 4))
        velocity = dict(_read_record(fh) for _ in range(count))
        trailing = fh.read(1)
        if trailing:
            raise CheckpointError("trailing bytes after checkpoint payload")
    return Checkpoint(
        fingerprint=fingerprint,
        stage=stage,
        params=params,
        optimizer=OptimizerState(
            learning_rate=lr, momentum=momentum, weight_decay=weight_decay, velocity=velocity
        ),
        csm=csm,
        class_names=class_names,
        version=version,
    )
