"""Little-endian binary checkpoints.

Layout::

    magic "TKTRCKPT" | u32 version | u64 step | u32 epoch
    u32 config length | config text (utf-8)
    u32 count | count x record                      (parameters)
    u8 has_optimizer | [u32 count | records (first moments),
                        u32 count | records (second moments)]

    record = u32 name length | name | u32 rank | rank x u64 extent | float64 payload
"""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, field

import numpy as np

MAGIC = b"TKTRCKPT"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config_text: str
    params: dict[str, np.ndarray]
    step: int = 0
    epoch: int = 1
    moments: tuple[dict[str, np.ndarray], dict[str, np.ndarray]] | None = None
    version: int = VERSION


def _write_records(fh, arrays: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        fh.write(np.ascontiguousarray(arr).tobytes())


def _read_exact(fh, n: int) -> bytes:
    b = fh.read(n)
    if len(b) != n:
        raise CheckpointError("truncated checkpoint")
    return b


def _unpack(fh, fmt: str):
    return struct.unpack(fmt, _read_exact(fh, struct.calcsize(fmt)))


def _read_records(fh) -> dict[str, np.ndarray]:
    (count,) = _unpack(fh, "<I")
    out = {}
    for _ in range(count):
        (n,) = _unpack(fh, "<I")
        name = _read_exact(fh, n).decode("utf-8")
        (rank,) = _unpack(fh, "<I")
        shape = _unpack(fh, f"<{rank}Q") if rank else ()
        size = int(np.prod(shape, dtype=np.int64)) if rank else 1
        data = np.frombuffer(_read_exact(fh, 8 * size), dtype="<f8").astype(np.float64)
        out[name] = data.reshape(shape)
    return out


def dumps(ckpt: Checkpoint) -> bytes:
    fh = io.BytesIO()
    fh.write(MAGIC)
    fh.write(struct.pack("<IQI", ckpt.version, ckpt.step, ckpt.epoch))
    cfg = ckpt.config_text.encode("utf-8")
    fh.write(struct.pack("<I", len(cfg)))
    fh.write(cfg)
    _write_records(fh, ckpt.params)
    if ckpt.moments is None:
        fh.write(b"\x00")
    else:
        fh.write(b"\x01")
        _write_records(fh, ckpt.moments[0])
        _write_records(fh, ckpt.moments[1])
    return fh.getvalue()


def loads(blob: bytes) -> Checkpoint:
    fh = io.BytesIO(blob)
    if fh.read(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, step, epoch = _unpack(fh, "<IQI")
    if version != VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {VERSION})")
    (n,) = _unpack(fh, "<I")
    config_text = _read_exact(fh, n).decode("utf-8")
    params = _read_records(fh)
    moments = None
    if _read_exact(fh, 1) == b"\x01":
        moments = (_read_records(fh), _read_records(fh))
    return Checkpoint(config_text, params, step, epoch, moments, version)


def save(path: os.PathLike, ckpt: Checkpoint) -> None:
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(dumps(ckpt))
    os.replace(tmp, path)


def load(path: os.PathLike) -> Checkpoint:
    with open(path, "rb") as fh:
        return loads(fh.read())
