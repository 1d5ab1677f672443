"""Versioned binary checkpoints: named float64 tensors plus optional optimizer state."""

from __future__ import annotations

import json
import struct
from typing import BinaryIO

import numpy as np

from ..errors import FormatError

CHECKPOINT_MAGIC = b"VPRW"
CHECKPOINT_VERSION = 1


def _write_tensor_table(fh: BinaryIO, tensors: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(tensors)))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        encoded = name.encode("utf-8")
        fh.write(struct.pack("<H", len(encoded)))
        fh.write(encoded)
        fh.write(struct.pack("<I", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def _read_exact(fh: BinaryIO, size: int) -> bytes:
    offset = fh.tell()
    buf = fh.read(size)
    if len(buf) != size:
        raise FormatError(f"truncated checkpoint at byte {offset + len(buf)}")
    return buf


def _read_tensor_table(fh: BinaryIO) -> dict[str, np.ndarray]:
    (count,) = struct.unpack("<I", _read_exact(fh, 4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read_exact(fh, 2))
        name = _read_exact(fh, name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
        shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        data = np.frombuffer(_read_exact(fh, size * 8), dtype="<f8").reshape(shape).copy()
        out[name] = data
    return out


def _json_bytes(obj: dict) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(
    path,
    tensors: dict[str, np.ndarray],
    spec_id: bytes,
    config: dict,
    optimizer_hyper: dict | None = None,
    optimizer_state: dict[str, np.ndarray] | None = None,
) -> None:
    if len(spec_id) != 16:
        raise FormatError(f"spec_id must be 16 bytes, got {len(spec_id)}")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(spec_id)
        cfg = _json_bytes(config)
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        _write_tensor_table(fh, tensors)
        if optimizer_hyper is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<B", 1))
            hyper = _json_bytes(optimizer_hyper)
            fh.write(struct.pack("<I", len(hyper)))
            fh.write(hyper)
            _write_tensor_table(fh, optimizer_state or {})


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], bytes, dict, dict | None, dict[str, np.ndarray] | None]:
    """Returns ``(tensors, spec_id, config, optimizer_hyper, optimizer_state)``."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != CHECKPOINT_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        spec_id = _read_exact(fh, 16)
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4))
        config = json.loads(_read_exact(fh, cfg_len).decode("utf-8"))
        tensors = _read_tensor_table(fh)
        (flag,) = struct.unpack("<B", _read_exact(fh, 1))
        hyper = None
        state = None
        if flag:
            (hyper_len,) = struct.unpack("<I", _read_exact(fh, 4))
            hyper = json.loads(_read_exact(fh, hyper_len).decode("utf-8"))
            state = _read_tensor_table(fh)
    return tensors, spec_id, config, hyper, state
