"""Activation frames and the VACT binary interchange format.

A frame holds, for every layer of the (external, frozen) feature extractor,
a dense ``neurons x samples`` float32 block: one scalar per spatial/token
position per neuron. Frames are produced either by an external dumper
writing the VACT format, or by the synthetic world in :mod:`vdnavpr.world`.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable, Iterator

import numpy as np

from .errors import FormatError, InvalidActivation, ShapeError

VACT_MAGIC = b"VACT"
VACT_VERSION = 1


@dataclass(frozen=True)
class LayerShape:
    """Shape of one layer's activation block: ``neurons`` rows of ``samples`` values."""

    neurons: int
    samples: int

    def __post_init__(self):
        if self.neurons < 1 or self.samples < 1:
            raise ShapeError(f"layer shape must be positive, got {self.neurons}x{self.samples}")


@dataclass(frozen=True)
class ActivationFrame:
    """Per-image activations, one float32 block per layer."""

    frame_id: str
    layer_values: tuple[np.ndarray, ...]

    def __post_init__(self):
        for li, block in enumerate(self.layer_values):
            if block.ndim != 2:
                raise ShapeError(f"layer {li} block must be 2-D, got {block.ndim}-D")
            if not np.isfinite(block).all():
                bad = int(np.argwhere(~np.isfinite(block))[0][0])
                raise InvalidActivation(
                    f"non-finite activation in frame {self.frame_id!r}, layer {li}",
                    neuron=bad,
                    frame_id=self.frame_id,
                )

    @property
    def total_neurons(self) -> int:
        return sum(block.shape[0] for block in self.layer_values)

    def layer_shapes(self) -> tuple[LayerShape, ...]:
        return tuple(LayerShape(b.shape[0], b.shape[1]) for b in self.layer_values)

    def iter_neuron_blocks(self) -> Iterator[tuple[int, np.ndarray]]:
        """Yield ``(dense_neuron_offset, block)`` for each layer in order."""
        offset = 0
        for block in self.layer_values:
            yield offset, block
            offset += block.shape[0]


def _check_frame_shapes(frame: ActivationFrame, layer_shapes: tuple[LayerShape, ...]) -> None:
    got = frame.layer_shapes()
    if got != tuple(layer_shapes):
        raise ShapeError(
            f"frame {frame.frame_id!r} layer shapes {got} do not match declared {tuple(layer_shapes)}"
        )


def write_activation_file(
    path,
    layer_shapes: Iterable[LayerShape],
    frames: Iterable[ActivationFrame],
) -> int:
    """Stream frames to a VACT file; returns the number of frames written.

    The frame count lives in the header, so the stream is buffered through a
    temporary in-file seek: the count is patched after all frames are written.
    """
    shapes = tuple(layer_shapes)
    written = 0
    with open(path, "wb") as fh:
        fh.write(VACT_MAGIC)
        fh.write(struct.pack("<I", VACT_VERSION))
        fh.write(struct.pack("<I", len(shapes)))
        for ls in shapes:
            fh.write(struct.pack("<II", ls.neurons, ls.samples))
        count_pos = fh.tell()
        fh.write(struct.pack("<Q", 0))
        for frame in frames:
            _check_frame_shapes(frame, shapes)
            fid = frame.frame_id.encode("utf-8")
            if len(fid) > 0xFFFF:
                raise FormatError(f"frame id too long ({len(fid)} bytes)")
            fh.write(struct.pack("<H", len(fid)))
            fh.write(fid)
            for block in frame.layer_values:
                fh.write(np.ascontiguousarray(block, dtype="<f4").tobytes())
            written += 1
        fh.seek(count_pos)
        fh.write(struct.pack("<Q", written))
    return written


def _read_exact(fh: BinaryIO, n: int, offset: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated activation file at byte {offset + len(buf)}")
    return buf


def read_activation_header(path) -> tuple[LayerShape, ...]:
    with open(path, "rb") as fh:
        shapes, _ = _parse_header(fh)
    return shapes


def _parse_header(fh: BinaryIO) -> tuple[tuple[LayerShape, ...], int]:
    magic = _read_exact(fh, 4, 0)
    if magic != VACT_MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {VACT_MAGIC!r}")
    (version,) = struct.unpack("<I", _read_exact(fh, 4, 4))
    if version != VACT_VERSION:
        raise FormatError(f"unsupported activation file version {version}")
    (layer_count,) = struct.unpack("<I", _read_exact(fh, 4, 8))
    shapes = []
    offset = 12
    for _ in range(layer_count):
        neurons, samples = struct.unpack("<II", _read_exact(fh, 8, offset))
        shapes.append(LayerShape(neurons, samples))
        offset += 8
    (frame_count,) = struct.unpack("<Q", _read_exact(fh, 8, offset))
    return tuple(shapes), frame_count


def read_activation_file(path) -> Iterator[ActivationFrame]:
    """Stream frames from a VACT file in file order (constant memory in frame count)."""
    with open(path, "rb") as fh:
        shapes, frame_count = _parse_header(fh)
        for _ in range(frame_count):
            offset = fh.tell()
            (id_len,) = struct.unpack("<H", _read_exact(fh, 2, offset))
            fid = _read_exact(fh, id_len, offset + 2).decode("utf-8")
            blocks = []
            for ls in shapes:
                offset = fh.tell()
                raw = _read_exact(fh, ls.neurons * ls.samples * 4, offset)
                blocks.append(
                    np.frombuffer(raw, dtype="<f4").reshape(ls.neurons, ls.samples)
                )
            yield ActivationFrame(fid, tuple(blocks))
