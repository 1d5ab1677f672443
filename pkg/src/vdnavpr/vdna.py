"""VDNA construction: per-neuron activation histograms over image sets.

Counts are 64-bit integers so that merging shards stays exact; out-of-range
values clamp into the edge bins so no mass is ever discarded and
normalization stays well-defined on unseen domains.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from typing import BinaryIO, Iterable

import numpy as np

from .activations import ActivationFrame
from .errors import FormatError, InvalidActivation, ShapeError, SpecMismatch
from .spec import HistogramSpec

VDNA_MAGIC = b"VDNA"
VDNA_VERSION = 1

DEFAULT_SAMPLE_CAP = 256


@dataclass
class Vdna:
    """Histogram counts for every neuron of a spec, plus the image count."""

    spec_id: bytes
    counts: np.ndarray
    image_count: int

    def __post_init__(self):
        if self.counts.ndim != 2:
            raise ShapeError(f"counts must be 2-D, got {self.counts.ndim}-D")
        if self.counts.dtype != np.uint64:
            self.counts = self.counts.astype(np.uint64)
        if self.image_count < 0:
            raise ShapeError("image_count must be non-negative")

    @classmethod
    def empty(cls, spec: HistogramSpec) -> "Vdna":
        return cls(spec.spec_id, np.zeros((spec.total_neurons, spec.bins), dtype=np.uint64), 0)

    @property
    def sample_counts(self) -> np.ndarray:
        """Total values inserted per neuron (row sums; clamping loses no mass)."""
        return self.counts.sum(axis=1)

    def copy(self) -> "Vdna":
        return Vdna(self.spec_id, self.counts.copy(), self.image_count)


@dataclass(frozen=True)
class NormalizedVdna:
    """Per-neuron probability mass rows; all-zero rows are emitted as the
    uniform distribution and flagged in ``empty_rows``."""

    spec_id: bytes
    mass: np.ndarray
    empty_rows: np.ndarray

    def __post_init__(self):
        if self.mass.ndim != 2 or self.empty_rows.shape != (self.mass.shape[0],):
            raise ShapeError("mass must be 2-D with one empty flag per row")


def _subsample(block: np.ndarray, sample_cap: int | None) -> np.ndarray:
    if sample_cap is None or block.shape[1] <= sample_cap:
        return block
    stride = math.ceil(block.shape[1] / sample_cap)
    return block[:, ::stride]


def accumulate(
    vdna: Vdna,
    frame: ActivationFrame,
    spec: HistogramSpec,
    sample_cap: int | None = None,
) -> Vdna:
    """Insert one image's activations into ``vdna`` (mutated and returned).

    Each value lands in ``floor((v - low) / width)`` clipped to ``[0, bins-1]``:
    bins are half-open with the last bin closed, values below ``low`` go to
    bin 0 and values at or above ``high`` go to the last bin.
    """
    if vdna.spec_id != spec.spec_id:
        raise SpecMismatch("vdna was built against a different spec")
    if frame.total_neurons != spec.total_neurons:
        raise ShapeError(
            f"frame {frame.frame_id!r} covers {frame.total_neurons} neurons, spec has {spec.total_neurons}"
        )
    bins = spec.bins
    widths = spec.bin_widths
    for offset, block in frame.iter_neuron_blocks():
        block = _subsample(block, sample_cap)
        vals = block.astype(np.float64, copy=False)
        if np.isnan(vals).any():
            bad = offset + int(np.argwhere(np.isnan(vals))[0][0])
            raise InvalidActivation(
                f"NaN activation (neuron {bad}, frame {frame.frame_id!r})",
                neuron=bad,
                frame_id=frame.frame_id,
            )
        hi = offset + block.shape[0]
        idx = np.floor((vals - spec.lows[offset:hi, None]) / widths[offset:hi, None])
        idx = np.clip(idx, 0, bins - 1).astype(np.int64)
        rows = np.repeat(np.arange(block.shape[0], dtype=np.int64), block.shape[1])
        flat = rows * bins + idx.ravel()
        binned = np.bincount(flat, minlength=block.shape[0] * bins)
        vdna.counts[offset:hi] += binned.reshape(block.shape[0], bins).astype(np.uint64)
    vdna.image_count += 1
    return vdna


def vdna_from_frames(
    frames: Iterable[ActivationFrame],
    spec: HistogramSpec,
    sample_cap: int | None = DEFAULT_SAMPLE_CAP,
) -> Vdna:
    out = Vdna.empty(spec)
    for frame in frames:
        accumulate(out, frame, spec, sample_cap=sample_cap)
    return out


def merge(a: Vdna, b: Vdna) -> Vdna:
    """Elementwise sum of two VDNAs over the same spec (commutative, exact)."""
    if a.spec_id != b.spec_id:
        raise SpecMismatch("cannot merge VDNAs built against different specs")
    if a.counts.shape != b.counts.shape:
        raise ShapeError(f"count shapes differ: {a.counts.shape} vs {b.counts.shape}")
    return Vdna(a.spec_id, a.counts + b.counts, a.image_count + b.image_count)


def normalize(vdna: Vdna) -> NormalizedVdna:
    """Divide each row by its sum; all-zero rows become uniform ``1/bins`` and
    are flagged so downstream consumers can tell real mass from the neutral fill."""
    sums = vdna.counts.sum(axis=1).astype(np.float64)
    empty = sums == 0.0
    safe = np.where(empty, 1.0, sums)
    mass = vdna.counts.astype(np.float64) / safe[:, None]
    if empty.any():
        mass[empty] = 1.0 / vdna.counts.shape[1]
    mass.setflags(write=False)
    empty.setflags(write=False)
    return NormalizedVdna(vdna.spec_id, mass, empty)


def save_vdna(path, vdna: Vdna) -> None:
    n, b = vdna.counts.shape
    with open(path, "wb") as fh:
        fh.write(VDNA_MAGIC)
        fh.write(struct.pack("<I", VDNA_VERSION))
        fh.write(vdna.spec_id)
        fh.write(struct.pack("<IIQ", n, b, vdna.image_count))
        fh.write(np.ascontiguousarray(vdna.counts, dtype="<u8").tobytes())


def _read_exact(fh: BinaryIO, size: int, offset: int) -> bytes:
    buf = fh.read(size)
    if len(buf) != size:
        raise FormatError(f"truncated VDNA file at byte {offset + len(buf)}")
    return buf


def load_vdna(path, spec: HistogramSpec | None = None) -> Vdna:
    """Read a VDNA file; when ``spec`` is given, validate the binding."""
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, 0)
        if magic != VDNA_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {VDNA_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, 4))
        if version != VDNA_VERSION:
            raise FormatError(f"unsupported VDNA file version {version}")
        spec_id = _read_exact(fh, 16, 8)
        n, b, image_count = struct.unpack("<IIQ", _read_exact(fh, 16, 24))
        raw = _read_exact(fh, n * b * 8, 40)
    counts = np.frombuffer(raw, dtype="<u8").reshape(n, b).copy()
    vdna = Vdna(spec_id, counts, image_count)
    if spec is not None:
        if spec.spec_id != spec_id:
            raise SpecMismatch("VDNA file was built against a different spec")
        if (n, b) != (spec.total_neurons, spec.bins):
            raise ShapeError(f"VDNA file shape {(n, b)} does not match spec")
    return vdna
