"""Histogram binning specs: layer topology plus per-neuron value ranges.

Every VDNA references the spec it was binned against through a 16-byte
content hash, which makes cross-VDNA compatibility a checkable contract
instead of a silent mismatch.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .activations import ActivationFrame
from .errors import CalibrationEmpty, FormatError, InvalidActivation, SelectionError, ShapeError

DEFAULT_BINS = 500
DEFAULT_EXPANSION = 0.01

SPEC_TEXT_HEADER = "VDNA-SPEC v1"


@dataclass(frozen=True)
class HistogramSpec:
    """Binning contract: ordered ``(layer_index, neuron_count)`` pairs, a bin
    count shared by all neurons, and per-neuron ``[low, high)`` value ranges."""

    layers: tuple[tuple[int, int], ...]
    bins: int
    lows: np.ndarray
    highs: np.ndarray
    spec_id: bytes = field(init=False)

    def __post_init__(self):
        layers = tuple((int(i), int(n)) for i, n in self.layers)
        if not layers:
            raise ShapeError("spec needs at least one layer")
        if len({i for i, _ in layers}) != len(layers):
            raise ShapeError("duplicate layer indices")
        if any(n < 1 for _, n in layers):
            raise ShapeError("every layer needs at least one neuron")
        if self.bins < 2:
            raise ShapeError(f"bins must be >= 2, got {self.bins}")
        lows = np.ascontiguousarray(self.lows, dtype=np.float64)
        highs = np.ascontiguousarray(self.highs, dtype=np.float64)
        n_total = sum(n for _, n in layers)
        if lows.shape != (n_total,) or highs.shape != (n_total,):
            raise ShapeError(
                f"range arrays must have shape ({n_total},), got {lows.shape} / {highs.shape}"
            )
        if not np.all(lows < highs):
            bad = int(np.argmax(~(lows < highs)))
            raise ShapeError(f"neuron {bad}: low must be strictly below high")
        lows.setflags(write=False)
        highs.setflags(write=False)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "bins", int(self.bins))
        object.__setattr__(self, "lows", lows)
        object.__setattr__(self, "highs", highs)
        object.__setattr__(self, "spec_id", self._content_hash())

    def _content_hash(self) -> bytes:
        h = hashlib.blake2b(digest_size=16)
        h.update(b"HSPEC1")
        h.update(struct.pack("<I", self.bins))
        h.update(struct.pack("<I", len(self.layers)))
        for idx, n in self.layers:
            h.update(struct.pack("<iI", idx, n))
        h.update(self.lows.astype("<f8").tobytes())
        h.update(self.highs.astype("<f8").tobytes())
        return h.digest()

    @property
    def total_neurons(self) -> int:
        return sum(n for _, n in self.layers)

    @property
    def bin_widths(self) -> np.ndarray:
        return (self.highs - self.lows) / self.bins

    def layer_indices(self) -> tuple[int, ...]:
        return tuple(i for i, _ in self.layers)

    def layer_slice(self, layer_index: int) -> slice:
        """Dense neuron-index slice covering one layer."""
        offset = 0
        for idx, n in self.layers:
            if idx == layer_index:
                return slice(offset, offset + n)
            offset += n
        raise SelectionError(f"layer {layer_index} not in spec (have {self.layer_indices()})")

    def neurons_for_layers(self, layer_indexes: Iterable[int]) -> np.ndarray:
        parts = [np.arange(self.layer_slice(i).start, self.layer_slice(i).stop) for i in layer_indexes]
        if not parts:
            raise SelectionError("empty layer selection")
        return np.concatenate(parts)


def calibrate_spec(
    activation_source: Iterable[ActivationFrame],
    topology: Iterable[tuple[int, int]],
    bins: int = DEFAULT_BINS,
    expansion: float = DEFAULT_EXPANSION,
) -> HistogramSpec:
    """Derive per-neuron ranges from a calibration pass over activation frames.

    Ranges are the observed per-neuron ``(min, max)`` expanded outward by
    ``expansion * (max - min)`` on each side; a neuron whose values are all
    identical to ``v`` gets the range ``(v - 1, v + 1)``. Deterministic for a
    given input order.
    """
    layers = tuple((int(i), int(n)) for i, n in topology)
    n_total = sum(n for _, n in layers)
    mins = np.full(n_total, np.inf)
    maxs = np.full(n_total, -np.inf)
    seen = 0
    for frame in activation_source:
        if frame.total_neurons != n_total:
            raise ShapeError(
                f"frame {frame.frame_id!r} has {frame.total_neurons} neurons, topology declares {n_total}"
            )
        for offset, block in frame.iter_neuron_blocks():
            vals = block.astype(np.float64, copy=False)
            if not np.isfinite(vals).all():
                bad = offset + int(np.argwhere(~np.isfinite(vals))[0][0])
                raise InvalidActivation(
                    f"non-finite activation during calibration (neuron {bad}, frame {frame.frame_id!r})",
                    neuron=bad,
                    frame_id=frame.frame_id,
                )
            hi = offset + block.shape[0]
            np.minimum(mins[offset:hi], vals.min(axis=1), out=mins[offset:hi])
            np.maximum(maxs[offset:hi], vals.max(axis=1), out=maxs[offset:hi])
        seen += 1
    if seen == 0:
        raise CalibrationEmpty("calibration source yielded no frames")
    span = maxs - mins
    lows = mins - expansion * span
    highs = maxs + expansion * span
    degenerate = span == 0.0
    lows[degenerate] = mins[degenerate] - 1.0
    highs[degenerate] = maxs[degenerate] + 1.0
    return HistogramSpec(layers=layers, bins=bins, lows=lows, highs=highs)


def save_spec(path, spec: HistogramSpec) -> None:
    """Write the self-describing text form of a spec."""
    lines = [SPEC_TEXT_HEADER]
    lines.append(f"spec_id {spec.spec_id.hex()}")
    lines.append(f"bins {spec.bins}")
    lines.append(f"layers {len(spec.layers)}")
    for idx, n in spec.layers:
        lines.append(f"layer {idx} {n}")
    lines.append(f"ranges {spec.total_neurons}")
    for lo, hi in zip(spec.lows, spec.highs):
        lines.append(f"{float(lo)!r} {float(hi)!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_spec(path) -> HistogramSpec:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != SPEC_TEXT_HEADER:
        raise FormatError(f"not a spec document: expected header {SPEC_TEXT_HEADER!r}")
    try:
        declared_id = bytes.fromhex(lines[1].split()[1])
        bins = int(lines[2].split()[1])
        layer_count = int(lines[3].split()[1])
        layers = []
        for ln in lines[4 : 4 + layer_count]:
            _, idx, n = ln.split()
            layers.append((int(idx), int(n)))
        pos = 4 + layer_count
        n_total = int(lines[pos].split()[1])
        lows = np.empty(n_total)
        highs = np.empty(n_total)
        for i, ln in enumerate(lines[pos + 1 : pos + 1 + n_total]):
            lo, hi = ln.split()
            lows[i] = float(lo)
            highs[i] = float(hi)
    except (IndexError, ValueError) as exc:
        raise FormatError(f"malformed spec document: {exc}") from exc
    spec = HistogramSpec(layers=tuple(layers), bins=bins, lows=lows, highs=highs)
    if spec.spec_id != declared_id:
        raise FormatError(
            f"spec_id mismatch: document declares {declared_id.hex()}, fields hash to {spec.spec_id.hex()}"
        )
    return spec
