"""Trajectory manifests, sequence windowing, and a deterministic synthetic world.

The synthetic world stands in for a real feature extractor plus datasets at
desk scale: every frame's activations are a fixed smooth function of its
place latent, its traversal's appearance offset, and seeded noise. Early
layers are dominated by the appearance offset, late layers by the place
latent, so per-layer retrieval quality rises with depth by construction.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace
from typing import Iterator

import numpy as np

from .activations import ActivationFrame, LayerShape
from .errors import FormatError, ShapeError

logger = logging.getLogger(__name__)

MANIFEST_TEXT_HEADER = "VDNA-WORLD v1"


@dataclass(frozen=True)
class Threshold:
    """Ground-truth correctness radius: meters on poses, or a frame-index radius."""

    kind: str
    value: float

    def __post_init__(self):
        if self.kind not in ("meters", "frames"):
            raise ValueError(f"threshold kind must be 'meters' or 'frames', got {self.kind!r}")
        if self.value < 0:
            raise ValueError("threshold must be non-negative")

    @classmethod
    def meters(cls, value: float) -> "Threshold":
        return cls("meters", float(value))

    @classmethod
    def frames(cls, value: float) -> "Threshold":
        return cls("frames", float(value))


@dataclass(frozen=True)
class FrameRecord:
    frame_id: str
    traversal_id: str
    x: float
    y: float
    timestamp: float


@dataclass(frozen=True)
class WorldManifest:
    """Ordered frames with 2-D poses, grouped into traversals."""

    frames: tuple[FrameRecord, ...]
    threshold: Threshold
    domain_tag: str = "unknown"

    def __post_init__(self):
        ids = [f.frame_id for f in self.frames]
        if len(set(ids)) != len(ids):
            raise ShapeError("frame ids must be unique")
        last_ts: dict[str, float] = {}
        for f in self.frames:
            if f.traversal_id in last_ts and f.timestamp < last_ts[f.traversal_id]:
                raise ShapeError(
                    f"frames within traversal {f.traversal_id!r} must be temporally ordered"
                )
            last_ts[f.traversal_id] = f.timestamp

    def traversals(self) -> dict[str, list[FrameRecord]]:
        out: dict[str, list[FrameRecord]] = {}
        for f in self.frames:
            out.setdefault(f.traversal_id, []).append(f)
        return out


@dataclass(frozen=True)
class SequenceRecord:
    """One retrieval unit: a window of consecutive frames from one traversal.

    ``center_pos`` is the index of the representative (middle) frame within
    its traversal; frame-radius thresholds compare these indices.
    """

    window_id: str
    traversal_id: str
    frame_ids: tuple[str, ...]
    x: float
    y: float
    center_pos: int


def window_sequences(manifest: WorldManifest, seq_len: int, stride: int = 1) -> list[SequenceRecord]:
    """Consecutive-frame windows per traversal; windows never span traversal
    boundaries. The representative pose is the middle frame's (lower-middle
    for even lengths). Traversals shorter than ``seq_len`` contribute nothing."""
    if seq_len < 1 or stride < 1:
        raise ValueError("seq_len and stride must be >= 1")
    records: list[SequenceRecord] = []
    skipped = 0
    mid = (seq_len - 1) // 2
    for tid, frames in manifest.traversals().items():
        if len(frames) < seq_len:
            skipped += 1
            continue
        for start in range(0, len(frames) - seq_len + 1, stride):
            window = frames[start : start + seq_len]
            rep = window[mid]
            records.append(
                SequenceRecord(
                    window_id=f"{tid}:{start:05d}",
                    traversal_id=tid,
                    frame_ids=tuple(f.frame_id for f in window),
                    x=rep.x,
                    y=rep.y,
                    center_pos=start + mid,
                )
            )
    if skipped:
        logger.info("window_sequences: %d traversal(s) shorter than %d skipped", skipped, seq_len)
    return records


def save_manifest(path, manifest: WorldManifest) -> None:
    lines = [MANIFEST_TEXT_HEADER]
    lines.append(f"domain {manifest.domain_tag}")
    lines.append(f"threshold {manifest.threshold.kind} {manifest.threshold.value!r}")
    lines.append(f"frames {len(manifest.frames)}")
    lines.append("columns frame_id traversal_id x y timestamp")
    for f in manifest.frames:
        lines.append(f"{f.frame_id} {f.traversal_id} {f.x!r} {f.y!r} {f.timestamp!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def load_manifest(path) -> WorldManifest:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh]
    if not lines or lines[0] != MANIFEST_TEXT_HEADER:
        raise FormatError(f"not a world manifest: expected header {MANIFEST_TEXT_HEADER!r}")
    try:
        domain = lines[1].split(maxsplit=1)[1]
        _, kind, value = lines[2].split()
        count = int(lines[3].split()[1])
        frames = []
        for ln in lines[5 : 5 + count]:
            fid, tid, x, y, ts = ln.split()
            frames.append(FrameRecord(fid, tid, float(x), float(y), float(ts)))
    except (IndexError, ValueError) as exc:
        raise FormatError(f"malformed world manifest: {exc}") from exc
    return WorldManifest(tuple(frames), Threshold(kind, float(value)), domain)


@dataclass(frozen=True)
class SyntheticWorldConfig:
    """Knobs for the synthetic world.

    ``appearance_scale`` sets per-traversal appearance offsets (strongest in
    early layers), ``frame_noise_scale`` a per-frame per-neuron histogram
    location jitter, and ``sample_noise_scale`` independent per-sample noise.
    """

    seed: int
    places: int = 200
    traversals: int = 2
    step: float = 1.0
    appearance_scale: float = 1.0
    frame_noise_scale: float = 0.3
    sample_noise_scale: float = 0.05
    layers: int = 4
    neurons_per_layer: int = 16
    samples_per_neuron: int = 32
    latent_dim: int = 8
    loc_radius: float | None = None
    domain_tag: str = "synthetic"

    def __post_init__(self):
        for name in ("places", "traversals", "layers", "neurons_per_layer", "samples_per_neuron", "latent_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        for name in ("appearance_scale", "frame_noise_scale", "sample_noise_scale"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.step <= 0:
            raise ValueError("step must be positive")

    @property
    def threshold(self) -> Threshold:
        radius = self.loc_radius if self.loc_radius is not None else 1.5 * self.step
        return Threshold.meters(radius)

    def topology(self) -> tuple[tuple[int, int], ...]:
        """Layer list as ``(layer_index, neuron_count)``; layers are 1-based."""
        return tuple((i + 1, self.neurons_per_layer) for i in range(self.layers))


# Seed-stream tags: keep the per-entity RNGs independent of each other.
_STREAM_PLACE = 1
_STREAM_TRAVERSAL = 2
_STREAM_NEURON = 3
_STREAM_FRAME = 4


class SyntheticActivationSource:
    """Pure per-frame activation generator: ``frame(i)`` depends only on the
    config and the frame index, so shard-parallel generation equals sequential."""

    def __init__(self, config: SyntheticWorldConfig):
        self.config = config
        c = config
        self.n_neurons = c.layers * c.neurons_per_layer
        self.frame_count = c.places * c.traversals

        self.place_latents = np.stack(
            [self._rng(_STREAM_PLACE, j).standard_normal(c.latent_dim) for j in range(c.places)]
        )
        self.traversal_offsets = np.stack(
            [
                self._rng(_STREAM_TRAVERSAL, t).standard_normal(c.latent_dim) * c.appearance_scale
                for t in range(c.traversals)
            ]
        )
        w = np.empty((self.n_neurons, c.latent_dim))
        u = np.empty((self.n_neurons, c.latent_dim))
        phases = np.empty((self.n_neurons, c.samples_per_neuron))
        for i in range(self.n_neurons):
            rng = self._rng(_STREAM_NEURON, i)
            wv = rng.standard_normal(c.latent_dim)
            uv = rng.standard_normal(c.latent_dim)
            w[i] = wv / np.linalg.norm(wv)
            u[i] = uv / np.linalg.norm(uv)
            phases[i] = rng.uniform(-2.0, 2.0, c.samples_per_neuron)
        self.w = w
        self.u = u
        self.phases = phases

        # Depth schedule: place gain rises with depth, appearance gain falls.
        if c.layers > 1:
            depth = np.arange(c.layers) / (c.layers - 1)
        else:
            depth = np.ones(1)
        self.place_gain = np.repeat(depth, c.neurons_per_layer)
        self.appearance_gain = np.repeat(1.0 - depth, c.neurons_per_layer)

    def _rng(self, stream: int, index: int) -> np.random.Generator:
        return np.random.default_rng([self.config.seed, stream, index])

    def layer_shapes(self) -> tuple[LayerShape, ...]:
        c = self.config
        return tuple(LayerShape(c.neurons_per_layer, c.samples_per_neuron) for _ in range(c.layers))

    def frame_id(self, index: int) -> str:
        c = self.config
        t, j = divmod(index, c.places)
        return f"t{t:02d}/f{j:05d}"

    def frame(self, index: int) -> ActivationFrame:
        c = self.config
        if not (0 <= index < self.frame_count):
            raise IndexError(f"frame index {index} out of range")
        t, j = divmod(index, c.places)
        rng = self._rng(_STREAM_FRAME, index)
        shift = rng.standard_normal(self.n_neurons) * c.frame_noise_scale
        noise = rng.standard_normal((self.n_neurons, c.samples_per_neuron)) * c.sample_noise_scale

        proj_place = self.w @ self.place_latents[j]
        proj_app = self.u @ self.traversal_offsets[t]
        vals = (
            self.place_gain[:, None] * np.tanh(proj_place[:, None] + self.phases)
            + (self.appearance_gain * proj_app)[:, None]
            + shift[:, None]
            + noise
        ).astype(np.float32)
        blocks = tuple(
            vals[lo : lo + c.neurons_per_layer]
            for lo in range(0, self.n_neurons, c.neurons_per_layer)
        )
        return ActivationFrame(self.frame_id(index), blocks)

    def __iter__(self) -> Iterator[ActivationFrame]:
        for i in range(self.frame_count):
            yield self.frame(i)


def generate_world(config: SyntheticWorldConfig) -> tuple[WorldManifest, SyntheticActivationSource]:
    """Build the manifest and activation source for a synthetic world.

    Traversals revisit the same line of places in the same order; poses are
    shared across traversals so ground truth is exact.
    """
    source = SyntheticActivationSource(config)
    frames = []
    for t in range(config.traversals):
        for j in range(config.places):
            frames.append(
                FrameRecord(
                    frame_id=source.frame_id(t * config.places + j),
                    traversal_id=f"t{t:02d}",
                    x=j * config.step,
                    y=0.0,
                    timestamp=float(j),
                )
            )
    manifest = WorldManifest(tuple(frames), config.threshold, config.domain_tag)
    return manifest, source


def split_manifest(manifest: WorldManifest, holdout_fraction: float) -> tuple[WorldManifest, WorldManifest]:
    """Split each traversal's tail off into a held-out manifest (by frame count)."""
    if not (0.0 < holdout_fraction < 1.0):
        raise ValueError("holdout_fraction must be in (0, 1)")
    keep: list[FrameRecord] = []
    held: list[FrameRecord] = []
    for _, frames in manifest.traversals().items():
        cut = len(frames) - max(1, math.floor(len(frames) * holdout_fraction))
        keep.extend(frames[:cut])
        held.extend(frames[cut:])
    return (
        replace(manifest, frames=tuple(keep)),
        replace(manifest, frames=tuple(held)),
    )
