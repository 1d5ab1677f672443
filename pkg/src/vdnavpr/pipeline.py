"""Glue between manifests, activation frames, per-window VDNAs, and pools."""

from __future__ import annotations

from typing import Iterable, Mapping, Sequence

import numpy as np

from .activations import ActivationFrame, read_activation_file
from .errors import FormatError
from .spec import HistogramSpec
from .training import SequencePool, pool_from_vdnas
from .vdna import DEFAULT_SAMPLE_CAP, Vdna, accumulate, normalize
from .world import SequenceRecord, WorldManifest, window_sequences


def load_frames(path) -> dict[str, ActivationFrame]:
    """Read a whole activation file into an id-indexed dict (desk scale)."""
    return {frame.frame_id: frame for frame in read_activation_file(path)}


def window_vdnas(
    manifest: WorldManifest,
    frames_by_id: Mapping[str, ActivationFrame],
    spec: HistogramSpec,
    seq_len: int,
    stride: int = 1,
    sample_cap: int | None = DEFAULT_SAMPLE_CAP,
) -> tuple[list[SequenceRecord], list[Vdna]]:
    """One VDNA per consecutive-frame window.

    Each frame is binned once and shared across the overlapping windows that
    contain it (merge is exact, so this equals accumulating per window).
    """
    records = window_sequences(manifest, seq_len, stride)
    needed = {fid for rec in records for fid in rec.frame_ids}
    missing = sorted(needed - set(frames_by_id))
    if missing:
        raise FormatError(f"activation frames missing for {len(missing)} ids, e.g. {missing[:3]}")
    frame_counts: dict[str, np.ndarray] = {}
    for fid in sorted(needed):
        v = accumulate(Vdna.empty(spec), frames_by_id[fid], spec, sample_cap=sample_cap)
        frame_counts[fid] = v.counts
    vdnas = []
    for rec in records:
        counts = np.zeros((spec.total_neurons, spec.bins), dtype=np.uint64)
        for fid in rec.frame_ids:
            counts += frame_counts[fid]
        vdnas.append(Vdna(spec.spec_id, counts, len(rec.frame_ids)))
    return records, vdnas


def pool_from_manifest(
    manifest: WorldManifest,
    frames_by_id: Mapping[str, ActivationFrame],
    spec: HistogramSpec,
    seq_len: int,
    stride: int = 1,
    sample_cap: int | None = DEFAULT_SAMPLE_CAP,
) -> SequencePool:
    records, vdnas = window_vdnas(manifest, frames_by_id, spec, seq_len, stride, sample_cap)
    return pool_from_vdnas([normalize(v) for v in vdnas], records, spec)


def subset_pool(pool: SequencePool, indices: Sequence[int] | np.ndarray) -> SequencePool:
    idx = np.asarray(list(indices), dtype=np.int64)
    return SequencePool(pool.masses[idx], tuple(pool.records[i] for i in idx), pool.spec_id)


def split_pool_by_group(pool: SequencePool, db_group: str) -> tuple[SequencePool, SequencePool]:
    """Split into ``(db, queries)`` by traversal id: one traversal serves as the
    reference map, every other traversal queries it."""
    groups = pool.groups
    if db_group not in groups:
        raise ValueError(f"traversal {db_group!r} not present in pool (have {sorted(set(groups))})")
    db_idx = [i for i, g in enumerate(groups) if g == db_group]
    q_idx = [i for i, g in enumerate(groups) if g != db_group]
    return subset_pool(pool, db_idx), subset_pool(pool, q_idx)


def first_group(pool: SequencePool) -> str:
    if not len(pool):
        raise ValueError("empty pool has no groups")
    return pool.records[0].traversal_id


def concat_pools(pools: Iterable[SequencePool]) -> SequencePool:
    pools = list(pools)
    if not pools:
        raise ValueError("concat_pools needs at least one pool")
    spec_ids = {p.spec_id for p in pools}
    if len(spec_ids) != 1:
        raise ValueError("pools bound to different specs")
    masses = np.concatenate([p.masses for p in pools], axis=0)
    records = tuple(r for p in pools for r in p.records)
    return SequencePool(masses, records, spec_ids.pop())
