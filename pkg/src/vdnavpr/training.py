"""Triplet mining against a refreshed cache, and the encoder training loop.

Mining follows the weakly-supervised retrieval recipe: cache a batch of query
sequences and a pool of negatives, embed everything with the current weights,
pair each query with its descriptor-closest geometric positive and its
hardest (closest) geometric negatives, and periodically refresh the cache.
The hardest triplets of the previous period are replayed verbatim.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .encoder import EncoderConfig, EncoderParams, forward_rows, project_rows
from .errors import ShapeError, SpecMismatch, TrainingDataError
from .nn import AdamW, take_rows, triplet_loss_batch
from .nn.tensor import Tensor, reshape
from .retrieval import DescriptorDb, embedding_blocks, recall_at_n
from .encoder import KIND_NEURON_CONCAT
from .spec import HistogramSpec
from .vdna import NormalizedVdna
from .world import SequenceRecord, Threshold

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MiningConfig:
    """Cache sizes and refresh cadence for hard-example mining."""

    cache_queries: int = 1000
    cache_negatives: int = 5000
    hardest_carryover: int = 500
    refresh_every: int = 1500
    negatives_per_triplet: int = 5

    def __post_init__(self):
        for name in ("cache_queries", "cache_negatives", "hardest_carryover", "refresh_every", "negatives_per_triplet"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass(frozen=True)
class TrainConfig:
    margin: float = 0.1
    lr: float = 1e-4
    weight_decay: float = 1e-2
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 3
    refreshes_per_epoch: int = 2
    batch_triplets: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.margin < 0:
            raise ValueError("margin must be non-negative")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.refreshes_per_epoch < 1 or self.batch_triplets < 1:
            raise ValueError("refreshes_per_epoch and batch_triplets must be >= 1")


@dataclass
class SequencePool:
    """Windowed sequences ready for training or evaluation: stacked normalized
    histogram masses plus the matching sequence records."""

    masses: np.ndarray  # (n, n_neurons, bins) float64
    records: tuple[SequenceRecord, ...]
    spec_id: bytes

    def __post_init__(self):
        if self.masses.ndim != 3:
            raise ShapeError("pool masses must be (n, neurons, bins)")
        if self.masses.shape[0] != len(self.records):
            raise ShapeError(f"{self.masses.shape[0]} masses for {len(self.records)} records")

    def __len__(self) -> int:
        return self.masses.shape[0]

    @property
    def groups(self) -> tuple[str, ...]:
        return tuple(r.traversal_id for r in self.records)

    def vdnas(self) -> list[NormalizedVdna]:
        out = []
        for i in range(len(self)):
            mass = self.masses[i]
            empty = ~(mass.sum(axis=1) > 0)
            out.append(NormalizedVdna(self.spec_id, mass, empty))
        return out


def pool_from_vdnas(
    vdnas: Sequence[NormalizedVdna], records: Sequence[SequenceRecord], spec: HistogramSpec
) -> SequencePool:
    if len(vdnas) != len(records):
        raise ShapeError(f"{len(vdnas)} VDNAs for {len(records)} records")
    for nv in vdnas:
        if nv.spec_id != spec.spec_id:
            raise SpecMismatch("pool VDNAs must share the spec")
    masses = (
        np.stack([nv.mass for nv in vdnas])
        if vdnas
        else np.zeros((0, spec.total_neurons, spec.bins))
    )
    return SequencePool(masses, tuple(records), spec.spec_id)


@dataclass(frozen=True)
class TripletIds:
    query: int
    positive: int
    negatives: tuple[int, ...]

    def sequence_ids(self) -> tuple[int, ...]:
        return (self.query, self.positive, *self.negatives)


@dataclass
class RefreshRecord:
    refresh_index: int
    optimizer_step: int
    consumed_total: int
    fresh_triplets: int
    carried_triplets: int
    mean_loss: float
    max_loss: float
    active_fraction: float


@dataclass
class EpochRecord:
    epoch: int
    val_recall1: float | None
    best_recall1: float | None


@dataclass
class TrainingLog:
    refreshes: list[RefreshRecord] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)
    consumed_total: int = 0

    @property
    def refresh_count(self) -> int:
        return len(self.refreshes)

    def is_empty(self) -> bool:
        return not self.refreshes and not self.epochs

    def to_text(self) -> str:
        lines = ["VPR-TRAINLOG v1"]
        lines.append(
            "columns refresh step consumed fresh carried mean_loss max_loss active_frac"
        )
        for r in self.refreshes:
            lines.append(
                f"refresh {r.refresh_index} {r.optimizer_step} {r.consumed_total} "
                f"{r.fresh_triplets} {r.carried_triplets} {r.mean_loss:.6e} {r.max_loss:.6e} "
                f"{r.active_fraction:.4f}"
            )
        for e in self.epochs:
            val = "-" if e.val_recall1 is None else f"{e.val_recall1:.4f}"
            best = "-" if e.best_recall1 is None else f"{e.best_recall1:.4f}"
            lines.append(f"epoch {e.epoch} val_r1 {val} best_r1 {best}")
        return "\n".join(lines) + "\n"


def _within_threshold(records: Sequence[SequenceRecord], threshold: Threshold) -> np.ndarray:
    """Boolean (n, n) matrix of geometric closeness between pool records."""
    if threshold.kind == "meters":
        xy = np.array([(r.x, r.y) for r in records])
        d2 = ((xy[:, None, :] - xy[None, :, :]) ** 2).sum(axis=2)
        return d2 <= threshold.value**2
    centers = np.array([r.center_pos for r in records])
    return np.abs(centers[:, None] - centers[None, :]) <= threshold.value


@dataclass
class _MiningIndex:
    positives: list[np.ndarray]
    negative_mask: np.ndarray
    valid_queries: np.ndarray


def _build_mining_index(pool: SequencePool, threshold: Threshold, negatives_needed: int) -> _MiningIndex:
    n = len(pool)
    close = _within_threshold(pool.records, threshold)
    groups = np.array(pool.groups)
    multi_group = len(set(pool.groups)) > 1
    eye = np.eye(n, dtype=bool)
    if multi_group:
        # Positives must come from a different traversal so a window never
        # trains against its own overlapping neighbours.
        pos_mask = close & (groups[:, None] != groups[None, :])
    else:
        pos_mask = close & ~eye
    neg_mask = ~close & ~eye
    positives = [np.flatnonzero(pos_mask[i]) for i in range(n)]
    valid = np.array(
        [len(positives[i]) >= 1 and neg_mask[i].sum() >= negatives_needed for i in range(n)]
    )
    return _MiningIndex(positives, neg_mask, np.flatnonzero(valid))


def _head_descriptors(params: EncoderParams, pool: SequencePool, ids: np.ndarray) -> np.ndarray:
    """Current projection-head descriptors for the given pool items (no graph)."""
    consts = params.as_constants()
    n_neurons = params.n_neurons
    h = params.config.embed_dim
    out = np.empty((len(ids), params.config.head_dim))
    chunk = max(1, 8192 // max(1, n_neurons))
    for start in range(0, len(ids), chunk):
        batch = ids[start : start + chunk]
        rows = pool.masses[batch].reshape(len(batch) * n_neurons, params.config.bins)
        emb = forward_rows(consts, params.config, Tensor(rows))
        emb = reshape(emb, (len(batch), n_neurons * h))
        out[start : start + chunk] = project_rows(consts, emb).data
    return out


def _mine_triplets(
    params: EncoderParams,
    pool: SequencePool,
    index: _MiningIndex,
    mining: MiningConfig,
    rng: np.random.Generator,
) -> list[TripletIds]:
    n = len(pool)
    k = mining.negatives_per_triplet
    n_q = min(mining.cache_queries, len(index.valid_queries))
    cached_queries = rng.choice(index.valid_queries, size=n_q, replace=False)
    n_neg = min(mining.cache_negatives, n)
    cached_negatives = rng.choice(np.arange(n), size=n_neg, replace=False)

    needed = set(cached_queries.tolist()) | set(cached_negatives.tolist())
    for q in cached_queries:
        needed.update(index.positives[q].tolist())
    needed_ids = np.array(sorted(needed), dtype=np.int64)
    descriptors = _head_descriptors(params, pool, needed_ids)
    row_of = {int(sid): i for i, sid in enumerate(needed_ids)}

    triplets: list[TripletIds] = []
    neg_rows = np.array([row_of[int(j)] for j in cached_negatives])
    for q in cached_queries:
        dq = descriptors[row_of[int(q)]]
        pos_ids = index.positives[q]
        pos_rows = np.array([row_of[int(j)] for j in pos_ids])
        pos_dist = ((descriptors[pos_rows] - dq) ** 2).sum(axis=1)
        positive = int(pos_ids[int(np.argmin(pos_dist))])

        allowed = index.negative_mask[q][cached_negatives]
        candidates = cached_negatives[allowed]
        if len(candidates) < k:
            continue
        cand_rows = neg_rows[allowed]
        neg_dist = ((descriptors[cand_rows] - dq) ** 2).sum(axis=1)
        hardest = candidates[np.argsort(neg_dist, kind="stable")[:k]]
        triplets.append(TripletIds(int(q), positive, tuple(int(j) for j in hardest)))
    return triplets


def _train_period(
    params: EncoderParams,
    optimizer: AdamW,
    pool: SequencePool,
    triplets: list[TripletIds],
    mining: MiningConfig,
    train: TrainConfig,
) -> tuple[dict[TripletIds, float], int, int]:
    """Consume ``refresh_every`` triplets (cycling the period's list) with AdamW
    steps; returns the last observed loss per triplet, consumed count, steps."""
    losses: dict[TripletIds, float] = {}
    consumed = 0
    steps = 0
    cursor = 0
    n_neurons = params.n_neurons
    h = params.config.embed_dim
    while consumed < mining.refresh_every:
        remaining = mining.refresh_every - consumed
        batch: list[TripletIds] = []
        while len(batch) < min(train.batch_triplets, remaining):
            batch.append(triplets[cursor % len(triplets)])
            cursor += 1
        unique_ids = sorted({sid for t in batch for sid in t.sequence_ids()})
        row_of = {sid: i for i, sid in enumerate(unique_ids)}
        rows = pool.masses[np.array(unique_ids)].reshape(len(unique_ids) * n_neurons, params.config.bins)
        emb = forward_rows(params.tensors, params.config, Tensor(rows))
        emb = reshape(emb, (len(unique_ids), n_neurons * h))
        desc = project_rows(params.tensors, emb)

        anchors = take_rows(desc, np.array([row_of[t.query] for t in batch]))
        positives = take_rows(desc, np.array([row_of[t.positive] for t in batch]))
        flat_negs = np.array([row_of[j] for t in batch for j in t.negatives])
        negatives = reshape(
            take_rows(desc, flat_negs),
            (len(batch), mining.negatives_per_triplet, params.config.head_dim),
        )
        loss, per_triplet = triplet_loss_batch(anchors, positives, negatives, train.margin)
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        steps += 1
        consumed += len(batch)
        for t, value in zip(batch, per_triplet):
            losses[t] = float(value)
    return losses, consumed, steps


def _carryover(losses: dict[TripletIds, float], limit: int) -> list[TripletIds]:
    ranked = sorted(enumerate(losses.items()), key=lambda kv: (-kv[1][1], kv[0]))
    return [t for _, (t, _) in ranked[:limit]]


def pool_descriptor_matrix(
    params: EncoderParams,
    pool: SequencePool,
    selection: np.ndarray | None = None,
    use_head: bool = False,
) -> np.ndarray:
    """Descriptor matrix for a pool: neuron-concat (optionally layer-restricted)
    or projection-head output."""
    blocks = embedding_blocks(params, pool.vdnas())
    if use_head:
        flat = blocks.reshape(len(pool), params.n_neurons * params.config.embed_dim)
        consts = params.as_constants()
        return project_rows(consts, Tensor(flat)).data
    if selection is not None:
        blocks = blocks[:, selection, :]
    return blocks.reshape(len(pool), -1)


def evaluate_pools(
    params: EncoderParams,
    db_pool: SequencePool,
    query_pool: SequencePool,
    ns: Sequence[int],
    threshold: Threshold,
    selection: np.ndarray | None = None,
    use_head: bool = False,
):
    """Recall@N of one pool queried against another with fresh descriptors."""
    db_matrix = pool_descriptor_matrix(params, db_pool, selection, use_head)
    q_matrix = pool_descriptor_matrix(params, query_pool, selection, use_head)
    kind = "head" if use_head else KIND_NEURON_CONCAT
    db = DescriptorDb(db_matrix.astype(np.float32), db_pool.records, kind)
    return recall_at_n(db, q_matrix, query_pool.records, ns, threshold)


def mine_and_train(
    pool: SequencePool,
    spec: HistogramSpec,
    threshold: Threshold,
    encoder_config: EncoderConfig,
    mining: MiningConfig,
    train: TrainConfig,
    val: tuple[SequencePool, SequencePool] | None = None,
) -> tuple[EncoderParams, TrainingLog]:
    """Train encoder and head with mined triplets; deterministic in the seed.

    When a ``(db, queries)`` validation pair is given, the returned params are
    the epoch checkpoint with the best validation R@1 on head-free descriptors
    (the deployment configuration); otherwise the final params.
    """
    if pool.spec_id != spec.spec_id:
        raise SpecMismatch("pool and spec disagree")
    params = EncoderParams.init(encoder_config, spec, train.seed)
    log = TrainingLog()
    if train.epochs == 0:
        return params, log

    index = _build_mining_index(pool, threshold, mining.negatives_per_triplet)
    if len(index.valid_queries) == 0:
        raise TrainingDataError(
            "no query has at least one geometric positive and "
            f"{mining.negatives_per_triplet} geometric negatives"
        )
    rng = np.random.default_rng(train.seed)
    optimizer = AdamW(
        params.tensors, lr=train.lr, betas=train.betas, eps=train.eps, weight_decay=train.weight_decay
    )

    best_params: EncoderParams | None = None
    best_r1: float | None = None
    carryover: list[TripletIds] = []
    refresh_index = 0
    for epoch in range(1, train.epochs + 1):
        for _ in range(train.refreshes_per_epoch):
            refresh_index += 1
            fresh = _mine_triplets(params, pool, index, mining, rng)
            period = fresh + carryover
            if not period:
                raise TrainingDataError("mining produced no triplets")
            order = rng.permutation(len(period))
            period = [period[i] for i in order]
            losses, consumed, steps = _train_period(params, optimizer, pool, period, mining, train)
            log.consumed_total += consumed
            log.refreshes.append(
                RefreshRecord(
                    refresh_index=refresh_index,
                    optimizer_step=optimizer.step_count,
                    consumed_total=log.consumed_total,
                    fresh_triplets=len(fresh),
                    carried_triplets=len(carryover),
                    mean_loss=float(np.mean(list(losses.values()))),
                    max_loss=float(np.max(list(losses.values()))),
                    active_fraction=float(np.mean([v > 0 for v in losses.values()])),
                )
            )
            carryover = _carryover(losses, mining.hardest_carryover)
        val_r1 = None
        if val is not None:
            val_db, val_queries = val
            report = evaluate_pools(params, val_db, val_queries, [1], threshold)
            val_r1 = report.recalls[1]
            if best_r1 is None or val_r1 > best_r1:
                best_r1 = val_r1
                best_params = params.clone()
        log.epochs.append(EpochRecord(epoch=epoch, val_recall1=val_r1, best_recall1=best_r1))
        logger.info("epoch %d: val R@1 %s", epoch, "n/a" if val_r1 is None else f"{val_r1:.2f}")
    return (best_params if best_params is not None else params), log
