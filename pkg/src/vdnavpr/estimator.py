"""Scikit-learn style front door for the histogram-descriptor encoder.

``fit`` runs triplet training over posed sequence VDNAs; ``transform`` turns
VDNAs into descriptor rows ready for any vector index. The projection head is
off by default at transform time, matching the deployment configuration.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .encoder import EncoderConfig
from .errors import SpecMismatch
from .retrieval import embedding_blocks
from .spec import HistogramSpec
from .training import (
    MiningConfig,
    SequencePool,
    TrainConfig,
    mine_and_train,
    pool_descriptor_matrix,
)
from .vdna import NormalizedVdna, Vdna, normalize
from .world import SequenceRecord, Threshold


def _as_normalized(item, spec: HistogramSpec) -> NormalizedVdna:
    if isinstance(item, Vdna):
        item = normalize(item)
    if not isinstance(item, NormalizedVdna):
        raise TypeError(f"expected Vdna or NormalizedVdna, got {type(item).__name__}")
    if item.spec_id != spec.spec_id:
        raise SpecMismatch("input VDNA is bound to a different spec")
    return item


def _check_poses(y, n: int) -> np.ndarray:
    poses = np.asarray(y, dtype=np.float64)
    if poses.shape != (n, 2):
        raise ValueError(f"y must be (n_sequences, 2) poses, got {poses.shape}")
    if not np.isfinite(poses).all():
        raise ValueError("poses must be finite")
    return poses


class VdnaDescriptorEncoder(BaseEstimator, TransformerMixin):
    """Trainable encoder from sequence VDNAs to compact retrieval descriptors.

    Parameters mirror the training pipeline: ``threshold`` is the geometric
    positive radius in meters (or a :class:`Threshold`), ``groups`` passed to
    ``fit`` mark traversals so positives always come from a different pass.

    After ``fit``, ``transform`` emits one descriptor row per VDNA: the
    concatenated per-neuron embeddings (optionally restricted to ``layers``),
    or the projection-head output when ``use_head=True``.
    """

    def __init__(
        self,
        spec: HistogramSpec | None = None,
        embed_dim: int = 4,
        head_dim: int = 128,
        margin: float = 0.1,
        lr: float = 1e-4,
        weight_decay: float = 1e-2,
        epochs: int = 3,
        refreshes_per_epoch: int = 2,
        batch_triplets: int = 4,
        cache_queries: int = 1000,
        cache_negatives: int = 5000,
        hardest_carryover: int = 500,
        refresh_every: int = 1500,
        negatives_per_triplet: int = 5,
        threshold: float | Threshold = 1.5,
        layers: tuple[int, ...] | None = None,
        use_head: bool = False,
        seed: int = 0,
        encoder_config: EncoderConfig | None = None,
    ):
        self.spec = spec
        self.embed_dim = embed_dim
        self.head_dim = head_dim
        self.margin = margin
        self.lr = lr
        self.weight_decay = weight_decay
        self.epochs = epochs
        self.refreshes_per_epoch = refreshes_per_epoch
        self.batch_triplets = batch_triplets
        self.cache_queries = cache_queries
        self.cache_negatives = cache_negatives
        self.hardest_carryover = hardest_carryover
        self.refresh_every = refresh_every
        self.negatives_per_triplet = negatives_per_triplet
        self.threshold = threshold
        self.layers = layers
        self.use_head = use_head
        self.seed = seed
        self.encoder_config = encoder_config

    def _resolved_threshold(self) -> Threshold:
        if isinstance(self.threshold, Threshold):
            return self.threshold
        return Threshold.meters(float(self.threshold))

    def _resolved_config(self) -> EncoderConfig:
        if self.encoder_config is not None:
            return self.encoder_config
        assert self.spec is not None
        return EncoderConfig(bins=self.spec.bins, embed_dim=self.embed_dim, head_dim=self.head_dim)

    def _build_pool(self, X, y, groups) -> SequencePool:
        assert self.spec is not None
        vdnas = [_as_normalized(item, self.spec) for item in X]
        poses = _check_poses(y, len(vdnas))
        if groups is None:
            group_names = ["all"] * len(vdnas)
        else:
            if len(groups) != len(vdnas):
                raise ValueError(f"groups has length {len(groups)}, expected {len(vdnas)}")
            group_names = [str(g) for g in groups]
        counters: dict[str, int] = {}
        records = []
        for i, g in enumerate(group_names):
            pos = counters.get(g, 0)
            counters[g] = pos + 1
            records.append(
                SequenceRecord(
                    window_id=f"seq{i:05d}",
                    traversal_id=g,
                    frame_ids=(f"seq{i:05d}",),
                    x=float(poses[i, 0]),
                    y=float(poses[i, 1]),
                    center_pos=pos,
                )
            )
        masses = np.stack([nv.mass for nv in vdnas])
        return SequencePool(masses, tuple(records), self.spec.spec_id)

    def fit(self, X, y, groups=None):
        """Train the encoder on sequence VDNAs ``X`` with 2-D poses ``y``.

        ``groups`` (one label per sequence, e.g. traversal ids) restricts
        positives to a different group than the query.
        """
        if self.spec is None:
            raise ValueError("a HistogramSpec is required: pass spec=... at construction")
        if y is None:
            raise ValueError("poses are required to mine triplets")
        pool = self._build_pool(X, y, groups)
        mining = MiningConfig(
            cache_queries=self.cache_queries,
            cache_negatives=self.cache_negatives,
            hardest_carryover=self.hardest_carryover,
            refresh_every=self.refresh_every,
            negatives_per_triplet=self.negatives_per_triplet,
        )
        train = TrainConfig(
            margin=self.margin,
            lr=self.lr,
            weight_decay=self.weight_decay,
            epochs=self.epochs,
            refreshes_per_epoch=self.refreshes_per_epoch,
            batch_triplets=self.batch_triplets,
            seed=self.seed,
        )
        self.params_, self.log_ = mine_and_train(
            pool, self.spec, self._resolved_threshold(), self._resolved_config(), mining, train
        )
        self.n_neurons_ = self.params_.n_neurons
        return self

    def transform(self, X) -> np.ndarray:
        """One descriptor row per VDNA."""
        if not hasattr(self, "params_"):
            raise NotFittedError("this encoder is not fitted yet; call fit first")
        assert self.spec is not None
        vdnas = [_as_normalized(item, self.spec) for item in X]
        if not vdnas:
            dim = (
                self.params_.config.head_dim
                if self.use_head
                else len(self._selection_indices()) * self.params_.config.embed_dim
            )
            return np.zeros((0, dim))
        if self.use_head:
            masses = np.stack([nv.mass for nv in vdnas])
            pool = SequencePool(masses, tuple(self._dummy_records(len(vdnas))), self.spec.spec_id)
            return pool_descriptor_matrix(self.params_, pool, use_head=True)
        blocks = embedding_blocks(self.params_, vdnas)
        idx = self._selection_indices()
        return blocks[:, idx, :].reshape(len(vdnas), -1)

    def _selection_indices(self) -> np.ndarray:
        assert self.spec is not None
        if self.layers is None:
            return np.arange(self.spec.total_neurons)
        return self.spec.neurons_for_layers(self.layers)

    def _dummy_records(self, n: int) -> list[SequenceRecord]:
        return [
            SequenceRecord(f"x{i:05d}", "transform", (f"x{i:05d}",), 0.0, 0.0, i) for i in range(n)
        ]
