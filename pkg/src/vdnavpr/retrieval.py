"""Descriptor database, exact L2 nearest neighbours, and Recall@N evaluation.

Search is exact brute force: at desk scale (<= 1e5 entries) an ANN index buys
nothing, and exactness keeps tie-breaking a testable contract. Distances are
accumulated in float64 over float32 storage so summation order cannot flip a
tie.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .encoder import KIND_HEAD, KIND_NEURON_CONCAT, Descriptor, EncoderParams, encode_rows
from .errors import EmptyDatabase, FormatError, ShapeError
from .spec import HistogramSpec
from .vdna import NormalizedVdna
from .world import SequenceRecord, Threshold

DB_MAGIC = b"VPDB"
DB_VERSION = 1

_KIND_CODES = {KIND_NEURON_CONCAT: 0, KIND_HEAD: 1}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}

REPORT_TEXT_HEADER = "VPR-EVAL v1"


@dataclass
class DescriptorDb:
    """Insertion-order-preserving store of descriptors plus their sequence records."""

    matrix: np.ndarray
    records: tuple[SequenceRecord, ...]
    kind: str
    neuron_indices: tuple[int, ...] | None = None

    def __post_init__(self):
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2:
            raise ShapeError("db matrix must be 2-D")
        if len(self.records) != self.matrix.shape[0]:
            raise ShapeError(f"{len(self.records)} records for {self.matrix.shape[0]} rows")

    def __len__(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]


def build_db(descriptors: Sequence[Descriptor], records: Sequence[SequenceRecord]) -> DescriptorDb:
    """Stack descriptors into a database; mixed dims, kinds, or selections are rejected."""
    if len(descriptors) != len(records):
        raise ShapeError(f"{len(descriptors)} descriptors for {len(records)} records")
    if not descriptors:
        return DescriptorDb(np.zeros((0, 0), dtype=np.float32), (), KIND_NEURON_CONCAT, None)
    kinds = {d.kind for d in descriptors}
    dims = {len(d) for d in descriptors}
    selections = {d.neuron_indices for d in descriptors}
    if len(kinds) != 1 or len(dims) != 1 or len(selections) != 1:
        raise ShapeError(f"descriptors disagree: kinds={kinds}, dims={dims}")
    matrix = np.stack([d.values for d in descriptors]).astype(np.float32)
    return DescriptorDb(matrix, tuple(records), kinds.pop(), selections.pop())


def _squared_distances(matrix: np.ndarray, query: np.ndarray) -> np.ndarray:
    diff = matrix.astype(np.float64) - query.astype(np.float64)
    return np.einsum("ij,ij->i", diff, diff)


def knn(db: DescriptorDb, query: np.ndarray, n: int) -> list[tuple[SequenceRecord, float]]:
    """Exact top-``n`` by L2 distance; ties resolve to the lower insertion index.
    ``n`` larger than the database returns everything."""
    if len(db) == 0:
        raise EmptyDatabase("cannot query an empty descriptor database")
    if n < 1:
        raise ValueError("n must be >= 1")
    query = np.asarray(query, dtype=np.float64).reshape(-1)
    if query.shape[0] != db.dim:
        raise ShapeError(f"query dim {query.shape[0]} != db dim {db.dim}")
    d2 = _squared_distances(db.matrix, query)
    order = np.argsort(d2, kind="stable")[: min(n, len(db))]
    return [(db.records[i], float(np.sqrt(d2[i]))) for i in order]


def _geometric_hits(
    q_rec: SequenceRecord, db_records: Sequence[SequenceRecord], threshold: Threshold
) -> np.ndarray:
    if threshold.kind == "meters":
        dx = np.array([r.x for r in db_records]) - q_rec.x
        dy = np.array([r.y for r in db_records]) - q_rec.y
        return dx * dx + dy * dy <= threshold.value**2
    centers = np.array([r.center_pos for r in db_records])
    return np.abs(centers - q_rec.center_pos) <= threshold.value


@dataclass
class QueryResult:
    query_id: str
    retrieved_ids: tuple[str, ...]
    distances: tuple[float, ...]
    correct: tuple[bool, ...]


@dataclass
class EvalReport:
    recalls: dict[int, float]
    rows: list[QueryResult]
    excluded_ids: tuple[str, ...]
    eligible: int
    threshold: Threshold
    metadata: dict = field(default_factory=dict)

    def recall(self, n: int) -> float:
        return self.recalls[n]


def recall_at_n(
    db: DescriptorDb,
    queries: np.ndarray,
    query_records: Sequence[SequenceRecord],
    ns: Sequence[int],
    threshold: Threshold,
) -> EvalReport:
    """Recall@N against geometric ground truth.

    A query succeeds at N when any of its top-N retrievals lies within the
    threshold of its representative pose (or frame-index radius). Queries with
    no geometric positive anywhere in the database are excluded from the
    denominator and listed in the report.
    """
    if len(db) == 0:
        raise EmptyDatabase("cannot evaluate against an empty database")
    queries = np.asarray(queries, dtype=np.float64)
    if queries.ndim != 2 or queries.shape[1] != db.dim:
        raise ShapeError(f"queries must be (m, {db.dim}), got {queries.shape}")
    if queries.shape[0] != len(query_records):
        raise ShapeError(f"{queries.shape[0]} queries for {len(query_records)} records")
    ns = sorted(set(int(n) for n in ns))
    if not ns or ns[0] < 1:
        raise ValueError("ns must contain positive integers")
    top = min(max(ns), len(db))

    rows: list[QueryResult] = []
    excluded: list[str] = []
    successes = {n: 0 for n in ns}
    eligible = 0
    for qi, q_rec in enumerate(query_records):
        hits = _geometric_hits(q_rec, db.records, threshold)
        d2 = _squared_distances(db.matrix, queries[qi])
        order = np.argsort(d2, kind="stable")[:top]
        correct = tuple(bool(hits[i]) for i in order)
        rows.append(
            QueryResult(
                query_id=q_rec.window_id,
                retrieved_ids=tuple(db.records[i].window_id for i in order),
                distances=tuple(float(np.sqrt(d2[i])) for i in order),
                correct=correct,
            )
        )
        if not hits.any():
            excluded.append(q_rec.window_id)
            continue
        eligible += 1
        for n in ns:
            if any(correct[: min(n, top)]):
                successes[n] += 1
    recalls = {
        n: (100.0 * successes[n] / eligible if eligible else 0.0) for n in ns
    }
    return EvalReport(
        recalls=recalls,
        rows=rows,
        excluded_ids=tuple(excluded),
        eligible=eligible,
        threshold=threshold,
        metadata={"db_size": len(db), "kind": db.kind},
    )


def format_report(report: EvalReport) -> str:
    lines = [REPORT_TEXT_HEADER]
    for key in sorted(report.metadata):
        lines.append(f"meta {key} {report.metadata[key]}")
    lines.append(f"threshold {report.threshold.kind} {report.threshold.value!r}")
    lines.append(f"queries {len(report.rows)}")
    lines.append(f"eligible {report.eligible}")
    lines.append(f"excluded {len(report.excluded_ids)}")
    for qid in report.excluded_ids:
        lines.append(f"excluded_query {qid}")
    for n in sorted(report.recalls):
        lines.append(f"recall {n} {report.recalls[n]:.4f}")
    lines.append("columns query_id rank db_id distance correct")
    for row in report.rows:
        for rank, (rid, dist, ok) in enumerate(zip(row.retrieved_ids, row.distances, row.correct), start=1):
            lines.append(f"{row.query_id} {rank} {rid} {dist:.9e} {int(ok)}")
    return "\n".join(lines) + "\n"


def save_report(path, report: EvalReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(format_report(report))


@dataclass
class SweepEntry:
    label: str
    layer_indexes: tuple[int, ...]
    descriptor_length: int
    report: EvalReport


def embedding_blocks(params: EncoderParams, vdnas: Sequence[NormalizedVdna]) -> np.ndarray:
    """Per-neuron embeddings for many VDNAs: shape ``(n_vdnas, n_neurons, embed_dim)``.

    Encoding once and slicing per layer afterwards keeps a sweep linear in the
    number of VDNAs rather than layers x VDNAs.
    """
    if not vdnas:
        return np.zeros((0, params.n_neurons, params.config.embed_dim))
    rows = np.concatenate([nv.mass for nv in vdnas], axis=0)
    flat = encode_rows(params, rows)
    return flat.reshape(len(vdnas), params.n_neurons, params.config.embed_dim)


def layer_sweep(
    spec: HistogramSpec,
    params: EncoderParams,
    db_vdnas: Sequence[NormalizedVdna],
    db_records: Sequence[SequenceRecord],
    query_vdnas: Sequence[NormalizedVdna],
    query_records: Sequence[SequenceRecord],
    ns: Sequence[int],
    threshold: Threshold,
    layer_sets: Sequence[Sequence[int]] | None = None,
) -> list[SweepEntry]:
    """Evaluate layer-restricted descriptors.

    By default each layer of the spec is swept singly; ``layer_sets`` selects
    explicit layer combinations (e.g. ranges of late layers) instead.
    """
    for nv in (*db_vdnas, *query_vdnas):
        if nv.spec_id != spec.spec_id:
            raise ShapeError("all VDNAs must be bound to the sweep spec")
    if layer_sets is None:
        layer_sets = [(idx,) for idx in spec.layer_indices()]
    db_blocks = embedding_blocks(params, db_vdnas)
    q_blocks = embedding_blocks(params, query_vdnas)
    entries: list[SweepEntry] = []
    for layers in layer_sets:
        layers = tuple(int(v) for v in layers)
        idx = spec.neurons_for_layers(layers)
        db_matrix = db_blocks[:, idx, :].reshape(len(db_vdnas), -1).astype(np.float32)
        q_matrix = q_blocks[:, idx, :].reshape(len(query_vdnas), -1)
        db = DescriptorDb(db_matrix, tuple(db_records), KIND_NEURON_CONCAT, tuple(int(i) for i in idx))
        report = recall_at_n(db, q_matrix, query_records, ns, threshold)
        label = f"layers{','.join(str(v) for v in layers)}" if len(layers) > 1 else f"layer{layers[0]}"
        entries.append(SweepEntry(label, layers, db_matrix.shape[1], report))
    return entries


def _write_str(fh: BinaryIO, s: str) -> None:
    b = s.encode("utf-8")
    fh.write(struct.pack("<H", len(b)))
    fh.write(b)


def _read_exact(fh: BinaryIO, size: int) -> bytes:
    offset = fh.tell()
    buf = fh.read(size)
    if len(buf) != size:
        raise FormatError(f"truncated descriptor db at byte {offset + len(buf)}")
    return buf


def _read_str(fh: BinaryIO) -> str:
    (n,) = struct.unpack("<H", _read_exact(fh, 2))
    return _read_exact(fh, n).decode("utf-8")


def save_db(path, db: DescriptorDb) -> None:
    with open(path, "wb") as fh:
        fh.write(DB_MAGIC)
        fh.write(struct.pack("<I", DB_VERSION))
        fh.write(struct.pack("<IQB", db.dim, len(db), _KIND_CODES[db.kind]))
        fh.write(np.ascontiguousarray(db.matrix, dtype="<f4").tobytes())
        for rec in db.records:
            _write_str(fh, rec.window_id)
            _write_str(fh, rec.traversal_id)
            fh.write(struct.pack("<H", len(rec.frame_ids)))
            for fid in rec.frame_ids:
                _write_str(fh, fid)
            fh.write(struct.pack("<ddq", rec.x, rec.y, rec.center_pos))
        if db.neuron_indices is None:
            fh.write(struct.pack("<B", 0))
        else:
            fh.write(struct.pack("<B", 1))
            fh.write(struct.pack("<I", len(db.neuron_indices)))
            fh.write(np.asarray(db.neuron_indices, dtype="<i8").tobytes())


def load_db(path) -> DescriptorDb:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4)
        if magic != DB_MAGIC:
            raise FormatError(f"bad magic {magic!r}, expected {DB_MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4))
        if version != DB_VERSION:
            raise FormatError(f"unsupported descriptor db version {version}")
        dim, count, kind_code = struct.unpack("<IQB", _read_exact(fh, 13))
        if kind_code not in _KIND_NAMES:
            raise FormatError(f"unknown descriptor kind code {kind_code}")
        matrix = (
            np.frombuffer(_read_exact(fh, dim * count * 4), dtype="<f4").reshape(count, dim).copy()
        )
        records = []
        for _ in range(count):
            window_id = _read_str(fh)
            traversal_id = _read_str(fh)
            (n_frames,) = struct.unpack("<H", _read_exact(fh, 2))
            frame_ids = tuple(_read_str(fh) for _ in range(n_frames))
            x, y, center = struct.unpack("<ddq", _read_exact(fh, 24))
            records.append(SequenceRecord(window_id, traversal_id, frame_ids, x, y, int(center)))
        (has_sel,) = struct.unpack("<B", _read_exact(fh, 1))
        selection = None
        if has_sel:
            (n_sel,) = struct.unpack("<I", _read_exact(fh, 4))
            selection = tuple(
                int(v) for v in np.frombuffer(_read_exact(fh, n_sel * 8), dtype="<i8")
            )
    return DescriptorDb(matrix, tuple(records), _KIND_NAMES[kind_code], selection)


def merge_dbs(dbs: Iterable[DescriptorDb]) -> DescriptorDb:
    """Concatenate database shards (same dim/kind/selection), preserving order."""
    dbs = list(dbs)
    if not dbs:
        raise ShapeError("merge_dbs needs at least one database")
    dims = {db.dim for db in dbs}
    kinds = {db.kind for db in dbs}
    sels = {db.neuron_indices for db in dbs}
    if len(dims) != 1 or len(kinds) != 1 or len(sels) != 1:
        raise ShapeError(f"database shards disagree: dims={dims}, kinds={kinds}")
    matrix = np.concatenate([db.matrix for db in dbs], axis=0)
    records = tuple(rec for db in dbs for rec in db.records)
    return DescriptorDb(matrix, records, kinds.pop(), sels.pop())
