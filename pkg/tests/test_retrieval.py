import numpy as np
import pytest

from vdnavpr.encoder import Descriptor, EncoderParams
from vdnavpr.errors import EmptyDatabase, ShapeError
from vdnavpr.retrieval import (
    DescriptorDb,
    build_db,
    format_report,
    knn,
    layer_sweep,
    load_db,
    merge_dbs,
    recall_at_n,
    save_db,
)
from vdnavpr.vdna import NormalizedVdna
from vdnavpr.world import SequenceRecord, Threshold

from conftest import make_spec


def rec(window_id, x, y=0.0, traversal="t0", center=0):
    return SequenceRecord(window_id, traversal, (window_id,), x, y, center)


def db_from_values(values, positions=None):
    values = np.asarray(values, dtype=np.float64)
    positions = positions if positions is not None else [float(i) for i in range(len(values))]
    records = [rec(f"d{i}", positions[i], center=i) for i in range(len(values))]
    descs = [Descriptor(v, "neuron-concat", (0,)) for v in values]
    return build_db(descs, records)


def test_build_empty_db():
    db = build_db([], [])
    assert len(db) == 0
    with pytest.raises(EmptyDatabase):
        knn(db, np.zeros(1), 1)


def test_build_rejects_mixed():
    a = Descriptor(np.zeros(2), "neuron-concat", (0,))
    b = Descriptor(np.zeros(3), "neuron-concat", (0,))
    with pytest.raises(ShapeError):
        build_db([a, b], [rec("a", 0.0), rec("b", 1.0)])
    c = Descriptor(np.zeros(2), "head")
    with pytest.raises(ShapeError):
        build_db([a, c], [rec("a", 0.0), rec("b", 1.0)])


def test_duplicates_both_retrievable():
    db = db_from_values([[1.0, 2.0], [1.0, 2.0], [5.0, 5.0]])
    out = knn(db, np.array([1.0, 2.0]), 3)
    assert [r.window_id for r, _ in out] == ["d0", "d1", "d2"]
    assert out[0][1] == 0.0 and out[1][1] == 0.0


def test_knn_exact_match_first():
    db = db_from_values([[0.0], [3.0], [7.0]])
    out = knn(db, np.array([3.0]), 1)
    assert out[0][0].window_id == "d1"
    assert out[0][1] == 0.0


def test_knn_truncates_to_db_size():
    db = db_from_values([[0.0], [1.0]])
    assert len(knn(db, np.array([0.0]), 10)) == 2


def test_knn_matches_full_sort_oracle(rng):
    for _ in range(50):
        m, dim = int(rng.integers(1, 100)), int(rng.integers(1, 16))
        matrix = rng.normal(size=(m, dim)).astype(np.float32)
        # inject duplicates to force ties
        if m > 3:
            matrix[1] = matrix[0]
            matrix[m // 2] = matrix[0]
        db = DescriptorDb(matrix, tuple(rec(f"d{i}", float(i)) for i in range(m)), "neuron-concat")
        query = rng.normal(size=dim)
        n = int(rng.integers(1, m + 3))
        got = [r.window_id for r, _ in knn(db, query, n)]
        d2 = ((matrix.astype(np.float64) - query) ** 2).sum(axis=1)
        expected = [f"d{i}" for i in sorted(range(m), key=lambda i: (d2[i], i))[: min(n, m)]]
        assert got == expected


def test_knn_dim_mismatch():
    db = db_from_values([[0.0, 1.0]])
    with pytest.raises(ShapeError):
        knn(db, np.zeros(3), 1)


def test_recall_self_retrieval_is_100(rng):
    values = rng.normal(size=(8, 4))
    db = db_from_values(values)
    report = recall_at_n(db, values, db.records, [1, 5], Threshold.meters(0.5))
    assert report.recalls[1] == 100.0
    assert report.recalls[5] == 100.0
    assert report.eligible == 8


def test_recall_hand_enumerated_toy():
    # Three queries against five mapped places: exactly two succeed at N=1,
    # the third only finds its true place at rank 5.
    db = db_from_values([[0.0], [10.0], [20.0], [30.0], [40.0]], positions=[0.0, 10.0, 20.0, 30.0, 40.0])
    queries = np.array([[0.1], [10.1], [19.0]])
    q_records = [rec("q0", 0.0), rec("q1", 10.0), rec("q2", 40.0)]
    report = recall_at_n(db, queries, q_records, [1, 5], Threshold.meters(1.0))
    assert report.recalls[1] == 100.0 * 2.0 / 3.0
    assert report.recalls[5] == 100.0
    assert report.rows[2].correct[0] is False and report.rows[2].correct[4] is True


def test_recall_monotone_in_n(rng):
    values = rng.normal(size=(30, 3))
    db = db_from_values(values, positions=list(rng.uniform(0, 10, 30)))
    queries = rng.normal(size=(10, 3))
    q_records = [rec(f"q{i}", float(rng.uniform(0, 10))) for i in range(10)]
    report = recall_at_n(db, queries, q_records, [1, 5, 10], Threshold.meters(2.0))
    assert report.recalls[1] <= report.recalls[5] <= report.recalls[10]


def test_recall_excludes_queries_without_positives():
    db = db_from_values([[0.0]], positions=[0.0])
    queries = np.array([[0.0], [1.0]])
    q_records = [rec("near", 0.1), rec("far", 99.0)]
    report = recall_at_n(db, queries, q_records, [1], Threshold.meters(1.0))
    assert report.eligible == 1
    assert report.excluded_ids == ("far",)
    assert report.recalls[1] == 100.0


def test_recall_frame_threshold():
    db = build_db(
        [Descriptor(np.array([float(i)]), "neuron-concat", (0,)) for i in range(4)],
        [rec(f"d{i}", 0.0, center=i * 3) for i in range(4)],
    )
    queries = np.array([[0.2]])
    q_records = [rec("q0", 50.0, center=0)]
    report = recall_at_n(db, queries, q_records, [1], Threshold.frames(2))
    assert report.recalls[1] == 100.0  # nearest descriptor d0 has |center delta| 0


def test_recall_db_permutation_invariant(rng):
    values = rng.normal(size=(12, 3))
    positions = list(rng.uniform(0, 5, 12))
    queries = rng.normal(size=(6, 3))
    q_records = [rec(f"q{i}", float(rng.uniform(0, 5))) for i in range(6)]
    base = recall_at_n(db_from_values(values, positions), queries, q_records, [1, 3], Threshold.meters(1.0))
    perm = rng.permutation(12)
    shuffled = db_from_values(values[perm], [positions[i] for i in perm])
    other = recall_at_n(shuffled, queries, q_records, [1, 3], Threshold.meters(1.0))
    assert base.recalls == other.recalls


def test_recall_unchanged_by_far_appends(rng):
    values = rng.normal(size=(10, 3))
    positions = [float(i) * 0.1 for i in range(10)]
    queries = values[:4] + 0.01
    q_records = [rec(f"q{i}", positions[i]) for i in range(4)]
    base = recall_at_n(db_from_values(values, positions), queries, q_records, [1, 3], Threshold.meters(0.2))
    # entries farther in descriptor space than every existing distance, and
    # geometrically far, never enter any top-N
    far_values = np.vstack([values, values + 1000.0])
    far_positions = positions + [1e6 + i for i in range(10)]
    extended = recall_at_n(
        db_from_values(far_values, far_positions), queries, q_records, [1, 3], Threshold.meters(0.2)
    )
    assert base.recalls == extended.recalls


def test_report_text_is_stable(rng, tmp_path):
    values = rng.normal(size=(5, 2))
    db = db_from_values(values)
    queries = rng.normal(size=(2, 2))
    q_records = [rec("q0", 0.0), rec("q1", 1.0)]
    report = recall_at_n(db, queries, q_records, [1, 2], Threshold.meters(1.0))
    text = format_report(report)
    assert text.startswith("VPR-EVAL v1\n")
    assert format_report(report) == text


def test_db_round_trip(tmp_path, rng):
    values = rng.normal(size=(6, 3))
    db = db_from_values(values)
    path = tmp_path / "db.vpdb"
    save_db(path, db)
    loaded = load_db(path)
    assert loaded.matrix.tobytes() == db.matrix.tobytes()
    assert loaded.records == db.records
    assert loaded.kind == db.kind and loaded.neuron_indices == db.neuron_indices
    save_db(tmp_path / "again.vpdb", loaded)
    assert path.read_bytes() == (tmp_path / "again.vpdb").read_bytes()


def test_merge_dbs_preserves_order(rng):
    a = db_from_values(rng.normal(size=(3, 2)))
    b = db_from_values(rng.normal(size=(2, 2)))
    merged = merge_dbs([a, b])
    assert len(merged) == 5
    np.testing.assert_array_equal(merged.matrix[:3], a.matrix)
    with pytest.raises(ShapeError):
        merge_dbs([a, db_from_values(rng.normal(size=(2, 3)))])


def _random_nv(rng, spec):
    mass = rng.uniform(0.05, 1.0, size=(spec.total_neurons, spec.bins))
    mass /= mass.sum(axis=1, keepdims=True)
    return NormalizedVdna(spec.spec_id, mass, np.zeros(spec.total_neurons, dtype=bool))


def _sweep_setup(rng, layers):
    from test_encoder import TINY

    spec = make_spec(layers=layers, bins=8)
    params = EncoderParams.init(TINY, spec, 0)
    db_vdnas = [_random_nv(rng, spec) for _ in range(4)]
    q_vdnas = [_random_nv(rng, spec) for _ in range(2)]
    db_records = [rec(f"d{i}", float(i)) for i in range(4)]
    q_records = [rec(f"q{i}", float(i)) for i in range(2)]
    return spec, params, db_vdnas, db_records, q_vdnas, q_records


def test_layer_sweep_single_layer_spec(rng):
    spec, params, dv, dr, qv, qr = _sweep_setup(rng, ((1, 4),))
    entries = layer_sweep(spec, params, dv, dr, qv, qr, [1], Threshold.meters(0.5))
    assert len(entries) == 1
    assert entries[0].layer_indexes == (1,)


def test_layer_sweep_range_descriptor_length(rng):
    spec, params, dv, dr, qv, qr = _sweep_setup(rng, ((1, 2), (2, 2)))
    entries = layer_sweep(
        spec, params, dv, dr, qv, qr, [1], Threshold.meters(0.5), layer_sets=[(1, 2)]
    )
    # two layers of width 2 at embed_dim 2: length = 2 * 2 * 2
    assert entries[0].descriptor_length == 8
    single = layer_sweep(spec, params, dv, dr, qv, qr, [1], Threshold.meters(0.5))
    assert [e.descriptor_length for e in single] == [4, 4]
