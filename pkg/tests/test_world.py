import numpy as np
import pytest

from vdnavpr.emd import emd_vdna
from vdnavpr.spec import calibrate_spec
from vdnavpr.vdna import normalize, vdna_from_frames
from vdnavpr.world import (
    FrameRecord,
    SyntheticWorldConfig,
    Threshold,
    WorldManifest,
    generate_world,
    load_manifest,
    save_manifest,
    split_manifest,
    window_sequences,
)


def make_manifest(traversal_lengths, step=1.0):
    frames = []
    for t, length in enumerate(traversal_lengths):
        for j in range(length):
            frames.append(FrameRecord(f"t{t}/f{j}", f"t{t}", j * step, 0.0, float(j)))
    return WorldManifest(tuple(frames), Threshold.meters(1.5))


def test_window_count():
    records = window_sequences(make_manifest([10]), seq_len=5, stride=1)
    assert len(records) == 6


def test_window_length_one_is_per_frame():
    manifest = make_manifest([4, 3])
    records = window_sequences(manifest, seq_len=1)
    assert len(records) == 7
    assert all(len(r.frame_ids) == 1 for r in records)


def test_windows_never_cross_traversals():
    records = window_sequences(make_manifest([7, 3]), seq_len=5)
    assert len(records) == 3
    assert {r.traversal_id for r in records} == {"t0"}
    for r in records:
        assert all(fid.startswith("t0/") for fid in r.frame_ids)


def test_representative_pose_is_middle_frame():
    records = window_sequences(make_manifest([10]), seq_len=5)
    assert records[0].x == 2.0 and records[0].center_pos == 2
    even = window_sequences(make_manifest([10]), seq_len=4)
    assert even[0].x == 1.0  # lower-middle for even lengths


def test_representative_pose_within_window_extent():
    manifest = make_manifest([12], step=0.7)
    for rec in window_sequences(manifest, seq_len=5, stride=2):
        xs = [float(fid.split("f")[-1]) * 0.7 for fid in rec.frame_ids]
        assert min(xs) <= rec.x <= max(xs)


def test_manifest_round_trip(tmp_path):
    manifest = make_manifest([5, 3], step=0.25)
    path = tmp_path / "world.manifest"
    save_manifest(path, manifest)
    loaded = load_manifest(path)
    assert loaded == manifest
    save_manifest(tmp_path / "again.manifest", loaded)
    assert path.read_bytes() == (tmp_path / "again.manifest").read_bytes()


def test_manifest_invariants():
    frames = (
        FrameRecord("a", "t0", 0.0, 0.0, 1.0),
        FrameRecord("a", "t0", 1.0, 0.0, 2.0),
    )
    with pytest.raises(Exception):
        WorldManifest(frames, Threshold.meters(1.0))


def small_config(**overrides):
    base = dict(
        seed=11,
        places=12,
        traversals=2,
        layers=3,
        neurons_per_layer=4,
        samples_per_neuron=8,
    )
    base.update(overrides)
    return SyntheticWorldConfig(**base)


def test_generate_world_deterministic():
    m1, s1 = generate_world(small_config())
    m2, s2 = generate_world(small_config())
    assert m1 == m2
    for f1, f2 in zip(s1, s2):
        assert f1.frame_id == f2.frame_id
        for b1, b2 in zip(f1.layer_values, f2.layer_values):
            assert b1.tobytes() == b2.tobytes()


def test_generate_world_pure_per_frame():
    _, source = generate_world(small_config())
    sequential = list(source)
    # random access in any order equals the sequential stream bit for bit
    for idx in [5, 0, 17, 3, 23]:
        frame = source.frame(idx)
        assert frame.frame_id == sequential[idx].frame_id
        for a, b in zip(frame.layer_values, sequential[idx].layer_values):
            assert a.tobytes() == b.tobytes()


def test_zero_nuisance_traversals_identical():
    config = small_config(appearance_scale=0.0, frame_noise_scale=0.0, sample_noise_scale=0.0)
    _, source = generate_world(config)
    frames = list(source)
    places = config.places
    for j in range(places):
        a, b = frames[j], frames[places + j]
        for ba, bb in zip(a.layer_values, b.layer_values):
            assert ba.tobytes() == bb.tobytes()


def test_depth_schedule_favors_late_layers_for_raw_emd_retrieval():
    # Appearance dwarfs the place signal in layer 1; layer L is pure place.
    config = small_config(
        places=16,
        appearance_scale=2.0,
        frame_noise_scale=0.0,
        sample_noise_scale=0.02,
    )
    manifest, source = generate_world(config)
    spec = calibrate_spec(iter(source), config.topology(), bins=32)
    frames = {f.frame_id: f for f in source}
    windows = window_sequences(manifest, seq_len=3)
    by_traversal = {}
    for rec in windows:
        by_traversal.setdefault(rec.traversal_id, []).append(rec)
    db, queries = by_traversal["t00"], by_traversal["t01"]
    vdnas = {
        rec.window_id: normalize(
            vdna_from_frames([frames[fid] for fid in rec.frame_ids], spec)
        )
        for rec in db + queries
    }

    def recall1(layer):
        weights = np.zeros(spec.total_neurons)
        weights[spec.layer_slice(layer)] = 1.0
        hits = 0
        for q in queries:
            dists = [emd_vdna(vdnas[q.window_id], vdnas[d.window_id], spec, weights) for d in db]
            best = db[int(np.argmin(dists))]
            hits += abs(best.x - q.x) <= manifest.threshold.value
        return hits / len(queries)

    first, last = config.topology()[0][0], config.topology()[-1][0]
    assert recall1(last) > recall1(first)


def test_split_manifest_takes_tails():
    manifest = make_manifest([10, 10])
    train, held = split_manifest(manifest, 0.3)
    assert len(train.frames) == 14 and len(held.frames) == 6
    train_ids = {f.frame_id for f in train.frames}
    held_ids = {f.frame_id for f in held.frames}
    assert not train_ids & held_ids
    assert "t0/f9" in held_ids and "t0/f0" in train_ids
