import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from vdnavpr.errors import SpecMismatch
from vdnavpr.estimator import VdnaDescriptorEncoder
from vdnavpr.pipeline import window_vdnas
from vdnavpr.spec import calibrate_spec
from vdnavpr.vdna import normalize
from vdnavpr.world import SyntheticWorldConfig, generate_world

from test_pipeline import SMALL_ENC

from conftest import make_spec


@pytest.fixture(scope="module")
def fitted():
    config = SyntheticWorldConfig(
        seed=9,
        places=20,
        traversals=2,
        layers=2,
        neurons_per_layer=4,
        samples_per_neuron=8,
        appearance_scale=0.8,
        frame_noise_scale=0.2,
    )
    manifest, source = generate_world(config)
    frames = {f.frame_id: f for f in source}
    spec = calibrate_spec(iter(source), config.topology(), bins=16)
    records, vdnas = window_vdnas(manifest, frames, spec, seq_len=3)
    X = [normalize(v) for v in vdnas]
    y = np.array([(r.x, r.y) for r in records])
    groups = [r.traversal_id for r in records]
    est = VdnaDescriptorEncoder(
        spec=spec,
        encoder_config=SMALL_ENC,
        epochs=1,
        refreshes_per_epoch=1,
        refresh_every=24,
        cache_queries=12,
        cache_negatives=24,
        hardest_carryover=6,
        batch_triplets=6,
        threshold=1.5,
        seed=0,
    )
    est.fit(X, y, groups=groups)
    return est, spec, X


def test_get_params_round_trip_supports_clone(fitted):
    est, _, _ = fitted
    cloned = clone(est)
    assert cloned.get_params()["epochs"] == est.epochs
    assert not hasattr(cloned, "params_")


def test_transform_before_fit_raises():
    est = VdnaDescriptorEncoder(spec=make_spec())
    with pytest.raises(NotFittedError):
        est.transform([])


def test_fit_requires_spec_and_poses(fitted):
    _, spec, X = fitted
    with pytest.raises(ValueError):
        VdnaDescriptorEncoder().fit(X, np.zeros((len(X), 2)))
    with pytest.raises(ValueError):
        VdnaDescriptorEncoder(spec=spec).fit(X, None)
    with pytest.raises(ValueError):
        VdnaDescriptorEncoder(spec=spec, encoder_config=SMALL_ENC).fit(X, np.zeros((2, 2)))


def test_transform_shapes(fitted):
    est, spec, X = fitted
    out = est.transform(X[:5])
    assert out.shape == (5, spec.total_neurons * SMALL_ENC.embed_dim)
    norms = np.linalg.norm(out.reshape(5, spec.total_neurons, SMALL_ENC.embed_dim), axis=2)
    assert np.all(np.abs(norms - 1.0) < 1e-6)


def test_transform_layer_restriction(fitted):
    est, spec, X = fitted
    est_layers = clone(est).set_params(layers=(2,))
    est_layers.params_ = est.params_
    est_layers.n_neurons_ = est.n_neurons_
    out = est_layers.transform(X[:3])
    assert out.shape == (3, 4 * SMALL_ENC.embed_dim)


def test_transform_head_output(fitted):
    est, _, X = fitted
    est_head = clone(est).set_params(use_head=True)
    est_head.params_ = est.params_
    est_head.n_neurons_ = est.n_neurons_
    out = est_head.transform(X[:3])
    assert out.shape == (3, SMALL_ENC.head_dim)
    np.testing.assert_allclose(np.linalg.norm(out, axis=1), 1.0, atol=1e-9)


def test_transform_rejects_foreign_spec(fitted):
    est, _, _ = fitted
    foreign = make_spec(layers=((1, 4), (2, 4)), bins=16)
    mass = np.full((8, 16), 1.0 / 16)
    from vdnavpr.vdna import NormalizedVdna

    nv = NormalizedVdna(foreign.spec_id, mass, np.zeros(8, dtype=bool))
    with pytest.raises(SpecMismatch):
        est.transform([nv])


def test_fit_transform_empty_input_dim(fitted):
    est, spec, _ = fitted
    out = est.transform([])
    assert out.shape == (0, spec.total_neurons * SMALL_ENC.embed_dim)
