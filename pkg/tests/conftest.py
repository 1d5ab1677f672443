import numpy as np
import pytest

from vdnavpr.activations import ActivationFrame
from vdnavpr.spec import HistogramSpec


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_spec(layers=((1, 3), (2, 3)), bins=8, low=0.0, high=1.0):
    n = sum(c for _, c in layers)
    return HistogramSpec(
        layers=tuple(layers),
        bins=bins,
        lows=np.full(n, low),
        highs=np.full(n, high),
    )


def make_frame(frame_id, spec, values):
    """Build a frame from a dense (n_neurons, samples) array following the spec's layers."""
    values = np.asarray(values, dtype=np.float32)
    blocks = []
    offset = 0
    for _, count in spec.layers:
        blocks.append(values[offset : offset + count])
        offset += count
    return ActivationFrame(frame_id, tuple(blocks))


@pytest.fixture
def tiny_spec():
    return make_spec()
