"""Earth mover's distance between histograms on a shared bin grid.

For two 1-D histograms over the same bins the optimal transport cost equals
the integrated absolute difference of their CDFs, scaled by the bin width.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, SpecMismatch
from .spec import HistogramSpec
from .vdna import NormalizedVdna

MASS_TOLERANCE = 1e-6


def emd_neuron(p: np.ndarray, q: np.ndarray, bin_width: float) -> float:
    """Exact 1-D EMD between two mass rows of equal length.

    Both rows must sum to 1 within 1e-6. Symmetric, and zero iff ``p == q``.
    """
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    if p.shape != q.shape or p.ndim != 1:
        raise ShapeError(f"mass rows must be 1-D with equal length, got {p.shape} vs {q.shape}")
    for name, row in (("p", p), ("q", q)):
        if abs(row.sum() - 1.0) > MASS_TOLERANCE:
            raise ValueError(f"{name} must sum to 1 (got {row.sum()!r})")
    return float(bin_width * np.abs(np.cumsum(p - q)).sum())


def emd_vdna(
    a: NormalizedVdna,
    b: NormalizedVdna,
    spec: HistogramSpec,
    neuron_weights: np.ndarray | None = None,
) -> float:
    """Weighted mean of per-neuron EMDs between two normalized VDNAs.

    Weights default to uniform; each neuron's EMD uses that neuron's bin
    width from the spec.
    """
    if a.spec_id != b.spec_id or a.spec_id != spec.spec_id:
        raise SpecMismatch("EMD requires both VDNAs and the spec to share a spec_id")
    per_neuron = per_neuron_emd(a, b, spec)
    n = per_neuron.shape[0]
    if neuron_weights is None:
        return float(per_neuron.mean())
    w = np.asarray(neuron_weights, dtype=np.float64)
    if w.shape != (n,):
        raise ShapeError(f"neuron_weights must have shape ({n},), got {w.shape}")
    if (w < 0).any():
        raise ValueError("neuron_weights must be non-negative")
    total = w.sum()
    if total == 0.0:
        raise ValueError("neuron_weights must not all be zero")
    return float((w * per_neuron).sum() / total)


def per_neuron_emd(a: NormalizedVdna, b: NormalizedVdna, spec: HistogramSpec) -> np.ndarray:
    """Vector of per-neuron EMDs (useful for layer-restricted comparisons)."""
    if a.mass.shape != b.mass.shape:
        raise ShapeError(f"mass shapes differ: {a.mass.shape} vs {b.mass.shape}")
    cdf_diff = np.cumsum(a.mass - b.mass, axis=1)
    return spec.bin_widths * np.abs(cdf_diff).sum(axis=1)
