"""The histogram encoder and descriptor assembly.

One small 1-D CNN (six conv layers, then three linear layers) maps each
normalized histogram row to a short embedding; its weights are shared across
all neurons. Per-neuron embeddings are L2-normalized individually and
concatenated in neuron-index order. A linear projection head on top of the
concatenation produces the compact training-time descriptor; the head is
dropped at test time so descriptors keep no training-domain specialization.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import nn
from .errors import SelectionError, ShapeError, SpecMismatch
from .nn.tensor import Tensor
from .spec import HistogramSpec
from .vdna import NormalizedVdna

KIND_NEURON_CONCAT = "neuron-concat"
KIND_HEAD = "head"

INFERENCE_CHUNK = 4096


@dataclass(frozen=True)
class EncoderConfig:
    """Architecture knobs. The layer counts are fixed (six conv, three linear);
    channel widths, kernel, strides, and the linear hidden sizes scale the stack
    to the histogram length."""

    bins: int = 500
    embed_dim: int = 4
    head_dim: int = 128
    conv_channels: tuple[int, ...] = (8, 8, 16, 16, 32, 32)
    conv_kernel: int = 5
    conv_strides: tuple[int, ...] = (1, 2, 1, 2, 1, 2)
    conv_padding: int = 2
    linear_hidden: tuple[int, int] = (256, 64)

    def __post_init__(self):
        if len(self.conv_channels) != 6 or len(self.conv_strides) != 6:
            raise ShapeError("the conv stack is fixed at six layers")
        if len(self.linear_hidden) != 2:
            raise ShapeError("the linear stack is fixed at three layers (two hidden sizes)")
        if self.embed_dim < 1 or self.head_dim < 1:
            raise ShapeError("embed_dim and head_dim must be >= 1")
        if self.bins < 2:
            raise ShapeError("bins must be >= 2")
        if any(c < 1 for c in self.conv_channels) or any(s < 1 for s in self.conv_strides):
            raise ShapeError("conv channels and strides must be >= 1")
        self.conv_lengths()  # validates every stage keeps length >= 1

    def conv_lengths(self) -> tuple[int, ...]:
        """Signal length after each conv layer."""
        lengths = []
        length = self.bins
        for stride in self.conv_strides:
            if length + 2 * self.conv_padding < self.conv_kernel:
                raise ShapeError(
                    f"kernel {self.conv_kernel} too large for length {length} with padding {self.conv_padding}"
                )
            length = (length + 2 * self.conv_padding - self.conv_kernel) // stride + 1
            if length < 1:
                raise ShapeError("conv stack collapses the signal below length 1")
            lengths.append(length)
        return tuple(lengths)

    def flatten_size(self) -> int:
        return self.conv_channels[-1] * self.conv_lengths()[-1]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        return cls(
            bins=int(d["bins"]),
            embed_dim=int(d["embed_dim"]),
            head_dim=int(d["head_dim"]),
            conv_channels=tuple(d["conv_channels"]),
            conv_kernel=int(d["conv_kernel"]),
            conv_strides=tuple(d["conv_strides"]),
            conv_padding=int(d["conv_padding"]),
            linear_hidden=tuple(d["linear_hidden"]),
        )


@dataclass
class Descriptor:
    """A retrieval vector: either per-neuron embedding blocks concatenated in
    neuron-index order, or the projection head's output."""

    values: np.ndarray
    kind: str
    neuron_indices: tuple[int, ...] | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ShapeError("descriptor values must be 1-D")
        if self.kind not in (KIND_NEURON_CONCAT, KIND_HEAD):
            raise ShapeError(f"unknown descriptor kind {self.kind!r}")

    def __len__(self) -> int:
        return self.values.shape[0]


class EncoderParams:
    """All encoder tensors plus the projection head, bound to one histogram spec."""

    def __init__(self, config: EncoderConfig, spec_id: bytes, n_neurons: int, tensors: dict[str, Tensor]):
        self.config = config
        self.spec_id = spec_id
        self.n_neurons = n_neurons
        expected = set(self.tensor_shapes(config, n_neurons))
        if set(tensors) != expected:
            raise ShapeError(f"parameter names {sorted(tensors)} != expected {sorted(expected)}")
        for name, shape in self.tensor_shapes(config, n_neurons).items():
            if tensors[name].shape != shape:
                raise ShapeError(f"tensor {name!r} has shape {tensors[name].shape}, expected {shape}")
        self.tensors = tensors

    @staticmethod
    def tensor_shapes(config: EncoderConfig, n_neurons: int) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        c_in = 1
        for i, c_out in enumerate(config.conv_channels):
            shapes[f"conv{i}.w"] = (c_out, c_in, config.conv_kernel)
            shapes[f"conv{i}.b"] = (c_out,)
            c_in = c_out
        sizes = (config.flatten_size(), *config.linear_hidden, config.embed_dim)
        for i in range(3):
            shapes[f"lin{i}.w"] = (sizes[i], sizes[i + 1])
            shapes[f"lin{i}.b"] = (sizes[i + 1],)
        shapes["head.w"] = (n_neurons * config.embed_dim, config.head_dim)
        return shapes

    @classmethod
    def init(cls, config: EncoderConfig, spec: HistogramSpec, seed: int) -> "EncoderParams":
        """He-style uniform fan-in initialization, deterministic in the seed."""
        if config.bins != spec.bins:
            raise SpecMismatch(f"config bins {config.bins} != spec bins {spec.bins}")
        rng = np.random.default_rng(seed)
        tensors: dict[str, Tensor] = {}
        for name, shape in cls.tensor_shapes(config, spec.total_neurons).items():
            if name.endswith(".b"):
                # small positive bias keeps narrow ReLU stacks alive at init,
                # so fresh params never emit all-zero embeddings
                data = np.full(shape, 0.01)
            else:
                # conv weight is (c_out, c_in, kernel); linear/head weight is (in, out)
                fan_in = shape[1] * shape[2] if name.startswith("conv") else shape[0]
                bound = np.sqrt(6.0 / fan_in)
                data = rng.uniform(-bound, bound, shape)
            tensors[name] = Tensor(data, requires_grad=True)
        return cls(config, spec.spec_id, spec.total_neurons, tensors)

    def clone(self) -> "EncoderParams":
        tensors = {name: Tensor(t.data.copy(), requires_grad=True) for name, t in self.tensors.items()}
        return EncoderParams(self.config, self.spec_id, self.n_neurons, tensors)

    def encoder_tensor_names(self) -> list[str]:
        return [n for n in sorted(self.tensors) if n != "head.w"]

    def as_constants(self) -> dict[str, Tensor]:
        """Gradient-free views sharing the parameter storage (for inference)."""
        return {name: Tensor(t.data) for name, t in self.tensors.items()}

    def save(self, path, optimizer: nn.AdamW | None = None) -> None:
        arrays = {name: t.data for name, t in self.tensors.items()}
        meta = {"encoder": self.config.to_dict(), "n_neurons": self.n_neurons}
        if optimizer is None:
            nn.save_checkpoint(path, arrays, self.spec_id, meta)
        else:
            nn.save_checkpoint(
                path,
                arrays,
                self.spec_id,
                meta,
                optimizer_hyper=optimizer.hyperparams(),
                optimizer_state=optimizer.state_arrays(),
            )

    @classmethod
    def load(cls, path) -> tuple["EncoderParams", dict | None, dict[str, np.ndarray] | None]:
        arrays, spec_id, meta, opt_hyper, opt_state = nn.load_checkpoint(path)
        config = EncoderConfig.from_dict(meta["encoder"])
        tensors = {name: Tensor(data, requires_grad=True) for name, data in arrays.items()}
        params = cls(config, spec_id, int(meta["n_neurons"]), tensors)
        return params, opt_hyper, opt_state


def forward_rows(tensors: dict[str, Tensor], config: EncoderConfig, rows: Tensor) -> Tensor:
    """Shared-weight forward pass over a batch of histogram rows.

    ``rows`` is ``(n, bins)`` of probability mass; the result is
    ``(n, embed_dim)`` with every row L2-normalized (zero rows stay zero per
    the epsilon rule). Mass rows are conditioned to deviation-from-uniform
    (``bins * mass - 1``) before the conv stack: raw mass values of order
    ``1/bins`` ride on a large common component that would otherwise drown
    the per-input signal at init.
    """
    n = rows.shape[0]
    rows = nn.sub(nn.mul(rows, float(config.bins)), 1.0)
    x = nn.reshape(rows, (n, 1, config.bins))
    for i, stride in enumerate(config.conv_strides):
        x = nn.relu(
            nn.conv1d(x, tensors[f"conv{i}.w"], tensors[f"conv{i}.b"], stride=stride, padding=config.conv_padding)
        )
    x = nn.reshape(x, (n, config.flatten_size()))
    x = nn.relu(nn.linear(x, tensors["lin0.w"], tensors["lin0.b"]))
    x = nn.relu(nn.linear(x, tensors["lin1.w"], tensors["lin1.b"]))
    x = nn.linear(x, tensors["lin2.w"], tensors["lin2.b"])
    return nn.l2_normalize(x, axis=-1)


def project_rows(tensors: dict[str, Tensor], embeddings: Tensor) -> Tensor:
    """Project concatenated embeddings ``(n, n_neurons * embed_dim)`` through the
    head and L2-normalize each output row."""
    return nn.l2_normalize(nn.matmul(embeddings, tensors["head.w"]), axis=-1)


def encode_rows(params: EncoderParams, rows: np.ndarray, chunk: int = INFERENCE_CHUNK) -> np.ndarray:
    """Inference path: no graph, processed in chunks to bound memory."""
    rows = np.asarray(rows, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != params.config.bins:
        raise ShapeError(f"rows must be (n, {params.config.bins}), got {rows.shape}")
    consts = params.as_constants()
    out = np.empty((rows.shape[0], params.config.embed_dim))
    for start in range(0, rows.shape[0], chunk):
        stop = min(start + chunk, rows.shape[0])
        out[start:stop] = forward_rows(consts, params.config, Tensor(rows[start:stop])).data
    return out


def encode_histogram(row: np.ndarray, params: EncoderParams) -> np.ndarray:
    """Embed one normalized histogram row (length ``bins``) to ``embed_dim``."""
    row = np.asarray(row, dtype=np.float64)
    if row.ndim != 1 or row.shape[0] != params.config.bins:
        raise ShapeError(f"row must have length {params.config.bins}, got shape {row.shape}")
    if abs(row.sum() - 1.0) > 1e-6:
        raise ValueError(f"row must sum to 1 (got {row.sum()!r}); normalize the VDNA first")
    return encode_rows(params, row[None, :])[0]


def resolve_selection(
    spec_or_n,
    selection: Sequence[int] | np.ndarray | None,
) -> np.ndarray:
    """Turn a neuron selection into validated dense indices.

    ``selection=None`` means all neurons. ``spec_or_n`` is the bound spec or
    just the total neuron count.
    """
    n = spec_or_n.total_neurons if isinstance(spec_or_n, HistogramSpec) else int(spec_or_n)
    if selection is None:
        return np.arange(n)
    idx = np.asarray(list(selection), dtype=np.int64)
    if idx.size == 0:
        raise SelectionError("selection must not be empty")
    if idx.min() < 0 or idx.max() >= n:
        raise SelectionError(f"neuron index out of range [0, {n}) in selection")
    return idx


def encode_vdna(
    nv: NormalizedVdna,
    params: EncoderParams,
    selection: Sequence[int] | np.ndarray | None = None,
) -> Descriptor:
    """Per-neuron embeddings for the selected neurons, concatenated in
    neuron-index order (the head is not applied)."""
    if nv.spec_id != params.spec_id:
        raise SpecMismatch("VDNA and encoder params are bound to different specs")
    if nv.mass.shape[0] != params.n_neurons:
        raise ShapeError(f"VDNA has {nv.mass.shape[0]} neurons, params expect {params.n_neurons}")
    idx = resolve_selection(params.n_neurons, selection)
    blocks = encode_rows(params, nv.mass[idx])
    return Descriptor(blocks.reshape(-1), KIND_NEURON_CONCAT, tuple(int(i) for i in idx))


def project_head(descriptor: Descriptor | np.ndarray, params: EncoderParams) -> Descriptor:
    """Apply the projection head to a full neuron-concat descriptor."""
    values = descriptor.values if isinstance(descriptor, Descriptor) else np.asarray(descriptor, dtype=np.float64)
    expected = params.n_neurons * params.config.embed_dim
    if values.ndim != 1 or values.shape[0] != expected:
        raise ShapeError(f"head input must have length {expected}, got {values.shape}")
    consts = params.as_constants()
    out = project_rows(consts, Tensor(values[None, :])).data[0]
    return Descriptor(out, KIND_HEAD, None)
