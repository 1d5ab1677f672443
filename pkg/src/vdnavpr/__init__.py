"""Visual place recognition from per-neuron activation histograms.

The pipeline: collect per-neuron activation histograms over image sequences
(VDNAs), compare them directly with the earth mover's distance, or train a
small shared encoder that turns each histogram into a short embedding whose
concatenation is a practical L2-retrieval descriptor. A projection head used
only during triplet training is discarded at test time.
"""

from .activations import ActivationFrame, LayerShape, read_activation_file, write_activation_file
from .emd import emd_neuron, emd_vdna, per_neuron_emd
from .encoder import (
    Descriptor,
    EncoderConfig,
    EncoderParams,
    encode_histogram,
    encode_rows,
    encode_vdna,
    project_head,
    resolve_selection,
)
from .errors import (
    CalibrationEmpty,
    EmptyDatabase,
    FormatError,
    GraphError,
    InvalidActivation,
    SelectionError,
    ShapeError,
    SpecMismatch,
    TrainingDataError,
    VdnaError,
)
from .estimator import VdnaDescriptorEncoder
from .retrieval import (
    DescriptorDb,
    EvalReport,
    build_db,
    format_report,
    knn,
    layer_sweep,
    load_db,
    recall_at_n,
    save_db,
)
from .spec import HistogramSpec, calibrate_spec, load_spec, save_spec
from .training import (
    MiningConfig,
    SequencePool,
    TrainConfig,
    TrainingLog,
    evaluate_pools,
    mine_and_train,
    pool_from_vdnas,
)
from .vdna import (
    NormalizedVdna,
    Vdna,
    accumulate,
    load_vdna,
    merge,
    normalize,
    save_vdna,
    vdna_from_frames,
)
from .world import (
    SequenceRecord,
    SyntheticWorldConfig,
    Threshold,
    WorldManifest,
    generate_world,
    load_manifest,
    save_manifest,
    window_sequences,
)

__version__ = "0.1.0"
