"""Part-stream skeleton action recognition on a self-contained autodiff core."""

from .tensor import (
    Tensor, Parameter, ShapeError, ConfigError, no_grad, grad_check,
)
from .skeleton import (
    SkeletonTopology, PartGroupSpec, get_topology, get_part_spec,
    disjoint_part_spec, part_subgraph, build_adjacency,
)
from .data import (
    ActionSequence, DatasetManifest, LoadError, load_manifest, load_sequence,
    write_skj, normalize_sequence, factorize_parts, SynthSpec, synth_dataset,
)
from .modalities import ModalitySelection, bones, velocity, assemble
from .model import (
    StreamConfig, ModelConfig, PartStreamModel, build_model, fuse,
    count_params, count_flops, save_checkpoint, load_checkpoint,
    restore_stream, default_model_config,
)
from .training import (
    TrainConfig, EvalReport, train_stream, evaluate, evaluate_partial,
    ablation_run, ablation_table_csv,
)

__version__ = "0.1.0"
