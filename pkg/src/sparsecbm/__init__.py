"""Concept-bottleneck text classification with concept-specific sparse
subnetworks, second-order pruning, and inference-time mask intervention."""

from .data import (
    DatasetSchema,
    Example,
    Split,
    SynthConfig,
    Vocabulary,
    generate_dataset_dir,
    load_dataset_dir,
    load_jsonl,
    save_jsonl,
    synth_generate,
    tokenize,
)
from .diffcore import (
    Block,
    GradRecord,
    ParamVector,
    affine,
    finite_difference_check,
    sigmoid,
    softmax_cross_entropy,
)
from .errors import ConfigError, DataError, NumericError
from .evaluation import MetricReport, accuracy, evaluate_split, macro_f1
from .explain import (
    MaskStats,
    PathwayTrace,
    build_trace,
    concept_contributions,
    mask_overlap,
    render_report,
    token_saliency,
)
from .intervention import (
    InterventionConfig,
    drop_grow,
    evaluate_intervention,
    oracle_intervene,
    saliency_scores,
    sparsity_intervene,
)
from .model import (
    ConceptActivations,
    MaskSet,
    ModelConfig,
    ModelParams,
    backward,
    encode,
    finite_difference_report,
    forward_pathway,
    init_params,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from .pruning import (
    FisherEstimate,
    PruneConfig,
    PruneReport,
    estimate_fisher,
    obs_score,
    obs_update,
    prune_step,
    prune_to_sparsity,
    quadratic_loss_increase,
)
from .training import (
    OptimizerState,
    TrainConfig,
    TrainResult,
    adam_step,
    decomposed_joint_loss,
    joint_loss,
    train,
)

__version__ = "0.1.0"
