"""Surrogate-guided clean-sample selection and noise-aware margin training
for classification datasets with unreliable labels, on precomputed
embeddings."""

from .data import (
    AlignmentReport,
    Dataset,
    LabelSpace,
    Sample,
    ScoreMatrix,
    load_dataset,
    load_score_matrix,
    save_dataset,
    save_score_matrix,
    validate_score_matrix,
)
from .errors import FormatError, NoiseLensError, TrainingDivergedError, ValidationError
from .experiment import (
    ExperimentConfig,
    ExperimentResult,
    config_from_text,
    load_experiment_config,
    run_experiment,
)
from .losses import (
    PRESET_DEEP_BACKBONE,
    PRESET_LINEAR_HEAD,
    LossBatch,
    MarginConfig,
    cross_entropy,
    focal_loss,
    nabm_loss_batch,
    nabm_probability,
)
from .noise import (
    CorruptionRecord,
    NoiseSpec,
    SelectionQuality,
    blob_means,
    inject_asymmetric,
    inject_instance_dependent,
    inject_noise,
    inject_symmetric,
    make_blobs,
    oracle_scores,
    selection_quality,
)
from .priors import (
    ClassPrior,
    TransitionMatrix,
    compute_class_prior,
    estimate_transition_matrix,
    load_class_prior,
    load_transition_matrix,
    save_class_prior,
    save_transition_matrix,
    transition_matrix_error,
)
from .report import (
    HistogramReport,
    SweepPoint,
    SweepReport,
    TrainingBundle,
    accuracy,
    confidence_histogram,
    threshold_sweep,
    top_k_accuracy,
)
from .scorer import (
    ClassEmbeddingBank,
    ScorerConfig,
    cosine_softmax_score,
    load_embedding_bank,
    save_embedding_bank,
    score_with_surrogate,
)
from .selection import (
    SelectionMask,
    apply_mask,
    apply_masks,
    js_divergence,
    load_mask,
    save_mask,
    select_by_confidence,
    select_by_prompt_consistency,
)
from .trainer import (
    LinearClassifier,
    PredictionResult,
    TrainConfig,
    TrainReport,
    init_classifier,
    load_classifier,
    predict,
    save_classifier,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "AlignmentReport",
    "ClassEmbeddingBank",
    "ClassPrior",
    "CorruptionRecord",
    "Dataset",
    "ExperimentConfig",
    "ExperimentResult",
    "FormatError",
    "HistogramReport",
    "LabelSpace",
    "LinearClassifier",
    "LossBatch",
    "MarginConfig",
    "NoiseLensError",
    "NoiseSpec",
    "PRESET_DEEP_BACKBONE",
    "PRESET_LINEAR_HEAD",
    "PredictionResult",
    "Sample",
    "ScoreMatrix",
    "ScorerConfig",
    "SelectionMask",
    "SelectionQuality",
    "SweepPoint",
    "SweepReport",
    "TrainConfig",
    "TrainReport",
    "TrainingBundle",
    "TrainingDivergedError",
    "TransitionMatrix",
    "ValidationError",
    "accuracy",
    "apply_mask",
    "apply_masks",
    "blob_means",
    "compute_class_prior",
    "config_from_text",
    "confidence_histogram",
    "cosine_softmax_score",
    "cross_entropy",
    "estimate_transition_matrix",
    "focal_loss",
    "inject_asymmetric",
    "inject_instance_dependent",
    "inject_noise",
    "inject_symmetric",
    "init_classifier",
    "js_divergence",
    "load_class_prior",
    "load_classifier",
    "load_dataset",
    "load_embedding_bank",
    "load_experiment_config",
    "load_mask",
    "load_score_matrix",
    "load_transition_matrix",
    "make_blobs",
    "nabm_loss_batch",
    "nabm_probability",
    "oracle_scores",
    "predict",
    "run_experiment",
    "save_class_prior",
    "save_classifier",
    "save_dataset",
    "save_embedding_bank",
    "save_mask",
    "save_score_matrix",
    "save_transition_matrix",
    "score_with_surrogate",
    "select_by_confidence",
    "select_by_prompt_consistency",
    "selection_quality",
    "threshold_sweep",
    "top_k_accuracy",
    "train",
    "transition_matrix_error",
    "validate_score_matrix",
]
