"""Few-shot learning by synthesizing feature-space samples from learned
intra-class deformations."""

from .data import (
    DatasetError,
    FeatureDataset,
    FormatError,
    GenerationError,
    IntegrityError,
    SyntheticSpec,
    TruncatedFileError,
    export_embeddings,
    gen_synthetic,
    load_dataset,
    load_model,
    save_dataset,
    save_model,
)
from .fewshot import (
    ClassifierConfig,
    Episode,
    EpisodeError,
    EvalReport,
    LinearClassifier,
    baseline_nearest_neighbor,
    draw_episode,
    evaluate,
    evaluate_nearest_neighbor,
    run_episode,
    sweep_samples,
    train_linear_classifier,
)
from .model import (
    VARIANTS,
    ArchConfig,
    DeltaCode,
    DeltaEncoderModel,
    StateError,
    TrainConfig,
    build_model,
    make_training_pairs,
    sample_z,
    synthesize,
    synthesize_kshot,
    train,
)
from .nn import (
    AdamState,
    ConfigError,
    Dense,
    DropoutSpec,
    ShapeError,
    TrainingError,
    adam_step,
    adaptive_weights,
    dense_forward,
    finite_difference_check,
    softmax,
    softmax_cross_entropy,
    weighted_l1_loss,
)
from .seeding import derive_seed

__version__ = "0.1.0"
