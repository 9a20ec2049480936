"""Coarse-to-fine acoustic scene classification toolkit.

CQT spectrogram patching, confusion-driven super-category construction via
spectral clustering, super-classifier transfer training, and punishment voting,
plus a synthetic-classifier simulator and a cross-validation harness.
"""

from .classifier import (
    PatchClassifier,
    PredictionMatrix,
    ReferenceModelParams,
    TrainConfig,
    export_predictions,
    featurize,
    gradient,
    import_predictions,
    init_super_from_base,
    load_model,
    predict,
    save_model,
    train,
)
from .clustering import (
    AffinityMatrix,
    ConfusionMatrix,
    SuperCategoryClustering,
    accumulate_confusion,
    average_confusions,
    build_affinity,
    eigen_topk,
    kmeans,
    spectral_cluster,
)
from .dataset import (
    ClassCatalog,
    DatasetManifest,
    SuperCategory,
    SuperCategoryPartition,
    load_manifest,
    make_partition,
    read_partition,
    relabel_for_super,
    split_fold,
    write_partition,
)
from .dsp import (
    AudioSegment,
    CQTParams,
    Patch,
    Spectrogram,
    compute_cqt,
    extract_patches,
    prepare_segment,
    read_wav,
    resize_spectrogram,
    synthesize_tone,
    write_wav,
)
from .pipeline import (
    ExperimentConfig,
    Report,
    emit_report,
    evaluate,
    load_config,
    read_report,
    run_pipeline,
    stage_seed,
)
from .simulate import SimSpec, simulate_classifiers
from .voting import (
    NegativeFlagVector,
    PunishmentConfig,
    SegmentDecision,
    VotingVector,
    build_negative_flags,
    build_voting_vector,
    majority_vote,
    punishment_vote,
    vote_dataset,
)

__version__ = "0.1.0"
