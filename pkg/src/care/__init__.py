"""Conditional feature alignment and importance reweighting for supervised
sim2real domain adaptation, exercised end to end on a desk-scale synthetic
detection task.

Layout:
    annotations    dataset loading, validation, normalization, subsampling
    content_stats  class-frequency weights, per-class box KDEs, gap reports
    alignment      class-conditional cycle-consistency and mean-matching losses
    toy_detect     synthetic two-domain task, tiny detector, exact gradients
    trainer        training loop, objective assembly, ablation bench
    verify         exact finite-support check of the reweighting identity
    cli            command-line entry points
    figures        report figure rendering (only module importing matplotlib)
"""

__version__ = "0.1.0"

from .annotations import (
    BoxAnnotation,
    DatasetError,
    DetectionDataset,
    ImageInfo,
    load_coco,
    load_jsonl,
    subsample,
    validate,
    write_jsonl,
)
from .alignment import (
    FeatureBatch,
    cycle_consistency_loss,
    linear_mmd_loss,
)
from .content_stats import (
    BoxRatioModel,
    ClassWeights,
    GaussianKde2d,
    Smoothing,
    box_ratio,
    class_counts,
    fit_box_ratio_model,
    fit_kde,
    gap_report,
    inverse_frequency_weights,
    scott_bandwidth,
)
from .toy_detect import (
    ToyDomainSpec,
    ToyInstance,
    ToyModel,
    det_loss,
    forward,
    generate_domain,
    imbalanced_shift_spec,
    model_gradients,
)
from .trainer import (
    CareConfig,
    ConfigError,
    TrainReport,
    bench,
    care_objective,
    train,
)
from .verify import (
    DiscreteJointDistribution,
    exact_weights,
    identity_report,
    lhs_reweighted_source_risk,
    rhs_target_reference_risk,
)

__all__ = [
    "__version__",
    "BoxAnnotation",
    "BoxRatioModel",
    "CareConfig",
    "ClassWeights",
    "ConfigError",
    "DatasetError",
    "DetectionDataset",
    "DiscreteJointDistribution",
    "FeatureBatch",
    "GaussianKde2d",
    "ImageInfo",
    "Smoothing",
    "ToyDomainSpec",
    "ToyInstance",
    "ToyModel",
    "TrainReport",
    "bench",
    "box_ratio",
    "care_objective",
    "class_counts",
    "cycle_consistency_loss",
    "det_loss",
    "exact_weights",
    "fit_box_ratio_model",
    "fit_kde",
    "forward",
    "gap_report",
    "generate_domain",
    "identity_report",
    "imbalanced_shift_spec",
    "inverse_frequency_weights",
    "lhs_reweighted_source_risk",
    "linear_mmd_loss",
    "load_coco",
    "load_jsonl",
    "model_gradients",
    "rhs_target_reference_risk",
    "scott_bandwidth",
    "subsample",
    "train",
    "validate",
    "write_jsonl",
]
