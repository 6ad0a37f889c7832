from .errors import (
    ScaleOodError,
    IngestError,
    ManifestError,
    ShapingError,
    DegenerateSampleError,
    MetricError,
    PrecisionError,
    TrainingError,
    ConfigError,
)
from .ingest import (
    FeatureSet,
    PreActSet,
    LinearHead,
    DatasetManifest,
    load_features,
    load_preacts,
    load_head,
    load_labels,
    load_manifest,
    load_manifest_sets,
    write_features,
    write_head,
    write_labels,
)
from .shaping import (
    ShapingConfig,
    percentile_threshold,
    activation_sums,
    shape_batch,
    shape_scale,
    shape_ash_s,
    shape_prune,
    shape_react,
    shape,
    react_threshold,
    apply_head,
)
from .scoring import ScoringConfig, energy_score, msp_score, mls_score, tempscale_msp, ood_indicator, pipeline_scores
from .metrics import (
    EvalReport,
    auroc,
    fpr_at_tpr,
    id_accuracy,
    activation_stats,
    chi_square_gaussian_p,
    scale_histogram,
    pruning_decrease,
    scaling_increase,
    evaluate,
    sweep_percentile,
)
from .theory import (
    GaussianParams,
    rectified_moment,
    truncated_moment,
    c_of_p,
    beta_exact,
    beta_approx,
    delta_discriminant,
    monte_carlo_qp_ratio,
    theory_table,
)
from .synth import SynthSpec, BlobSpec, gen_rectified_features, gen_linear_head, gen_blob_dataset
from .ish import IshTrainConfig, ToyModel, ish_head_update, plain_head_update, train, pretrain, compare_modes

__all__ = [
    "ScaleOodError",
    "IngestError",
    "ManifestError",
    "ShapingError",
    "DegenerateSampleError",
    "MetricError",
    "PrecisionError",
    "TrainingError",
    "ConfigError",
    "FeatureSet",
    "PreActSet",
    "LinearHead",
    "DatasetManifest",
    "load_features",
    "load_preacts",
    "load_head",
    "load_labels",
    "load_manifest",
    "load_manifest_sets",
    "write_features",
    "write_head",
    "write_labels",
    "ShapingConfig",
    "percentile_threshold",
    "activation_sums",
    "shape_batch",
    "shape_scale",
    "shape_ash_s",
    "shape_prune",
    "shape_react",
    "shape",
    "react_threshold",
    "apply_head",
    "ScoringConfig",
    "energy_score",
    "msp_score",
    "mls_score",
    "tempscale_msp",
    "ood_indicator",
    "pipeline_scores",
    "EvalReport",
    "auroc",
    "fpr_at_tpr",
    "id_accuracy",
    "activation_stats",
    "chi_square_gaussian_p",
    "scale_histogram",
    "pruning_decrease",
    "scaling_increase",
    "evaluate",
    "sweep_percentile",
    "GaussianParams",
    "rectified_moment",
    "truncated_moment",
    "c_of_p",
    "beta_exact",
    "beta_approx",
    "delta_discriminant",
    "monte_carlo_qp_ratio",
    "theory_table",
    "SynthSpec",
    "BlobSpec",
    "gen_rectified_features",
    "gen_linear_head",
    "gen_blob_dataset",
    "IshTrainConfig",
    "ToyModel",
    "ish_head_update",
    "plain_head_update",
    "train",
    "pretrain",
    "compare_modes",
]
