"""Conformal prediction and few-shot adaptation over frozen feature bundles."""

from .core import ProbeWeights, class_probabilities, l2_normalize, zero_shot_prototypes
from .data import (
    FeatureBundle,
    SynthConfig,
    generate_synthetic,
    load_bundle,
    sample_balanced_shots,
    save_bundle,
)
from .engine import (
    CalibrationResult,
    PredictionSet,
    RunResult,
    conformal_quantile,
    fcp_pvalue_oracle,
    fit_probe,
    run_adapt_scp,
    run_fca,
    run_scp_zero_shot,
    scp_calibrate,
    scp_predict,
)
from .metrics import RunReport, avg_set_size, balanced_accuracy, ccv, coverage
from .probes import (
    GdConfig,
    LambdaPolicy,
    ProbeDivergenceError,
    SupportSet,
    gd_lp_fit,
    loss_terms,
    simpleshot_fit,
    sstext_class_sums,
    sstext_fit,
    sstext_fit_incremental,
)
from .scores import ScoreConfig, aps_score, lac_score, raps_score, score_all_labels, score_matrix

__all__ = [
    "CalibrationResult",
    "FeatureBundle",
    "GdConfig",
    "LambdaPolicy",
    "PredictionSet",
    "ProbeDivergenceError",
    "ProbeWeights",
    "RunReport",
    "RunResult",
    "ScoreConfig",
    "SupportSet",
    "SynthConfig",
    "aps_score",
    "avg_set_size",
    "balanced_accuracy",
    "ccv",
    "class_probabilities",
    "conformal_quantile",
    "coverage",
    "fcp_pvalue_oracle",
    "fit_probe",
    "gd_lp_fit",
    "generate_synthetic",
    "l2_normalize",
    "lac_score",
    "load_bundle",
    "loss_terms",
    "raps_score",
    "run_adapt_scp",
    "run_fca",
    "run_scp_zero_shot",
    "sample_balanced_shots",
    "save_bundle",
    "scp_calibrate",
    "scp_predict",
    "score_all_labels",
    "score_matrix",
    "simpleshot_fit",
    "sstext_class_sums",
    "sstext_fit",
    "sstext_fit_incremental",
    "zero_shot_prototypes",
]

__version__ = "0.1.0"
