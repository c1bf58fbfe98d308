"""Latent-group panel regression with selective inference after k-means clustering."""

from __future__ import annotations

from .distributions import (
    FoldedNormal,
    TruncatedLaw,
    WeightedChiSq,
    truncated_survival,
    wchisq_cdf,
    wchisq_cdf_mc,
)
from .errors import *  # noqa: F401,F403
from .intervals import IntervalUnion, clip_nonnegative, contains, intersect, solve_quadratic_leq
from .kmeans import ClusterRun, assign, init_centroids, kmeans_from_init, run_kmeans
from .panel import (
    GroupEstimates,
    GroupPartition,
    IndividualFit,
    PanelDataset,
    first_difference,
    fit_individuals,
    gmm_individual,
    group_estimate,
    load_panel,
    ols_individual,
    plugin_covariance,
    within_demean,
)
from .selective import (
    Contrast,
    SelectiveTestResult,
    build_contrast,
    lemma1_coeffs,
    lemma2_coeffs,
    naive_wald,
    perturb,
    selective_test,
    selective_test_covariate,
    selective_test_gmm,
    truncation_set,
)
from .simulate import (
    DgpSpec,
    ExperimentReport,
    dgp_generate,
    qq_data,
    run_power_experiment,
    run_size_experiment,
)

__version__ = "0.1.0"
