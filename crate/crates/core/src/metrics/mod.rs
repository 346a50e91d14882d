//! Censoring-aware evaluation metrics.

mod bootstrap;
mod concordance;
mod horizon;
mod km;
mod report;

pub use bootstrap::{bootstrap_eye_level, bootstrap_scored, metric_names, BootstrapSettings, BootstrapSummary, MetricSummary};
pub use concordance::concordance;
pub use horizon::{balanced_accuracy, horizon_auroc, select_threshold, HorizonEval, PostHorizonConverters};
pub use km::{kaplan_meier, stratify_and_km, write_km_csv, KmCurve, RiskGroup, DEFAULT_CUT_POINTS};
pub use report::{
    evaluate, fit_on_validation, horizon_evals, point_metrics, score_cohort, EvalOptions, HorizonMetrics,
    MetricsReport, PointMetrics, RiskGroupSummary, ScoredVisit, ThresholdSource, ValidationFit, DEFAULT_HORIZONS,
};
