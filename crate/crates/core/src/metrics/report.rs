//! Scoring a cohort with a model and assembling the metrics report.

use serde::{Deserialize, Serialize};

use super::bootstrap::{bootstrap_scored, BootstrapSettings, BootstrapSummary};
use super::concordance::concordance;
use super::horizon::{balanced_accuracy, horizon_auroc, select_threshold, HorizonEval, PostHorizonConverters};
use super::km::{stratify_and_km, RiskGroup};
use crate::domain::{Cohort, SurvivalLabel};
use crate::error::{Error, Result};
use crate::head::Calibrator;
use crate::model::Model;

pub const DEFAULT_HORIZONS: [f64; 3] = [6.0, 12.0, 24.0];

/// One evaluable visit with its model outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredVisit {
    pub eye: usize,
    pub risk: f64,
    /// Conversion probability per requested horizon.
    pub probs: Vec<f64>,
    pub label: SurvivalLabel,
}

/// Scores every labeled, not-yet-converted visit. Horizons are in months.
pub fn score_cohort(model: &Model, cohort: &Cohort, horizons_months: &[f64]) -> Result<Vec<ScoredVisit>> {
    if !cohort.is_labeled() {
        return Err(Error::MissingLabels("evaluation requires a labeled cohort".into()));
    }
    let times = horizons_months
        .iter()
        .map(|&h| model.time.normalize(h))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::new();
    for (eye, e) in cohort.eyes().iter().enumerate() {
        for v in &e.visits {
            let label = v
                .label
                .ok_or_else(|| Error::MissingLabels(format!("eye {} has an unlabeled visit", e.id)))?;
            if label.is_converted() {
                continue;
            }
            let p = model.predict(v, &times)?;
            out.push(ScoredVisit {
                eye,
                risk: p.risk,
                probs: p.probs,
                label,
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub horizon_months: f64,
    pub n_positive: usize,
    pub n_negative: usize,
    pub auroc: Option<f64>,
    pub threshold: Option<f64>,
    pub balanced_accuracy: Option<f64>,
    /// Why a metric is missing, when it is.
    pub note: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointMetrics {
    pub concordance: Option<f64>,
    pub concordance_note: Option<String>,
    pub horizons: Vec<HorizonMetrics>,
}

pub fn horizon_evals(scored: &[ScoredVisit], h_index: usize, horizon_months: f64, policy: PostHorizonConverters) -> Vec<HorizonEval> {
    scored
        .iter()
        .map(|s| HorizonEval::new(s.probs[h_index], &s.label, horizon_months, policy))
        .collect()
}

/// Concordance plus per-horizon AUROC and balanced accuracy. A missing
/// threshold is selected on `scored` itself.
pub fn point_metrics(
    scored: &[ScoredVisit],
    horizons_months: &[f64],
    thresholds: &[Option<f64>],
    policy: PostHorizonConverters,
) -> Result<PointMetrics> {
    if thresholds.len() != horizons_months.len() {
        return Err(Error::DimensionMismatch {
            expected: horizons_months.len(),
            actual: thresholds.len(),
        });
    }
    let risks: Vec<f64> = scored.iter().map(|s| s.risk).collect();
    let labels: Vec<SurvivalLabel> = scored.iter().map(|s| s.label).collect();
    let (c, c_note) = split_undefined(concordance(&risks, &labels))?;

    let mut horizons = Vec::with_capacity(horizons_months.len());
    for (i, &h) in horizons_months.iter().enumerate() {
        let evals = horizon_evals(scored, i, h, policy);
        let n_positive = evals.iter().filter(|e| e.included && e.positive).count();
        let n_negative = evals.iter().filter(|e| e.included && !e.positive).count();
        let (auroc, note) = split_undefined(horizon_auroc(&evals))?;
        let threshold = match thresholds[i] {
            Some(t) => Some(t),
            None => split_undefined(select_threshold(&evals))?.0,
        };
        let balanced = match threshold {
            Some(t) => split_undefined(balanced_accuracy(&evals, t))?.0,
            None => None,
        };
        horizons.push(HorizonMetrics {
            horizon_months: h,
            n_positive,
            n_negative,
            auroc,
            threshold,
            balanced_accuracy: balanced,
            note,
        });
    }
    Ok(PointMetrics {
        concordance: c,
        concordance_note: c_note,
        horizons,
    })
}

/// Turns an undefined metric into `(None, reason)`; other errors propagate.
fn split_undefined(r: Result<f64>) -> Result<(Option<f64>, Option<String>)> {
    match r {
        Ok(v) => Ok((Some(v), None)),
        Err(Error::UndefinedMetric(msg)) => Ok((None, Some(msg))),
        Err(e) => Err(e),
    }
}

/// Operating points derived from a validation cohort.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationFit {
    pub calibrator: Calibrator,
    pub thresholds: Vec<Option<f64>>,
}

/// Fits the calibrator on validation risks and selects one threshold per horizon.
pub fn fit_on_validation(
    model: &Model,
    val: &Cohort,
    horizons_months: &[f64],
    policy: PostHorizonConverters,
) -> Result<ValidationFit> {
    let scored = score_cohort(model, val, horizons_months)?;
    let risks: Vec<f64> = scored.iter().map(|s| s.risk).collect();
    let calibrator = Calibrator::fit(&risks)?;
    let thresholds = (0..horizons_months.len())
        .map(|i| {
            split_undefined(select_threshold(&horizon_evals(&scored, i, horizons_months[i], policy))).map(|x| x.0)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ValidationFit { calibrator, thresholds })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalOptions {
    pub horizons_months: Vec<f64>,
    pub policy: PostHorizonConverters,
    /// Per-horizon operating points; missing entries are selected on the evaluation set.
    pub thresholds: Vec<Option<f64>>,
    pub bootstrap: Option<BootstrapSettings>,
    /// Cut points for risk stratification; requires a calibrator.
    pub km_cut_points: Option<Vec<f64>>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            horizons_months: DEFAULT_HORIZONS.to_vec(),
            policy: PostHorizonConverters::default(),
            thresholds: vec![None; DEFAULT_HORIZONS.len()],
            bootstrap: None,
            km_cut_points: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdSource {
    Validation,
    EvaluationSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskGroupSummary {
    pub group: usize,
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub n: usize,
    pub n_events: usize,
    pub median_months: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n_eyes: usize,
    pub n_visits: usize,
    pub calibrated: bool,
    pub threshold_source: ThresholdSource,
    pub post_horizon_converters: PostHorizonConverters,
    #[serde(flatten)]
    pub point: PointMetrics,
    pub bootstrap: Option<BootstrapSummary>,
    pub risk_groups: Option<Vec<RiskGroupSummary>>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Full evaluation of `model` on a labeled cohort. Returns the report and,
/// when stratification was requested, the per-group Kaplan–Meier curves.
pub fn evaluate(
    model: &Model,
    cohort: &Cohort,
    calibrator: Option<&Calibrator>,
    opts: &EvalOptions,
) -> Result<(MetricsReport, Option<Vec<RiskGroup>>)> {
    let scored = score_cohort(model, cohort, &opts.horizons_months)?;
    let point = point_metrics(&scored, &opts.horizons_months, &opts.thresholds, opts.policy)?;
    let threshold_source = if opts.thresholds.iter().all(Option::is_some) {
        ThresholdSource::Validation
    } else {
        ThresholdSource::EvaluationSet
    };

    let bootstrap = match &opts.bootstrap {
        Some(settings) => {
            let fixed: Vec<Option<f64>> = point.horizons.iter().map(|h| h.threshold).collect();
            Some(bootstrap_scored(&scored, &opts.horizons_months, &fixed, opts.policy, settings)?)
        }
        None => None,
    };

    let groups = match &opts.km_cut_points {
        Some(cuts) => {
            let cal = calibrator.ok_or_else(|| {
                Error::InvalidArgument("risk stratification needs a calibrator".into())
            })?;
            let calibrated: Vec<f64> = scored.iter().map(|s| cal.calibrate(s.risk)).collect();
            let labels: Vec<SurvivalLabel> = scored.iter().map(|s| s.label).collect();
            Some(stratify_and_km(&calibrated, &labels, cuts)?)
        }
        None => None,
    };
    let risk_groups = groups.as_ref().map(|gs| {
        gs.iter()
            .map(|g| RiskGroupSummary {
                group: g.index,
                lower: g.lower.is_finite().then_some(g.lower),
                upper: g.upper.is_finite().then_some(g.upper),
                n: g.curve.n,
                n_events: g.curve.events.iter().sum(),
                median_months: g.curve.median(),
            })
            .collect()
    });

    let report = MetricsReport {
        n_eyes: cohort.eyes().len(),
        n_visits: scored.len(),
        calibrated: calibrator.is_some(),
        threshold_source,
        post_horizon_converters: opts.policy,
        point,
        bootstrap,
        risk_groups,
    };
    Ok((report, groups))
}
