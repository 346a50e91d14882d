//! Eye-level bootstrap: each resample draws one eligible visit per eye.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::horizon::PostHorizonConverters;
use super::report::{point_metrics, score_cohort, ScoredVisit};
use crate::domain::Cohort;
use crate::error::{Error, Result};
use crate::model::Model;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapSettings {
    pub n_resamples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub name: String,
    pub mean: Option<f64>,
    /// Population standard deviation over the resamples where the metric was defined.
    pub std: Option<f64>,
    pub n_valid: usize,
    pub n_skipped: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub n_resamples: usize,
    pub seed: u64,
    pub metrics: Vec<MetricSummary>,
}

impl BootstrapSummary {
    pub fn metric(&self, name: &str) -> Option<&MetricSummary> {
        self.metrics.iter().find(|m| m.name == name)
    }
}

fn horizon_tag(h: f64) -> String {
    if h.fract() == 0.0 {
        format!("{}", h as i64)
    } else {
        format!("{h}")
    }
}

pub fn metric_names(horizons_months: &[f64]) -> Vec<String> {
    let mut names = vec!["concordance".to_string()];
    for &h in horizons_months {
        names.push(format!("auroc_{}", horizon_tag(h)));
        names.push(format!("balanced_accuracy_{}", horizon_tag(h)));
    }
    names
}

/// Resamples already-scored visits. Resample `i` uses a generator seeded by
/// `seed` on stream `i`, so results do not depend on thread scheduling.
pub fn bootstrap_scored(
    scored: &[ScoredVisit],
    horizons_months: &[f64],
    thresholds: &[Option<f64>],
    policy: PostHorizonConverters,
    settings: &BootstrapSettings,
) -> Result<BootstrapSummary> {
    if settings.n_resamples == 0 {
        return Err(Error::InvalidArgument("bootstrap needs at least one resample".into()));
    }
    // visit indices grouped by eye, in eye order
    let mut by_eye: Vec<Vec<usize>> = Vec::new();
    let mut last_eye = None;
    for (i, s) in scored.iter().enumerate() {
        if last_eye != Some(s.eye) {
            by_eye.push(Vec::new());
            last_eye = Some(s.eye);
        }
        by_eye.last_mut().expect("group pushed above").push(i);
    }

    let per_resample: Vec<Vec<Option<f64>>> = (0..settings.n_resamples)
        .into_par_iter()
        .map(|r| {
            let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
            rng.set_stream(r as u64);
            let sample: Vec<ScoredVisit> = by_eye
                .iter()
                .map(|idx| scored[idx[rng.random_range(0..idx.len())]].clone())
                .collect();
            let m = point_metrics(&sample, horizons_months, thresholds, policy)?;
            let mut values = vec![m.concordance];
            for h in &m.horizons {
                values.push(h.auroc);
                values.push(h.balanced_accuracy);
            }
            Ok(values)
        })
        .collect::<Result<Vec<_>>>()?;

    let metrics = metric_names(horizons_months)
        .into_iter()
        .enumerate()
        .map(|(k, name)| {
            let vals: Vec<f64> = per_resample.iter().filter_map(|v| v[k]).collect();
            let (mean, std) = if vals.is_empty() {
                (None, None)
            } else {
                let n = vals.len() as f64;
                let mean = vals.iter().sum::<f64>() / n;
                let var = vals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
                (Some(mean), Some(var.sqrt()))
            };
            MetricSummary {
                name,
                mean,
                std,
                n_valid: vals.len(),
                n_skipped: settings.n_resamples - vals.len(),
            }
        })
        .collect();
    Ok(BootstrapSummary {
        n_resamples: settings.n_resamples,
        seed: settings.seed,
        metrics,
    })
}

/// Scores `cohort` and bootstraps at fixed per-horizon thresholds
/// (missing thresholds are selected within each resample).
pub fn bootstrap_eye_level(
    cohort: &Cohort,
    model: &Model,
    horizons_months: &[f64],
    thresholds: &[Option<f64>],
    policy: PostHorizonConverters,
    settings: &BootstrapSettings,
) -> Result<BootstrapSummary> {
    let scored = score_cohort(model, cohort, horizons_months)?;
    bootstrap_scored(&scored, horizons_months, thresholds, policy, settings)
}
