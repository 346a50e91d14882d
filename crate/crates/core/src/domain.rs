//! Core data types: survival labels, visits, cohorts and time normalization.
//!
//! Time is measured in months everywhere. A [`Cohort`] groups visits by eye;
//! labeled cohorts carry a [`SurvivalLabel`] on every visit, unlabeled cohorts
//! carry none, and both share the same [`Visit`] type so that pair sampling is
//! identical in supervised and unsupervised training.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance (months) for the per-eye label consistency check.
pub const LABEL_TOLERANCE_MONTHS: f64 = 1e-6;

/// Right-censored time-to-event label attached to a single visit.
///
/// `time` is measured from the visit: to the first conversion if `event` is
/// set, otherwise to the last observed visit of the eye.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SurvivalLabel {
    pub time: f64,
    pub event: bool,
}

impl SurvivalLabel {
    pub fn new(time: f64, event: bool) -> Self {
        Self { time, event }
    }

    pub fn event(time: f64) -> Self {
        Self::new(time, true)
    }

    pub fn censored(time: f64) -> Self {
        Self::new(time, false)
    }

    pub fn check(&self) -> Result<()> {
        if !self.time.is_finite() {
            return Err(Error::NonFinite("label time".into()));
        }
        if !self.event && self.time < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "censored label with negative time {}",
                self.time
            )));
        }
        Ok(())
    }

    /// True when the visit is already in the converted stage.
    pub fn is_converted(&self) -> bool {
        derive_stage(self) == 1
    }
}

/// Stage indicator: 1 if the visit has already converted (`E = 1` and `T <= 0`).
pub fn derive_stage(label: &SurvivalLabel) -> u8 {
    u8::from(label.event && label.time <= 0.0)
}

/// Linear map from months to normalized time; `horizon_months` maps to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeNormalizer {
    pub horizon_months: f64,
}

impl Default for TimeNormalizer {
    fn default() -> Self {
        Self {
            horizon_months: 36.0,
        }
    }
}

impl TimeNormalizer {
    pub fn new(horizon_months: f64) -> Result<Self> {
        if !(horizon_months.is_finite() && horizon_months > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "horizon_months must be positive, got {horizon_months}"
            )));
        }
        Ok(Self { horizon_months })
    }

    /// Normalize a non-negative duration. Durations beyond the horizon are
    /// mapped linearly past 1 rather than clamped.
    pub fn normalize(&self, months: f64) -> Result<f64> {
        if !months.is_finite() {
            return Err(Error::NonFinite("months".into()));
        }
        if months < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "negative duration {months} months"
            )));
        }
        Ok(months / self.horizon_months)
    }
}

pub fn normalize_time(months: f64, norm: &TimeNormalizer) -> Result<f64> {
    norm.normalize(months)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Visit {
    /// Months since the eye's first visit.
    pub visit_time: f64,
    pub features: Vec<f64>,
    pub label: Option<SurvivalLabel>,
    /// Extra views used for inference averaging. When absent, `features` is the only view.
    pub views: Option<Vec<Vec<f64>>>,
}

impl Visit {
    pub fn new(visit_time: f64, features: Vec<f64>, label: Option<SurvivalLabel>) -> Self {
        Self {
            visit_time,
            features,
            label,
            views: None,
        }
    }

    /// The feature vectors to average over at inference time.
    pub fn inference_views(&self) -> &[Vec<f64>] {
        match &self.views {
            Some(v) => v.as_slice(),
            None => std::slice::from_ref(&self.features),
        }
    }

    pub fn stage(&self) -> Option<u8> {
        self.label.as_ref().map(derive_stage)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Eye {
    pub id: String,
    pub visits: Vec<Visit>,
}

impl Eye {
    pub fn new(id: impl Into<String>, visits: Vec<Visit>) -> Self {
        Self {
            id: id.into(),
            visits,
        }
    }

    /// True if any visit carries an event label.
    pub fn is_converter(&self) -> bool {
        self.visits
            .iter()
            .any(|v| v.label.map(|l| l.event).unwrap_or(false))
    }
}

/// Eyes keyed by id (kept sorted by id), each with a time-ordered visit list.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    eyes: Vec<Eye>,
    feature_dim: usize,
    labeled: bool,
}

impl Cohort {
    /// Builds a cohort. Eyes are sorted by id; duplicate ids are rejected.
    /// Invariants on visit content are checked by [`validate_cohort`], not here.
    pub fn new(mut eyes: Vec<Eye>, feature_dim: usize, labeled: bool) -> Result<Self> {
        eyes.sort_by(|a, b| a.id.cmp(&b.id));
        if let Some(w) = eyes.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::InvalidCohort(format!("duplicate eye id {}", w[0].id)));
        }
        Ok(Self {
            eyes,
            feature_dim,
            labeled,
        })
    }

    pub fn eyes(&self) -> &[Eye] {
        &self.eyes
    }

    pub fn eye(&self, id: &str) -> Option<&Eye> {
        self.eyes
            .binary_search_by(|e| e.id.as_str().cmp(id))
            .ok()
            .map(|i| &self.eyes[i])
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn is_labeled(&self) -> bool {
        self.labeled
    }

    pub fn n_visits(&self) -> usize {
        self.eyes.iter().map(|e| e.visits.len()).sum()
    }

    pub fn n_converters(&self) -> usize {
        self.eyes.iter().filter(|e| e.is_converter()).count()
    }

    /// Copy with every label removed.
    pub fn without_labels(&self) -> Cohort {
        let eyes = self
            .eyes
            .iter()
            .map(|e| Eye {
                id: e.id.clone(),
                visits: e
                    .visits
                    .iter()
                    .map(|v| Visit {
                        label: None,
                        ..v.clone()
                    })
                    .collect(),
            })
            .collect();
        Cohort {
            eyes,
            feature_dim: self.feature_dim,
            labeled: false,
        }
    }

    /// Keeps only the eyes for which `keep` returns true.
    pub fn filter_eyes(&self, mut keep: impl FnMut(usize, &Eye) -> bool) -> Cohort {
        let eyes = self
            .eyes
            .iter()
            .enumerate()
            .filter(|(i, e)| keep(*i, e))
            .map(|(_, e)| e.clone())
            .collect();
        Cohort {
            eyes,
            feature_dim: self.feature_dim,
            labeled: self.labeled,
        }
    }

    /// Splits consecutive runs of eyes (in id order) into parts of the given sizes.
    pub fn split(&self, sizes: &[usize]) -> Result<Vec<Cohort>> {
        let total: usize = sizes.iter().sum();
        if total > self.eyes.len() {
            return Err(Error::InvalidArgument(format!(
                "split sizes sum to {total} but cohort has {} eyes",
                self.eyes.len()
            )));
        }
        let mut start = 0;
        Ok(sizes
            .iter()
            .map(|&n| {
                let part = self.filter_eyes(|i, _| i >= start && i < start + n);
                start += n;
                part
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Ordering,
    LabelConsistency,
    Dimension,
    MissingLabel,
    InvalidLabel,
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub eye_id: String,
    pub visit_index: Option<usize>,
    pub kind: ViolationKind,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.visit_index {
            Some(i) => write!(f, "eye {} visit {}: {:?}: {}", self.eye_id, i, self.kind, self.message),
            None => write!(f, "eye {}: {:?}: {}", self.eye_id, self.kind, self.message),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn count(&self, kind: ViolationKind) -> usize {
        self.violations.iter().filter(|v| v.kind == kind).count()
    }

    fn push(&mut self, eye: &Eye, visit_index: Option<usize>, kind: ViolationKind, message: String) {
        self.violations.push(Violation {
            eye_id: eye.id.clone(),
            visit_index,
            kind,
            message,
        });
    }
}

/// Reports every invariant violation of the cohort. Never fails.
pub fn validate_cohort(cohort: &Cohort) -> ValidationReport {
    let mut report = ValidationReport::default();
    let d = cohort.feature_dim();

    for eye in cohort.eyes() {
        for (i, visit) in eye.visits.iter().enumerate() {
            if !visit.visit_time.is_finite() {
                report.push(eye, Some(i), ViolationKind::NonFinite, "visit_time is not finite".into());
            }
            if visit.features.len() != d {
                report.push(
                    eye,
                    Some(i),
                    ViolationKind::Dimension,
                    format!("features have dimension {}, expected {d}", visit.features.len()),
                );
            }
            if visit.features.iter().any(|x| !x.is_finite()) {
                report.push(eye, Some(i), ViolationKind::NonFinite, "non-finite feature".into());
            }
            if let Some(views) = &visit.views {
                if views.is_empty() {
                    report.push(eye, Some(i), ViolationKind::Dimension, "empty view list".into());
                }
                for (vi, view) in views.iter().enumerate() {
                    if view.len() != d {
                        report.push(
                            eye,
                            Some(i),
                            ViolationKind::Dimension,
                            format!("view {vi} has dimension {}, expected {d}", view.len()),
                        );
                    }
                }
            }
            match (&visit.label, cohort.is_labeled()) {
                (None, true) => {
                    report.push(eye, Some(i), ViolationKind::MissingLabel, "labeled cohort visit without label".into())
                }
                (Some(label), _) => {
                    if let Err(e) = label.check() {
                        report.push(eye, Some(i), ViolationKind::InvalidLabel, e.to_string());
                    }
                }
                (None, false) => {}
            }
        }

        for (i, w) in eye.visits.windows(2).enumerate() {
            if !(w[1].visit_time > w[0].visit_time) {
                report.push(
                    eye,
                    Some(i + 1),
                    ViolationKind::Ordering,
                    format!(
                        "visit_time {} does not strictly follow {}",
                        w[1].visit_time, w[0].visit_time
                    ),
                );
            }
        }

        if cohort.is_labeled() {
            check_label_consistency(eye, &mut report);
        }
    }
    report
}

fn check_label_consistency(eye: &Eye, report: &mut ValidationReport) {
    let labels: Vec<(usize, f64, SurvivalLabel)> = eye
        .visits
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.label.map(|l| (i, v.visit_time, l)))
        .collect();
    let Some(&(_, _, first)) = labels.first() else {
        return;
    };
    for &(i, _, l) in &labels[1..] {
        if l.event != first.event {
            report.push(
                eye,
                Some(i),
                ViolationKind::LabelConsistency,
                "event indicator differs within the eye".into(),
            );
        }
    }
    if !first.event {
        return;
    }
    for w in labels.windows(2) {
        let (_, t0, l0) = w[0];
        let (i1, t1, l1) = w[1];
        if !(l0.event && l1.event) {
            continue;
        }
        let gap = t1 - t0;
        let residual = l0.time - gap - l1.time;
        if residual.abs() > LABEL_TOLERANCE_MONTHS {
            report.push(
                eye,
                Some(i1),
                ViolationKind::LabelConsistency,
                format!(
                    "time-to-event {} does not follow {} over a {gap} month gap",
                    l1.time, l0.time
                ),
            );
        }
    }
}
