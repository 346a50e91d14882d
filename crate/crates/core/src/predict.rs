//! Per-visit prediction export.

use std::io::Write;

use crate::domain::Cohort;
use crate::error::{Error, Result};
use crate::head::Calibrator;
use crate::model::Model;

#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRow {
    pub eye_id: String,
    pub visit_time: f64,
    pub risk: f64,
    pub calibrated_risk: Option<f64>,
    /// `p_0`, the probability that the visit is already converted.
    pub stage_prob: f64,
    /// `p_t` per requested horizon.
    pub probs: Vec<f64>,
}

/// Parses a comma-separated list of non-negative horizons in months.
pub fn parse_horizons(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            let s = s.trim();
            let v: f64 = s
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("cannot parse horizon {s:?}")))?;
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidArgument(format!("horizon must be finite and non-negative, got {s}")));
            }
            Ok(v)
        })
        .collect()
}

pub fn predict_cohort(
    model: &Model,
    calibrator: Option<&Calibrator>,
    cohort: &Cohort,
    horizons_months: &[f64],
) -> Result<Vec<PredictionRow>> {
    let mut times = vec![0.0];
    for &h in horizons_months {
        times.push(model.time.normalize(h)?);
    }
    let mut rows = Vec::with_capacity(cohort.n_visits());
    for e in cohort.eyes() {
        for v in &e.visits {
            let p = model.predict(v, &times)?;
            rows.push(PredictionRow {
                eye_id: e.id.clone(),
                visit_time: v.visit_time,
                risk: p.risk,
                calibrated_risk: calibrator.map(|c| c.calibrate(p.risk)),
                stage_prob: p.probs[0],
                probs: p.probs[1..].to_vec(),
            });
        }
    }
    Ok(rows)
}

fn horizon_column(h: f64) -> String {
    if h.fract() == 0.0 {
        format!("p_{}", h as i64)
    } else {
        format!("p_{h}")
    }
}

/// Columns: `eye_id,visit_time,risk,calibrated_risk,stage_prob,p_<months>...`;
/// `calibrated_risk` is empty without a calibrator.
pub fn write_predictions_csv<W: Write>(rows: &[PredictionRow], horizons_months: &[f64], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header: Vec<String> = ["eye_id", "visit_time", "risk", "calibrated_risk", "stage_prob"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend(horizons_months.iter().map(|&h| horizon_column(h)));
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.eye_id.clone(),
            r.visit_time.to_string(),
            r.risk.to_string(),
            r.calibrated_risk.map(|c| c.to_string()).unwrap_or_default(),
            r.stage_prob.to_string(),
        ];
        rec.extend(r.probs.iter().map(|p| p.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
