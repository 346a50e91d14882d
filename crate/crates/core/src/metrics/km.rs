//! Kaplan–Meier estimation and risk-group stratification.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::domain::SurvivalLabel;
use crate::error::{Error, Result};

/// Product-limit survival curve. Row `i` describes the step at `times[i]`;
/// before the first event time the survival is 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KmCurve {
    pub times: Vec<f64>,
    pub survival: Vec<f64>,
    pub at_risk: Vec<usize>,
    pub events: Vec<usize>,
    pub n: usize,
    /// Largest observed time (event or censoring); the curve is defined up to here.
    pub max_time: f64,
}

impl KmCurve {
    /// Right-continuous step evaluation.
    pub fn survival_at(&self, t: f64) -> f64 {
        let k = self.times.partition_point(|&x| x <= t);
        if k == 0 {
            1.0
        } else {
            self.survival[k - 1]
        }
    }

    /// Smallest time at which survival drops to 0.5 or below.
    pub fn median(&self) -> Option<f64> {
        self.times
            .iter()
            .zip(&self.survival)
            .find(|(_, &s)| s <= 0.5)
            .map(|(&t, _)| t)
    }
}

pub fn kaplan_meier(labels: &[SurvivalLabel]) -> Result<KmCurve> {
    if labels.is_empty() {
        return Err(Error::InvalidArgument("Kaplan-Meier needs at least one sample".into()));
    }
    if labels.iter().any(|l| !l.time.is_finite() || l.time < 0.0) {
        return Err(Error::InvalidArgument("Kaplan-Meier times must be finite and non-negative".into()));
    }
    let mut sorted: Vec<(f64, bool)> = labels.iter().map(|l| (l.time, l.event)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    let n = sorted.len();
    let mut curve = KmCurve {
        times: Vec::new(),
        survival: Vec::new(),
        at_risk: Vec::new(),
        events: Vec::new(),
        n,
        max_time: sorted[n - 1].0,
    };
    let mut s = 1.0;
    let mut i = 0;
    while i < n {
        let t = sorted[i].0;
        let mut j = i;
        let mut d = 0;
        while j < n && sorted[j].0 == t {
            d += usize::from(sorted[j].1);
            j += 1;
        }
        if d > 0 {
            let at_risk = n - i;
            s *= 1.0 - d as f64 / at_risk as f64;
            curve.times.push(t);
            curve.survival.push(s);
            curve.at_risk.push(at_risk);
            curve.events.push(d);
        }
        i = j;
    }
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RiskGroup {
    pub index: usize,
    /// Half-open calibrated-risk interval `[lower, upper)`.
    pub lower: f64,
    pub upper: f64,
    pub curve: KmCurve,
}

pub const DEFAULT_CUT_POINTS: [f64; 2] = [1.0 / 3.0, 2.0 / 3.0];

/// Groups samples by calibrated risk and fits one curve per non-empty group,
/// ordered from lowest to highest risk.
pub fn stratify_and_km(
    calibrated_risks: &[f64],
    labels: &[SurvivalLabel],
    cut_points: &[f64],
) -> Result<Vec<RiskGroup>> {
    if calibrated_risks.is_empty() {
        return Err(Error::InvalidArgument("no samples to stratify".into()));
    }
    if calibrated_risks.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: labels.len(),
            actual: calibrated_risks.len(),
        });
    }
    if cut_points.iter().any(|&c| !(c > 0.0 && c < 1.0)) || cut_points.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument(format!(
            "cut points must be strictly increasing within (0, 1), got {cut_points:?}"
        )));
    }
    let mut members: Vec<Vec<SurvivalLabel>> = vec![Vec::new(); cut_points.len() + 1];
    for (&r, l) in calibrated_risks.iter().zip(labels) {
        members[cut_points.partition_point(|&c| c <= r)].push(*l);
    }
    let mut groups = Vec::new();
    for (index, m) in members.iter().enumerate() {
        if m.is_empty() {
            continue;
        }
        groups.push(RiskGroup {
            index,
            lower: if index == 0 { f64::NEG_INFINITY } else { cut_points[index - 1] },
            upper: cut_points.get(index).copied().unwrap_or(f64::INFINITY),
            curve: kaplan_meier(m)?,
        });
    }
    Ok(groups)
}

/// Writes `time,survival,at_risk,events,group` rows, starting each group at time 0.
pub fn write_km_csv<W: Write>(groups: &[RiskGroup], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["time", "survival", "at_risk", "events", "group"])?;
    for g in groups {
        let c = &g.curve;
        let group = g.index.to_string();
        w.write_record(["0", "1", &c.n.to_string(), "0", &group])?;
        for i in 0..c.times.len() {
            w.write_record([
                c.times[i].to_string(),
                c.survival[i].to_string(),
                c.at_risk[i].to_string(),
                c.events[i].to_string(),
                group.clone(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Product-limit by direct counting at each distinct event time.
    fn oracle(labels: &[SurvivalLabel]) -> Vec<(f64, f64)> {
        let mut event_times: Vec<f64> = labels.iter().filter(|l| l.event).map(|l| l.time).collect();
        event_times.sort_by(f64::total_cmp);
        event_times.dedup();
        let mut s = 1.0;
        let mut out = Vec::new();
        for t in event_times {
            let n = labels.iter().filter(|l| l.time >= t).count();
            let d = labels.iter().filter(|l| l.event && l.time == t).count();
            s *= 1.0 - d as f64 / n as f64;
            out.push((t, s));
        }
        out
    }

    #[test]
    fn all_censored_is_flat() {
        let labels: Vec<_> = [1.0, 2.0, 5.0].iter().map(|&t| SurvivalLabel::censored(t)).collect();
        let c = kaplan_meier(&labels).unwrap();
        assert!(c.times.is_empty());
        assert_eq!(c.survival_at(0.0), 1.0);
        assert_eq!(c.survival_at(10.0), 1.0);
    }

    #[test]
    fn hand_computed() {
        let labels = [SurvivalLabel::event(1.0), SurvivalLabel::event(2.0), SurvivalLabel::censored(3.0)];
        let c = kaplan_meier(&labels).unwrap();
        assert_eq!(c.survival_at(0.5), 1.0);
        assert!((c.survival_at(1.0) - 2.0 / 3.0).abs() < 1e-15);
        assert!((c.survival_at(2.0) - 1.0 / 3.0).abs() < 1e-15);
        assert!((c.survival_at(3.0) - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(c.at_risk, vec![3, 2]);
        assert_eq!(c.max_time, 3.0);
    }

    #[test]
    fn matches_oracle_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let labels: Vec<_> = (0..100)
                .map(|_| SurvivalLabel::new(f64::from(rng.random_range(0..40u8)), rng.random_bool(0.3)))
                .collect();
            let c = kaplan_meier(&labels).unwrap();
            let want = oracle(&labels);
            assert_eq!(c.times.len(), want.len());
            for (i, (t, s)) in want.into_iter().enumerate() {
                assert_eq!(c.times[i], t);
                assert_eq!(c.survival[i], s);
            }
            assert!(c.survival.windows(2).all(|w| w[1] <= w[0]));
            assert!(c.survival.iter().all(|s| (0.0..=1.0).contains(s)));
        }
    }

    #[test]
    fn errors() {
        assert!(kaplan_meier(&[]).is_err());
        assert!(kaplan_meier(&[SurvivalLabel::event(-1.0)]).is_err());
    }

    #[test]
    fn stratification_examples() {
        let labels = [SurvivalLabel::event(1.0), SurvivalLabel::censored(4.0), SurvivalLabel::event(2.0)];
        let g = stratify_and_km(&[0.1, 0.2, 0.3], &labels, &DEFAULT_CUT_POINTS).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g[0].curve, kaplan_meier(&labels).unwrap());

        let labels = [SurvivalLabel::event(1.0), SurvivalLabel::censored(4.0)];
        let g = stratify_and_km(&[0.2, 0.8], &labels, &[0.5]).unwrap();
        assert_eq!(g.len(), 2);
        assert_eq!(g[0].curve.n, 1);
        assert_eq!(g[1].index, 1);
        // half-open: a risk exactly on a cut goes up
        let g = stratify_and_km(&[0.5], &labels[..1], &[0.5]).unwrap();
        assert_eq!(g[0].index, 1);

        assert!(stratify_and_km(&[], &[], &[0.5]).is_err());
        assert!(stratify_and_km(&[0.1], &labels[..1], &[0.6, 0.4]).is_err());
    }

    #[test]
    fn csv_export() {
        let labels = [SurvivalLabel::event(1.0), SurvivalLabel::censored(4.0)];
        let g = stratify_and_km(&[0.2, 0.8], &labels, &[0.5]).unwrap();
        let mut buf = Vec::new();
        write_km_csv(&g, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("time,survival,at_risk,events,group\n"));
        assert_eq!(text.lines().count(), 1 + 2 + 1);
    }
}
