//! Synthetic longitudinal cohorts with known conversion times.
//!
//! Each eye follows a deterministic latent severity `s(t) = s0 + ρ·t` and
//! converts when it crosses `threshold`, so the true conversion time
//! `t* = (threshold − s0) / ρ` is available in closed form. Visits are spaced
//! irregularly until the eye's follow-up ends; converters are followed for a
//! short while after conversion. Rates are rescaled by a single global factor
//! so that the converter fraction hits its target.

use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::domain::{Cohort, Eye, SurvivalLabel, Visit};
use crate::error::{Error, Result};
use crate::metrics::concordance;

/// Affine feature map `f ↦ B·f + c` emulating an acquisition-device change.
///
/// `B = (1 − severity)·I + severity·M` where `M` is a random symmetric matrix
/// with eigenvalues in `[0.5, 2]`, and `c = severity·offset_scale·u` with
/// `u ~ N(0, I)`. Explicit `matrix`/`offset` override the random draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainShift {
    pub severity: f64,
    pub offset_scale: f64,
    pub seed: u64,
    pub matrix: Option<Vec<Vec<f64>>>,
    pub offset: Option<Vec<f64>>,
}

impl Default for DomainShift {
    fn default() -> Self {
        Self {
            severity: 0.0,
            offset_scale: 1.0,
            seed: 0,
            matrix: None,
            offset: None,
        }
    }
}

impl DomainShift {
    pub fn identity() -> Self {
        Self::default()
    }

    /// The realized `(B, c)` for dimension `d`.
    pub fn materialize(&self, d: usize) -> Result<(Vec<Vec<f64>>, Vec<f64>)> {
        if !(0.0..=1.0).contains(&self.severity) {
            return Err(Error::Config(format!("shift severity must lie in [0, 1], got {}", self.severity)));
        }
        let b = match &self.matrix {
            Some(m) => {
                if m.len() != d || m.iter().any(|r| r.len() != d) {
                    return Err(Error::Config(format!("shift matrix must be {d}x{d}")));
                }
                m.clone()
            }
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let m = random_spd(d, &mut rng);
                let lam = self.severity;
                (0..d)
                    .map(|i| {
                        (0..d)
                            .map(|j| lam * m[i][j] + if i == j { 1.0 - lam } else { 0.0 })
                            .collect()
                    })
                    .collect()
            }
        };
        let c = match &self.offset {
            Some(c) => {
                if c.len() != d {
                    return Err(Error::Config(format!("shift offset must have length {d}")));
                }
                c.clone()
            }
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                rng.set_stream(1);
                let scale = self.severity * self.offset_scale;
                (0..d).map(|_| scale * standard_normal(&mut rng)).collect()
            }
        };
        Ok((b, c))
    }
}

fn standard_normal<R: Rng>(rng: &mut R) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

/// `Q·diag(e)·Qᵀ` with `Q` orthonormalized from a Gaussian matrix and `e ∈ [0.5, 2]`.
fn random_spd<R: Rng>(d: usize, rng: &mut R) -> Vec<Vec<f64>> {
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(d);
    while q.len() < d {
        let mut v: Vec<f64> = (0..d).map(|_| standard_normal(rng)).collect();
        for u in &q {
            let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= proj * b);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            q.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    let e: Vec<f64> = (0..d).map(|_| rng.random_range(0.5..=2.0)).collect();
    (0..d)
        .map(|i| {
            (0..d)
                .map(|j| (0..d).map(|k| q[k][i] * e[k] * q[k][j]).sum())
                .collect()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_eyes: usize,
    pub feature_dim: usize,
    pub informative_dims: usize,
    /// Baseline severity is uniform on `[s0_min, s0_max]`.
    pub s0_min: f64,
    pub s0_max: f64,
    /// Log-normal progression rate (severity per month) before rescaling.
    pub rate_log_mean: f64,
    pub rate_log_std: f64,
    pub threshold: f64,
    pub noise_std: f64,
    pub visit_interval_min: f64,
    pub visit_interval_max: f64,
    pub study_length_months: f64,
    /// Follow-up of each eye is uniform on `[min_followup_months, study_length_months]`.
    pub min_followup_months: f64,
    /// Converters stop being seen this long after conversion.
    pub post_conversion_months: f64,
    /// `None` disables rate rescaling.
    pub converter_target_fraction: Option<f64>,
    pub min_rate_scale: f64,
    pub max_rate_scale: f64,
    pub domain_shift: DomainShift,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_eyes: 300,
            feature_dim: 8,
            informative_dims: 2,
            s0_min: 0.0,
            s0_max: 0.6,
            rate_log_mean: (0.008f64).ln(),
            rate_log_std: 0.3,
            threshold: 1.0,
            noise_std: 0.02,
            visit_interval_min: 3.0,
            visit_interval_max: 12.0,
            study_length_months: 84.0,
            min_followup_months: 36.0,
            post_conversion_months: 12.0,
            converter_target_fraction: Some(0.2),
            min_rate_scale: 0.1,
            max_rate_scale: 10.0,
            domain_shift: DomainShift::default(),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_eyes == 0 {
            return bad("n_eyes must be positive".into());
        }
        if !(self.feature_dim >= self.informative_dims && self.informative_dims >= 1) {
            return bad(format!(
                "need feature_dim >= informative_dims >= 1, got {} and {}",
                self.feature_dim, self.informative_dims
            ));
        }
        if !(0.0 <= self.s0_min && self.s0_min <= self.s0_max && self.s0_max < self.threshold) {
            return bad("need 0 <= s0_min <= s0_max < threshold".into());
        }
        if !(self.rate_log_std >= 0.0 && self.rate_log_mean.is_finite()) {
            return bad("rate distribution parameters are invalid".into());
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be non-negative".into());
        }
        if !(0.0 < self.visit_interval_min && self.visit_interval_min <= self.visit_interval_max) {
            return bad("need 0 < visit_interval_min <= visit_interval_max".into());
        }
        if !(self.visit_interval_max <= self.min_followup_months && self.min_followup_months <= self.study_length_months) {
            // guarantees at least two visits per eye
            return bad("need visit_interval_max <= min_followup_months <= study_length_months".into());
        }
        if !(self.post_conversion_months >= self.visit_interval_max) {
            return bad("post_conversion_months must be at least visit_interval_max so conversions are observed".into());
        }
        if let Some(f) = self.converter_target_fraction {
            if !(0.0..=1.0).contains(&f) {
                return bad(format!("converter_target_fraction must lie in [0, 1], got {f}"));
            }
        }
        if !(0.0 < self.min_rate_scale && self.min_rate_scale <= 1.0 && self.max_rate_scale >= 1.0) {
            return bad("need 0 < min_rate_scale <= 1 <= max_rate_scale".into());
        }
        Ok(())
    }
}

/// True conversion time per eye, in months from the eye's first visit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub eye_ids: Vec<String>,
    pub t_star: Vec<f64>,
    /// Global factor applied to every drawn rate.
    pub rate_scale: f64,
}

impl GroundTruth {
    pub fn get(&self, eye_id: &str) -> Option<f64> {
        self.eye_ids.iter().position(|e| e == eye_id).map(|i| self.t_star[i])
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["eye_id", "t_star_months"])?;
        for (id, t) in self.eye_ids.iter().zip(&self.t_star) {
            w.write_record([id.as_str(), &t.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a sidecar written by [`GroundTruth::write_csv`]; the rate scale is not stored.
    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let mut eye_ids = Vec::new();
        let mut t_star = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec?;
            let parse_err = |m: String| Error::Parse { line: i + 2, message: m };
            if rec.len() != 2 {
                return Err(parse_err(format!("expected 2 fields, got {}", rec.len())));
            }
            eye_ids.push(rec[0].to_string());
            t_star.push(rec[1].parse::<f64>().map_err(|e| parse_err(e.to_string()))?);
        }
        Ok(Self {
            eye_ids,
            t_star,
            rate_scale: f64::NAN,
        })
    }
}

struct EyeDraw {
    s0: f64,
    rate: f64,
    schedule: Vec<f64>,
    rng: ChaCha8Rng,
}

/// Global rate factor making exactly `round(fraction·n)` eyes convert within
/// their scheduled follow-up. An eye converts iff `scale >= q` with
/// `q = (threshold − s0) / (rate · last_visit)`.
fn rate_scale(q: &mut [f64], fraction: f64, cfg: &SynthConfig) -> Result<f64> {
    q.sort_by(f64::total_cmp);
    let n = q.len();
    let m = (fraction * n as f64).round() as usize;
    let k = if m == 0 {
        0.5 * q[0]
    } else if m == n {
        q[n - 1] * (1.0 + 1e-9)
    } else {
        0.5 * (q[m - 1] + q[m])
    };
    if !(cfg.min_rate_scale..=cfg.max_rate_scale).contains(&k) {
        return Err(Error::Infeasible(format!(
            "converter fraction {fraction} needs rate scale {k:.4}, outside [{}, {}]",
            cfg.min_rate_scale, cfg.max_rate_scale
        )));
    }
    Ok(k)
}

pub fn generate(cfg: &SynthConfig) -> Result<(Cohort, GroundTruth)> {
    cfg.validate()?;
    let d = cfg.feature_dim;
    let (shift_b, shift_c) = cfg.domain_shift.materialize(d)?;
    let rate_dist = LogNormal::new(cfg.rate_log_mean, cfg.rate_log_std)
        .map_err(|e| Error::Config(format!("rate distribution: {e}")))?;
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(format!("noise: {e}")))?;

    let mut draws: Vec<EyeDraw> = (0..cfg.n_eyes)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64 + 1);
            let s0 = if cfg.s0_max > cfg.s0_min { rng.random_range(cfg.s0_min..cfg.s0_max) } else { cfg.s0_min };
            let rate = rate_dist.sample(&mut rng);
            let follow_up = if cfg.study_length_months > cfg.min_followup_months {
                rng.random_range(cfg.min_followup_months..=cfg.study_length_months)
            } else {
                cfg.study_length_months
            };
            let mut schedule = vec![0.0];
            loop {
                let step = if cfg.visit_interval_max > cfg.visit_interval_min {
                    rng.random_range(cfg.visit_interval_min..=cfg.visit_interval_max)
                } else {
                    cfg.visit_interval_min
                };
                let next = schedule.last().copied().unwrap_or(0.0) + step;
                if next > follow_up {
                    break;
                }
                schedule.push(next);
            }
            EyeDraw { s0, rate, schedule, rng }
        })
        .collect();

    let scale = match cfg.converter_target_fraction {
        Some(f) => {
            let mut q: Vec<f64> = draws
                .iter()
                .map(|e| (cfg.threshold - e.s0) / (e.rate * e.schedule.last().copied().unwrap_or(0.0)))
                .collect();
            rate_scale(&mut q, f, cfg)?
        }
        None => 1.0,
    };

    let width = cfg.n_eyes.saturating_sub(1).to_string().len().max(4);
    let mut eyes = Vec::with_capacity(cfg.n_eyes);
    let mut eye_ids = Vec::with_capacity(cfg.n_eyes);
    let mut t_stars = Vec::with_capacity(cfg.n_eyes);
    for (i, draw) in draws.iter_mut().enumerate() {
        let rate = draw.rate * scale;
        let t_star = (cfg.threshold - draw.s0) / rate;
        let last_scheduled = draw.schedule.last().copied().unwrap_or(0.0);
        let event = t_star <= last_scheduled;
        let times: Vec<f64> = if event {
            draw.schedule
                .iter()
                .copied()
                .filter(|&t| t <= t_star + cfg.post_conversion_months)
                .collect()
        } else {
            draw.schedule.clone()
        };
        let last = times.last().copied().unwrap_or(0.0);
        let visits = times
            .iter()
            .map(|&t| {
                let s = draw.s0 + rate * t;
                let mut raw = Vec::with_capacity(d);
                for k in 0..cfg.informative_dims {
                    raw.push(s.powi(k as i32 + 1) + noise.sample(&mut draw.rng));
                }
                for _ in cfg.informative_dims..d {
                    raw.push(standard_normal(&mut draw.rng));
                }
                let features = (0..d)
                    .map(|r| shift_c[r] + (0..d).map(|c| shift_b[r][c] * raw[c]).sum::<f64>())
                    .collect();
                let label = if event { SurvivalLabel::event(t_star - t) } else { SurvivalLabel::censored(last - t) };
                Visit::new(t, features, Some(label))
            })
            .collect();
        let id = format!("eye{i:0width$}");
        eye_ids.push(id.clone());
        t_stars.push(t_star);
        eyes.push(Eye::new(id, visits));
    }
    let cohort = Cohort::new(eyes, d, true)?;
    Ok((
        cohort,
        GroundTruth {
            eye_ids,
            t_star: t_stars,
            rate_scale: scale,
        },
    ))
}

/// Concordance of the ideal score `−(t* − visit_time)` over not-yet-converted visits.
pub fn oracle_concordance(cohort: &Cohort, truth: &GroundTruth) -> Result<f64> {
    let mut risks = Vec::new();
    let mut labels = Vec::new();
    for e in cohort.eyes() {
        let t_star = truth
            .get(&e.id)
            .ok_or_else(|| Error::InvalidArgument(format!("no ground truth for eye {}", e.id)))?;
        for v in &e.visits {
            let label = v.label.ok_or_else(|| Error::MissingLabels("oracle needs a labeled cohort".into()))?;
            if label.is_converted() {
                continue;
            }
            risks.push(-(t_star - v.visit_time));
            labels.push(label);
        }
    }
    concordance(&risks, &labels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::validate_cohort;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig { n_eyes: 60, seed, ..Default::default() }
    }

    #[test]
    fn deterministic_latent_converts_on_schedule() {
        let cfg = SynthConfig {
            n_eyes: 20,
            s0_min: 0.0,
            s0_max: 0.0,
            rate_log_mean: (0.02f64).ln(),
            rate_log_std: 0.0,
            noise_std: 0.0,
            converter_target_fraction: None,
            ..Default::default()
        };
        let (cohort, truth) = generate(&cfg).unwrap();
        for (e, &t) in cohort.eyes().iter().zip(&truth.t_star) {
            assert!((t - 1.0 / 0.02).abs() < 1e-9);
            for v in &e.visits {
                let l = v.label.unwrap();
                if l.event {
                    assert!((l.time + v.visit_time - t).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn same_seed_same_cohort() {
        assert_eq!(generate(&small(3)).unwrap(), generate(&small(3)).unwrap());
        assert_ne!(generate(&small(3)).unwrap().0, generate(&small(4)).unwrap().0);
    }

    #[test]
    fn labels_validate_and_fraction_hits_target() {
        for seed in 0..5 {
            let mut cfg = small(seed);
            cfg.domain_shift = DomainShift { severity: 0.5, seed: 9, ..Default::default() };
            let (cohort, truth) = generate(&cfg).unwrap();
            assert!(validate_cohort(&cohort).is_valid(), "{:?}", validate_cohort(&cohort).violations);
            let frac = cohort.n_converters() as f64 / cohort.eyes().len() as f64;
            assert!((frac - 0.2).abs() <= 0.05, "fraction {frac}");
            assert!(truth.t_star.iter().all(|&t| t > 0.0));
            for e in cohort.eyes() {
                assert!(e.visits.len() >= 2);
                let t = truth.get(&e.id).unwrap();
                for v in &e.visits {
                    let l = v.label.unwrap();
                    if l.event {
                        assert!((l.time - (t - v.visit_time)).abs() < 1e-9);
                    }
                }
            }
        }
    }

    #[test]
    fn identity_shift_is_identity() {
        let (b, c) = DomainShift::identity().materialize(4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(b[i][j], if i == j { 1.0 } else { 0.0 });
            }
            assert_eq!(c[i], 0.0);
        }
        let (b, c) = DomainShift::identity().materialize(8).unwrap();
        let plain = generate(&small(1)).unwrap();
        let explicit = SynthConfig {
            domain_shift: DomainShift {
                matrix: Some(b),
                offset: Some(c),
                ..Default::default()
            },
            ..small(1)
        };
        assert_eq!(generate(&explicit).unwrap(), plain);
    }

    #[test]
    fn noise_free_features_increase_within_eye() {
        let cfg = SynthConfig { noise_std: 0.0, ..small(2) };
        let (cohort, _) = generate(&cfg).unwrap();
        for e in cohort.eyes() {
            for w in e.visits.windows(2) {
                for k in 0..cfg.informative_dims {
                    assert!(w[1].features[k] > w[0].features[k]);
                }
            }
        }
    }

    #[test]
    fn oracle_is_perfect_and_undefined_without_events() {
        let (cohort, truth) = generate(&small(5)).unwrap();
        assert_eq!(oracle_concordance(&cohort, &truth).unwrap(), 1.0);

        let cfg = SynthConfig { converter_target_fraction: Some(0.0), ..small(5) };
        let (cohort, truth) = generate(&cfg).unwrap();
        assert_eq!(cohort.n_converters(), 0);
        assert!(matches!(oracle_concordance(&cohort, &truth), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn infeasible_and_invalid_configs() {
        let cfg = SynthConfig {
            converter_target_fraction: Some(1.0),
            rate_log_mean: (1e-5f64).ln(),
            ..small(0)
        };
        assert!(matches!(generate(&cfg), Err(Error::Infeasible(_))));
        assert!(generate(&SynthConfig { informative_dims: 0, ..small(0) }).is_err());
        assert!(generate(&SynthConfig { s0_max: 1.2, ..small(0) }).is_err());
    }

    #[test]
    fn ground_truth_sidecar_round_trip() {
        let (_, truth) = generate(&small(7)).unwrap();
        let mut buf = Vec::new();
        truth.write_csv(&mut buf).unwrap();
        let back = GroundTruth::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back.eye_ids, truth.eye_ids);
        assert_eq!(back.t_star, truth.t_star);
    }
}
