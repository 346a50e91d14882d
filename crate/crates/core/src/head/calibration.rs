//! Risk calibration: a monotone cubic map from raw risk to `[0, 1]`.
//!
//! Knots sit at the 0th, 10th, ..., 100th percentiles of a reference set of
//! risks and map to 0.0, 0.1, ..., 1.0. Between knots the map is a
//! Fritsch–Carlson monotone cubic Hermite interpolant; outside the knot range
//! it clamps to 0 or 1.

use crate::error::{Error, Result};

/// Percentile levels of the calibration knots, in percent.
pub const DECILE_KNOTS: usize = 11;

/// Percentile with linear interpolation between order statistics
/// (inclusive endpoints). `sorted` must be ascending and non-empty.
pub fn percentile_linear(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibrator {
    knots: Vec<f64>,
    values: Vec<f64>,
    slopes: Vec<f64>,
}

impl Calibrator {
    /// Fits knots at the empirical deciles of `risks`.
    pub fn fit(risks: &[f64]) -> Result<Self> {
        if risks.len() < DECILE_KNOTS {
            return Err(Error::InvalidArgument(format!(
                "calibration needs at least {DECILE_KNOTS} risks, got {}",
                risks.len()
            )));
        }
        if risks.iter().any(|r| !r.is_finite()) {
            return Err(Error::NonFinite("calibration risks".into()));
        }
        let mut sorted = risks.to_vec();
        sorted.sort_by(f64::total_cmp);

        let raw_knots: Vec<f64> = (0..DECILE_KNOTS)
            .map(|k| percentile_linear(&sorted, k as f64 / 10.0))
            .collect();
        let raw_values: Vec<f64> = (0..DECILE_KNOTS).map(|k| k as f64 / 10.0).collect();

        // Tied knots collapse into one, carrying the mean of their values.
        let mut knots = Vec::with_capacity(DECILE_KNOTS);
        let mut values = Vec::with_capacity(DECILE_KNOTS);
        let mut i = 0;
        while i < DECILE_KNOTS {
            let mut j = i + 1;
            while j < DECILE_KNOTS && raw_knots[j] == raw_knots[i] {
                j += 1;
            }
            knots.push(raw_knots[i]);
            values.push(if j - i == 1 {
                raw_values[i]
            } else {
                raw_values[i..j].iter().sum::<f64>() / (j - i) as f64
            });
            i = j;
        }
        Self::from_knots(knots, values)
    }

    /// Rebuilds a calibrator from strictly increasing knots and non-decreasing values.
    pub fn from_knots(knots: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if knots.len() != values.len() {
            return Err(Error::InvalidArgument("knot and value counts differ".into()));
        }
        if knots.len() < 2 {
            return Err(Error::DegenerateDistribution(
                "all calibration risks are identical".into(),
            ));
        }
        if knots.iter().chain(&values).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("calibration knots".into()));
        }
        if knots.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::InvalidArgument("knots must be strictly increasing".into()));
        }
        if values.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::InvalidArgument("knot values must be non-decreasing".into()));
        }
        let slopes = fritsch_carlson_slopes(&knots, &values);
        Ok(Self {
            knots,
            values,
            slopes,
        })
    }

    pub fn knot_risks(&self) -> &[f64] {
        &self.knots
    }

    pub fn knot_values(&self) -> &[f64] {
        &self.values
    }

    pub fn calibrate(&self, r: f64) -> f64 {
        let n = self.knots.len();
        if r < self.knots[0] {
            return 0.0;
        }
        if r > self.knots[n - 1] {
            return 1.0;
        }
        let k = self
            .knots
            .partition_point(|&x| x <= r)
            .saturating_sub(1)
            .min(n - 2);
        let h = self.knots[k + 1] - self.knots[k];
        let t = (r - self.knots[k]) / h;
        let t2 = t * t;
        let t3 = t2 * t;
        let h00 = 2.0 * t3 - 3.0 * t2 + 1.0;
        let h10 = t3 - 2.0 * t2 + t;
        let h01 = -2.0 * t3 + 3.0 * t2;
        let h11 = t3 - t2;
        let y = h00 * self.values[k]
            + h10 * h * self.slopes[k]
            + h01 * self.values[k + 1]
            + h11 * h * self.slopes[k + 1];
        y.clamp(0.0, 1.0)
    }
}

fn fritsch_carlson_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let secants: Vec<f64> = (0..n - 1)
        .map(|k| (y[k + 1] - y[k]) / (x[k + 1] - x[k]))
        .collect();

    let mut m = vec![0.0; n];
    m[0] = secants[0];
    m[n - 1] = secants[n - 2];
    for k in 1..n - 1 {
        m[k] = if secants[k - 1] * secants[k] <= 0.0 {
            0.0
        } else {
            0.5 * (secants[k - 1] + secants[k])
        };
    }

    for k in 0..n - 1 {
        let d = secants[k];
        if d == 0.0 {
            m[k] = 0.0;
            m[k + 1] = 0.0;
            continue;
        }
        let a = m[k] / d;
        let b = m[k + 1] / d;
        let s = a * a + b * b;
        if s > 9.0 {
            let tau = 3.0 / s.sqrt();
            m[k] = tau * a * d;
            m[k + 1] = tau * b * d;
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::concordance;
    use crate::domain::SurvivalLabel;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Independent monotone cubic: slopes from the three-point rule with the
    /// Fritsch–Carlson circle restriction, evaluated in power-basis form.
    fn oracle(x: &[f64], y: &[f64], q: f64) -> f64 {
        let n = x.len();
        if q < x[0] {
            return 0.0;
        }
        if q > x[n - 1] {
            return 1.0;
        }
        let mut d = Vec::new();
        for i in 0..n - 1 {
            d.push((y[i + 1] - y[i]) / (x[i + 1] - x[i]));
        }
        let mut m = Vec::new();
        for i in 0..n {
            if i == 0 {
                m.push(d[0]);
            } else if i == n - 1 {
                m.push(d[n - 2]);
            } else if d[i - 1].signum() != d[i].signum() || d[i - 1] == 0.0 || d[i] == 0.0 {
                m.push(0.0);
            } else {
                m.push((d[i - 1] + d[i]) / 2.0);
            }
        }
        for i in 0..n - 1 {
            if d[i] == 0.0 {
                m[i] = 0.0;
                m[i + 1] = 0.0;
            } else {
                let (a, b) = (m[i] / d[i], m[i + 1] / d[i]);
                let r = (a * a + b * b).sqrt();
                if r > 3.0 {
                    m[i] = 3.0 * a * d[i] / r;
                    m[i + 1] = 3.0 * b * d[i] / r;
                }
            }
        }
        let mut i = 0;
        while i + 2 < n && q >= x[i + 1] {
            i += 1;
        }
        let h = x[i + 1] - x[i];
        let s = q - x[i];
        let c2 = (3.0 * d[i] - 2.0 * m[i] - m[i + 1]) / h;
        let c3 = (m[i] + m[i + 1] - 2.0 * d[i]) / (h * h);
        (y[i] + s * (m[i] + s * (c2 + s * c3))).clamp(0.0, 1.0)
    }

    fn random_risks(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                // skewed to make the knot spacing uneven
                3.0 * u * u * u - 1.0 + 0.1 * rng.random::<f64>()
            })
            .collect()
    }

    #[test]
    fn uniform_sample_is_linear() {
        let risks: Vec<f64> = (0..=100).map(f64::from).collect();
        let cal = Calibrator::fit(&risks).unwrap();
        assert_eq!(cal.calibrate(50.0), 0.5);
        assert!((cal.calibrate(25.0) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn passes_through_knots_and_clamps() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let risks = random_risks(&mut rng, 200);
        let cal = Calibrator::fit(&risks).unwrap();
        assert_eq!(cal.knot_risks().len(), 11);
        for (k, &x) in cal.knot_risks().iter().enumerate() {
            assert_eq!(cal.calibrate(x), k as f64 / 10.0);
        }
        let min = risks.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = risks.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(cal.calibrate(min - 1.0), 0.0);
        assert_eq!(cal.calibrate(max + 1.0), 1.0);
    }

    #[test]
    fn matches_independent_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..20 {
            let risks = random_risks(&mut rng, 50);
            let cal = Calibrator::fit(&risks).unwrap();
            for _ in 0..200 {
                let q = rng.random_range(-1.2..2.3);
                let want = oracle(cal.knot_risks(), cal.knot_values(), q);
                assert!((cal.calibrate(q) - want).abs() < 1e-12, "q={q}");
            }
        }
    }

    #[test]
    fn monotone_on_random_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cal = Calibrator::fit(&random_risks(&mut rng, 300)).unwrap();
        let mut qs: Vec<f64> = (0..10_000).map(|_| rng.random_range(-1.5..2.5)).collect();
        qs.sort_by(f64::total_cmp);
        let ys: Vec<f64> = qs.iter().map(|&q| cal.calibrate(q)).collect();
        assert!(ys.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn tied_knots_collapse_to_mean_value() {
        // 60% of mass at 0 makes the 0th..50th percentiles coincide.
        let mut risks = vec![0.0; 60];
        risks.extend((1..=40).map(f64::from));
        let cal = Calibrator::fit(&risks).unwrap();
        assert_eq!(cal.knot_risks()[0], 0.0);
        assert!((cal.knot_values()[0] - 0.25).abs() < 1e-12);
        assert!(cal.knot_risks().windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn errors() {
        assert!(matches!(Calibrator::fit(&[1.0; 10]), Err(Error::InvalidArgument(_))));
        assert!(matches!(
            Calibrator::fit(&[2.0; 30]),
            Err(Error::DegenerateDistribution(_))
        ));
        assert!(Calibrator::fit(&[f64::NAN; 12]).is_err());
    }

    #[test]
    fn preserves_ranking_and_concordance() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let risks = random_risks(&mut rng, 150);
        let cal = Calibrator::fit(&risks).unwrap();
        let calibrated: Vec<f64> = risks.iter().map(|&r| cal.calibrate(r)).collect();

        let mut by_raw: Vec<usize> = (0..risks.len()).collect();
        by_raw.sort_by(|&a, &b| risks[a].total_cmp(&risks[b]));
        let mut by_cal: Vec<usize> = (0..risks.len()).collect();
        by_cal.sort_by(|&a, &b| calibrated[a].total_cmp(&calibrated[b]));
        assert_eq!(by_raw, by_cal);

        let labels: Vec<SurvivalLabel> = (0..risks.len())
            .map(|_| SurvivalLabel::new(rng.random_range(0.0..50.0), rng.random_bool(0.4)))
            .collect();
        assert_eq!(
            concordance(&risks, &labels).unwrap(),
            concordance(&calibrated, &labels).unwrap()
        );
    }
}
