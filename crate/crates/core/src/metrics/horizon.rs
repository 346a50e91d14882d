//! Classification metrics at a fixed time horizon under right censoring.

use serde::{Deserialize, Serialize};

use crate::domain::SurvivalLabel;
use crate::error::{Error, Result};

/// How converters whose event falls after the horizon are treated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PostHorizonConverters {
    #[default]
    Negative,
    Exclude,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizonEval {
    pub score: f64,
    pub included: bool,
    pub positive: bool,
}

impl HorizonEval {
    /// Positives convert within `(0, horizon]`; negatives are still event-free
    /// after the horizon. Already-converted visits and visits censored at or
    /// before the horizon are excluded.
    pub fn new(score: f64, label: &SurvivalLabel, horizon_months: f64, policy: PostHorizonConverters) -> Self {
        let t = label.time;
        let (included, positive) = if label.event && t <= 0.0 {
            (false, false)
        } else if label.event && t <= horizon_months {
            (true, true)
        } else if t > horizon_months {
            (!(label.event && policy == PostHorizonConverters::Exclude), false)
        } else {
            (false, false)
        };
        Self {
            score,
            included,
            positive,
        }
    }
}

fn split_classes(evals: &[HorizonEval]) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for e in evals.iter().filter(|e| e.included) {
        if !e.score.is_finite() {
            return Err(Error::NonFinite("horizon score".into()));
        }
        if e.positive {
            pos.push(e.score);
        } else {
            neg.push(e.score);
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::UndefinedMetric(format!(
            "need both classes, got {} positive and {} negative",
            pos.len(),
            neg.len()
        )));
    }
    Ok((pos, neg))
}

/// Area under the ROC curve via the Mann–Whitney U statistic (midranks for ties).
pub fn horizon_auroc(evals: &[HorizonEval]) -> Result<f64> {
    let (pos, neg) = split_classes(evals)?;
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i + 1;
        while j < all.len() && all[j].0 == all[i].0 {
            j += 1;
        }
        // ranks i+1..=j share their mean
        let mid = (i + 1 + j) as f64 / 2.0;
        let n_pos_tied = all[i..j].iter().filter(|x| x.1).count();
        rank_sum_pos += mid * n_pos_tied as f64;
        i = j;
    }
    let n_pos = pos.len() as f64;
    let n_neg = neg.len() as f64;
    let u = rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0;
    Ok(u / (n_pos * n_neg))
}

/// Mean of sensitivity and specificity, predicting positive when `score >= threshold`.
pub fn balanced_accuracy(evals: &[HorizonEval], threshold: f64) -> Result<f64> {
    let (pos, neg) = split_classes(evals)?;
    let tp = pos.iter().filter(|&&s| s >= threshold).count();
    let tn = neg.iter().filter(|&&s| s < threshold).count();
    Ok(0.5 * (tp as f64 / pos.len() as f64 + tn as f64 / neg.len() as f64))
}

/// Threshold maximizing balanced accuracy among midpoints of consecutive
/// distinct scores; ties go to the smaller threshold.
pub fn select_threshold(evals: &[HorizonEval]) -> Result<f64> {
    let (pos, neg) = split_classes(evals)?;
    let mut scores: Vec<f64> = pos.iter().chain(&neg).copied().collect();
    scores.sort_by(f64::total_cmp);
    scores.dedup();
    if scores.len() == 1 {
        return Ok(scores[0]);
    }

    // sweep: sorted positives/negatives let each candidate be scored in O(log n)
    let mut pos_sorted = pos;
    pos_sorted.sort_by(f64::total_cmp);
    let mut neg_sorted = neg;
    neg_sorted.sort_by(f64::total_cmp);
    let below = |v: &[f64], t: f64| v.partition_point(|&s| s < t);

    let mut best = (f64::NEG_INFINITY, scores[0]);
    for w in scores.windows(2) {
        let t = 0.5 * (w[0] + w[1]);
        let tp = pos_sorted.len() - below(&pos_sorted, t);
        let tn = below(&neg_sorted, t);
        let ba = 0.5 * (tp as f64 / pos_sorted.len() as f64 + tn as f64 / neg_sorted.len() as f64);
        if ba > best.0 {
            best = (ba, t);
        }
    }
    Ok(best.1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn evals(pos: &[f64], neg: &[f64]) -> Vec<HorizonEval> {
        pos.iter()
            .map(|&s| HorizonEval { score: s, included: true, positive: true })
            .chain(neg.iter().map(|&s| HorizonEval { score: s, included: true, positive: false }))
            .collect()
    }

    fn auroc_enumerated(pos: &[f64], neg: &[f64]) -> f64 {
        let mut wins = 0.0;
        for p in pos {
            for n in neg {
                if p > n {
                    wins += 1.0;
                } else if p == n {
                    wins += 0.5;
                }
            }
        }
        wins / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(horizon_auroc(&evals(&[0.9, 0.8], &[0.1, 0.2, 0.3])).unwrap(), 1.0);
        assert_eq!(horizon_auroc(&evals(&[0.5, 0.5], &[0.5])).unwrap(), 0.5);
        assert_eq!(horizon_auroc(&evals(&[0.9, 0.4], &[0.6, 0.2])).unwrap(), 0.75);
        assert!(matches!(horizon_auroc(&evals(&[0.9], &[])), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn auroc_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let np = rng.random_range(1..30);
            let nn = rng.random_range(1..30);
            // coarse grid forces ties
            let pos: Vec<f64> = (0..np).map(|_| f64::from(rng.random_range(0..12u8)) / 4.0).collect();
            let neg: Vec<f64> = (0..nn).map(|_| f64::from(rng.random_range(0..10u8)) / 4.0).collect();
            let got = horizon_auroc(&evals(&pos, &neg)).unwrap();
            assert!((got - auroc_enumerated(&pos, &neg)).abs() <= 1e-12);
        }
    }

    #[test]
    fn balanced_accuracy_examples() {
        let e = evals(&[0.9, 0.8], &[0.1, 0.2]);
        assert_eq!(balanced_accuracy(&e, 0.5).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(&e, 0.0).unwrap(), 0.5);
        // TP=3, FN=1, TN=2, FP=2
        let e = evals(&[0.9, 0.8, 0.7, 0.1], &[0.6, 0.55, 0.2, 0.3]);
        assert_eq!(balanced_accuracy(&e, 0.5).unwrap(), 0.625);
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(select_threshold(&evals(&[0.8], &[0.2])).unwrap(), 0.5);
        let t = select_threshold(&evals(&[0.7, 0.9], &[0.1, 0.3])).unwrap();
        assert_eq!(t, 0.5);
    }

    #[test]
    fn threshold_matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let pos: Vec<f64> = (0..rng.random_range(1..15)).map(|_| f64::from(rng.random_range(0..20u8)) / 10.0).collect();
            let neg: Vec<f64> = (0..rng.random_range(1..15)).map(|_| f64::from(rng.random_range(0..16u8)) / 10.0).collect();
            let e = evals(&pos, &neg);
            let mut s: Vec<f64> = pos.iter().chain(&neg).copied().collect();
            s.sort_by(f64::total_cmp);
            s.dedup();
            let mut best = (f64::NEG_INFINITY, s[0]);
            for i in 0..s.len().saturating_sub(1) {
                let t = (s[i] + s[i + 1]) / 2.0;
                let ba = balanced_accuracy(&e, t).unwrap();
                if ba > best.0 {
                    best = (ba, t);
                }
            }
            assert_eq!(select_threshold(&e).unwrap(), best.1);
        }
    }

    #[test]
    fn inclusion_rules() {
        let p = PostHorizonConverters::Negative;
        let h = 12.0;
        let e = |t: f64, ev: bool| HorizonEval::new(0.0, &SurvivalLabel::new(t, ev), h, p);
        assert!(!e(-1.0, true).included);
        assert!(!e(0.0, true).included);
        assert!(e(6.0, true).included && e(6.0, true).positive);
        assert!(e(12.0, true).positive);
        assert!(e(13.0, true).included && !e(13.0, true).positive);
        assert!(!e(5.0, false).included);
        assert!(!e(12.0, false).included);
        assert!(e(12.5, false).included && !e(12.5, false).positive);
        let ex = HorizonEval::new(0.0, &SurvivalLabel::event(20.0), h, PostHorizonConverters::Exclude);
        assert!(!ex.included);
    }

    proptest! {
        #[test]
        fn censored_before_horizon_always_excluded(t in 0.0f64..100.0, h in 1.0f64..48.0) {
            let e = HorizonEval::new(0.3, &SurvivalLabel::censored(t), h, PostHorizonConverters::Negative);
            if t < h {
                prop_assert!(!e.included);
            }
            prop_assert_eq!(e.included, t > h);
        }

        #[test]
        fn auroc_invariant_under_monotone_transform(
            pos in proptest::collection::vec(-3.0f64..3.0, 1..20),
            neg in proptest::collection::vec(-3.0f64..3.0, 1..20),
        ) {
            let a = horizon_auroc(&evals(&pos, &neg)).unwrap();
            let tp: Vec<f64> = pos.iter().map(|x| x.exp()).collect();
            let tn: Vec<f64> = neg.iter().map(|x| x.exp()).collect();
            prop_assert!((a - horizon_auroc(&evals(&tp, &tn)).unwrap()).abs() < 1e-12);
        }
    }
}
