//! Intra-subject pair sampling with converter oversampling.

use rand::Rng;

use super::config::TrainConfig;
use crate::domain::Cohort;
use crate::error::{Error, Result};
use crate::losses::TrainingMode;
use crate::model::InputPair;

/// Eligible `(j, k)` visit-index pairs of one eye.
#[derive(Debug, Clone)]
struct EyePool {
    eye: usize,
    pairs: Vec<(usize, usize)>,
}

/// Pre-indexed pair pools for one cohort and configuration.
///
/// Sampling draws an eye uniformly from the pool, then a pair uniformly
/// within that eye, always with replacement.
#[derive(Debug, Clone)]
pub struct PairSampler<'a> {
    cohort: &'a Cohort,
    mode: TrainingMode,
    batch_pairs: usize,
    n_converted: usize,
    /// Supervised: pairs whose later visit has converted.
    converted: Vec<EyePool>,
    /// Supervised: pairs whose later visit has not converted.
    /// Unsupervised: every ordered pair.
    stable: Vec<EyePool>,
}

impl<'a> PairSampler<'a> {
    pub fn new(cohort: &'a Cohort, config: &TrainConfig) -> Result<Self> {
        let supervised = config.mode == TrainingMode::Supervised;
        if supervised && !cohort.is_labeled() {
            return Err(Error::MissingLabels(
                "supervised mode requires a labeled training cohort, but the cohort is unlabeled".into(),
            ));
        }
        let mut converted = Vec::new();
        let mut stable = Vec::new();
        for (eye, e) in cohort.eyes().iter().enumerate() {
            let mut conv = Vec::new();
            let mut stab = Vec::new();
            for j in 0..e.visits.len() {
                let vj = &e.visits[j];
                if supervised && vj.stage() != Some(0) {
                    continue;
                }
                for k in j + 1..e.visits.len() {
                    let vk = &e.visits[k];
                    let gap = vk.visit_time - vj.visit_time;
                    if !(gap > 0.0 && gap <= config.max_gap_months) {
                        continue;
                    }
                    if supervised && vk.stage() == Some(1) {
                        conv.push((j, k));
                    } else {
                        stab.push((j, k));
                    }
                }
            }
            if !conv.is_empty() {
                converted.push(EyePool { eye, pairs: conv });
            }
            if !stab.is_empty() {
                stable.push(EyePool { eye, pairs: stab });
            }
        }

        let n_converted = if supervised { config.n_converted_per_batch() } else { 0 };
        if converted.is_empty() && stable.is_empty() {
            return Err(Error::SamplingExhausted(format!(
                "no visit pairs within {} months",
                config.max_gap_months
            )));
        }
        if n_converted > 0 && converted.is_empty() {
            return Err(Error::SamplingExhausted(
                "no converter pairs available to meet the converted fraction".into(),
            ));
        }
        if config.batch_pairs > n_converted && stable.is_empty() {
            return Err(Error::SamplingExhausted("no non-converted pairs available".into()));
        }
        Ok(Self {
            cohort,
            mode: config.mode,
            batch_pairs: config.batch_pairs,
            n_converted,
            converted,
            stable,
        })
    }

    fn draw<R: Rng>(&self, pools: &[EyePool], rng: &mut R) -> InputPair {
        let pool = &pools[rng.random_range(0..pools.len())];
        let (j, k) = pool.pairs[rng.random_range(0..pool.pairs.len())];
        let visits = &self.cohort.eyes()[pool.eye].visits;
        let (vj, vk) = (&visits[j], &visits[k]);
        let keep_labels = self.mode == TrainingMode::Supervised;
        InputPair {
            x_j: vj.features.clone(),
            x_k: vk.features.clone(),
            gap_months: vk.visit_time - vj.visit_time,
            label_j: vj.label.filter(|_| keep_labels),
            label_k: vk.label.filter(|_| keep_labels),
            eye: pool.eye,
        }
    }

    /// One batch: converted-target pairs first, then the rest.
    pub fn sample_batch<R: Rng>(&self, rng: &mut R) -> Vec<InputPair> {
        let mut out = Vec::with_capacity(self.batch_pairs);
        for _ in 0..self.n_converted {
            out.push(self.draw(&self.converted, rng));
        }
        for _ in self.n_converted..self.batch_pairs {
            out.push(self.draw(&self.stable, rng));
        }
        out
    }
}

pub fn sample_batch<R: Rng>(cohort: &Cohort, config: &TrainConfig, rng: &mut R) -> Result<Vec<InputPair>> {
    Ok(PairSampler::new(cohort, config)?.sample_batch(rng))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Eye, SurvivalLabel, Visit};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn converter_eye(id: &str, times: &[f64], t_star: f64) -> Eye {
        Eye::new(
            id,
            times
                .iter()
                .map(|&t| Visit::new(t, vec![t, 1.0], Some(SurvivalLabel::event(t_star - t))))
                .collect(),
        )
    }

    fn censored_eye(id: &str, times: &[f64]) -> Eye {
        let last = *times.last().unwrap();
        Eye::new(
            id,
            times
                .iter()
                .map(|&t| Visit::new(t, vec![t, 0.0], Some(SurvivalLabel::censored(last - t))))
                .collect(),
        )
    }

    fn cohort() -> Cohort {
        Cohort::new(
            vec![
                converter_eye("a", &[0.0, 6.0, 12.0, 20.0, 60.0], 15.0),
                censored_eye("b", &[0.0, 10.0, 30.0, 70.0]),
                censored_eye("c", &[0.0, 5.0]),
            ],
            2,
            true,
        )
        .unwrap()
    }

    #[test]
    fn forced_pair_unsupervised() {
        let c = Cohort::new(vec![censored_eye("x", &[0.0, 6.0])], 2, true).unwrap().without_labels();
        let cfg = TrainConfig { batch_pairs: 4, mode: TrainingMode::Unsupervised, ..Default::default() };
        let batch = sample_batch(&c, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(batch.len(), 4);
        assert!(batch.iter().all(|p| p == &batch[0] && p.gap_months == 6.0 && p.label_j.is_none()));
    }

    #[test]
    fn supervised_fraction_and_stages() {
        let c = cohort();
        let cfg = TrainConfig::default();
        let sampler = PairSampler::new(&c, &cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let batch = sampler.sample_batch(&mut rng);
            assert_eq!(batch.len(), 16);
            let n_conv = batch.iter().filter(|p| p.label_k.unwrap().is_converted()).count();
            assert_eq!(n_conv, 8);
            assert!(batch.iter().all(|p| !p.label_j.unwrap().is_converted()));
        }
    }

    #[test]
    fn gaps_bounded_over_many_draws() {
        let c = cohort();
        for mode in [TrainingMode::Supervised, TrainingMode::Unsupervised] {
            let cfg = TrainConfig { mode, ..Default::default() };
            let data = if mode == TrainingMode::Supervised { c.clone() } else { c.without_labels() };
            let sampler = PairSampler::new(&data, &cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            for _ in 0..10_000 / 16 + 1 {
                for p in sampler.sample_batch(&mut rng) {
                    assert!(p.gap_months > 0.0 && p.gap_months <= 36.0);
                }
            }
        }
    }

    #[test]
    fn errors() {
        let no_conv = Cohort::new(vec![censored_eye("b", &[0.0, 10.0])], 2, true).unwrap();
        assert!(matches!(
            sample_batch(&no_conv, &TrainConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::SamplingExhausted(_))
        ));
        let far = Cohort::new(vec![censored_eye("b", &[0.0, 50.0])], 2, true).unwrap();
        let cfg = TrainConfig { mode: TrainingMode::Unsupervised, ..Default::default() };
        assert!(matches!(
            sample_batch(&far, &cfg, &mut ChaCha8Rng::seed_from_u64(0)),
            Err(Error::SamplingExhausted(_))
        ));
        let unlabeled = cohort().without_labels();
        let err = sample_batch(&unlabeled, &TrainConfig::default(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap_err();
        assert!(err.to_string().contains("supervised"));
    }
}
