//! Supervised training and unsupervised fine-tuning loops.
//!
//! Each update samples a batch of intra-subject pairs, backpropagates the
//! total loss through both branches of the shared encoder and applies one
//! AdamW step at the cyclic learning rate. After every epoch the selection
//! metric is computed on the validation cohort and the best model is kept.

mod config;
mod optim;
mod sampler;

pub use config::{lr_at, FreezeFlags, SelectionMetric, TrainConfig};
pub use optim::{adamw_step, CyclicLr, OptimizerState, ADAM_EPS, BETA1, BETA2};
pub use sampler::{sample_batch, PairSampler};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::domain::{Cohort, SurvivalLabel, TimeNormalizer};
use crate::error::{Error, Result};
use crate::head::Calibrator;
use crate::losses::{LossOptions, TrainingMode};
use crate::metrics::{concordance, horizon_auroc, score_cohort, HorizonEval};
use crate::model::Model;

/// Mean losses over the updates of one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub classification: Option<f64>,
    pub consistency: f64,
    pub ranking: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub losses: EpochLosses,
    pub lr: f64,
    pub val_concordance: Option<f64>,
    pub val_metric: Option<f64>,
    pub is_best: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Selection metric of the starting parameters.
    pub initial_metric: Option<f64>,
    pub records: Vec<EpochRecord>,
    /// Epoch whose parameters were kept; `None` means the starting parameters.
    pub best_epoch: Option<usize>,
    pub best_metric: Option<f64>,
}

impl TrainHistory {
    /// Line-delimited JSON, one record per epoch.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    /// SHA-256 of [`TrainHistory::to_jsonl`], hex encoded.
    pub fn digest(&self) -> Result<String> {
        let hash = Sha256::digest(self.to_jsonl()?.as_bytes());
        Ok(hash.iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// A trained model together with everything needed to reproduce it.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub config: TrainConfig,
    pub model: Model,
    pub calibrator: Option<Calibrator>,
    pub history: TrainHistory,
    /// Seeds of every run that produced these parameters, oldest first.
    pub seed_lineage: Vec<u64>,
}

/// Validation concordance and the configured selection metric.
fn validation_metrics(model: &Model, val: &Cohort, cfg: &TrainConfig) -> Result<(Option<f64>, Option<f64>)> {
    let h = cfg.selection_horizon_months;
    let scored = score_cohort(model, val, &[h])?;
    let risks: Vec<f64> = scored.iter().map(|s| s.risk).collect();
    let labels: Vec<SurvivalLabel> = scored.iter().map(|s| s.label).collect();
    let undefined_to_none = |r: Result<f64>| match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    };
    let c = undefined_to_none(concordance(&risks, &labels))?;
    let metric = match cfg.selection_metric {
        SelectionMetric::Concordance => c,
        SelectionMetric::HorizonAuroc => {
            let evals: Vec<HorizonEval> = scored
                .iter()
                .map(|s| HorizonEval::new(s.probs[0], &s.label, h, cfg.post_horizon_converters))
                .collect();
            undefined_to_none(horizon_auroc(&evals))?
        }
    };
    Ok((c, metric))
}

fn freeze_mask(model: &Model, f: &FreezeFlags) -> Option<Vec<bool>> {
    if *f == FreezeFlags::default() {
        return None;
    }
    let layout = model.layout();
    let mut mask = vec![false; model.num_params()];
    if f.encoder {
        mask[layout.encoder.clone()].fill(true);
    }
    if f.w {
        mask[layout.w.clone()].fill(true);
    }
    mask[layout.beta] = f.beta;
    mask[layout.alpha_raw] = f.alpha;
    mask[layout.gamma_raw] = f.gamma;
    Some(mask)
}

fn better(candidate: Option<f64>, best: Option<f64>) -> bool {
    match (candidate, best) {
        (Some(c), Some(b)) => c > b,
        (Some(_), None) => true,
        _ => false,
    }
}

fn fit_calibrator(model: &Model, val: &Cohort) -> Result<Option<Calibrator>> {
    let risks: Vec<f64> = score_cohort(model, val, &[])?.iter().map(|s| s.risk).collect();
    match Calibrator::fit(&risks) {
        Ok(c) => Ok(Some(c)),
        Err(Error::DegenerateDistribution(_)) | Err(Error::InvalidArgument(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Core loop shared by supervised training and fine-tuning.
fn optimize(
    mut model: Model,
    train: &Cohort,
    val: &Cohort,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<(Model, TrainHistory)> {
    let mut history = TrainHistory::default();
    if cfg.epochs == 0 {
        return Ok((model, history));
    }
    let sampler = PairSampler::new(train, cfg)?;
    let opts = LossOptions {
        mode: cfg.mode,
        stop_target_gradient: cfg.stop_target_gradient,
    };
    let mask = freeze_mask(&model, &cfg.freeze);
    let schedule = cfg.schedule();
    // stream 1 keeps batch draws independent of the initialization stream
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);

    let (_, initial) = validation_metrics(&model, val, cfg)?;
    history.initial_metric = initial;
    history.best_metric = initial;
    let mut best_params = model.params();
    let mut params = best_params.clone();
    let mut state = OptimizerState::new(params.len());
    let mut step: u64 = 0;

    for epoch in 1..=cfg.epochs {
        let mut sums = (0.0, 0.0, 0.0, 0.0);
        let mut lr = schedule.at(step);
        for _ in 0..cfg.updates_per_epoch {
            let batch = sampler.sample_batch(&mut rng);
            let (loss, grad) = model.loss_gradients(&batch, &opts)?;
            if !loss.total.is_finite() {
                return Err(Error::Divergence {
                    step,
                    reason: format!("loss is {}", loss.total),
                });
            }
            lr = schedule.at(step);
            adamw_step(&mut params, &grad, &mut state, lr, cfg.weight_decay, mask.as_deref()).map_err(|e| {
                Error::Divergence {
                    step,
                    reason: e.to_string(),
                }
            })?;
            model.set_params(&params)?;
            sums.0 += loss.classification.unwrap_or(0.0);
            sums.1 += loss.consistency;
            sums.2 += loss.ranking;
            sums.3 += loss.total;
            step += 1;
        }
        let n = cfg.updates_per_epoch.max(1) as f64;
        let (val_concordance, val_metric) = validation_metrics(&model, val, cfg)?;
        let is_best = better(val_metric, history.best_metric);
        if is_best {
            history.best_metric = val_metric;
            history.best_epoch = Some(epoch);
            best_params.clone_from(&params);
        }
        let record = EpochRecord {
            epoch,
            losses: EpochLosses {
                classification: (cfg.mode == TrainingMode::Supervised).then_some(sums.0 / n),
                consistency: sums.1 / n,
                ranking: sums.2 / n,
                total: sums.3 / n,
            },
            lr,
            val_concordance,
            val_metric,
            is_best,
        };
        observer(&record);
        history.records.push(record);
    }
    model.set_params(&best_params)?;
    Ok((model, history))
}

/// Supervised (or, with `mode = unsupervised`, label-free) training from a
/// seeded initialization, reporting each epoch to `observer`.
pub fn train_with_observer(
    train: &Cohort,
    val: &Cohort,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainedModel> {
    cfg.validate()?;
    if train.feature_dim() != val.feature_dim() {
        return Err(Error::DimensionMismatch {
            expected: train.feature_dim(),
            actual: val.feature_dim(),
        });
    }
    let time = TimeNormalizer::new(cfg.horizon_months)?;
    let init = Model::init(train.feature_dim(), &cfg.encoder_layers, time, cfg.seed)?;
    let (model, history) = optimize(init, train, val, cfg, observer)?;
    let calibrator = fit_calibrator(&model, val)?;
    Ok(TrainedModel {
        config: cfg.clone(),
        model,
        calibrator,
        history,
        seed_lineage: vec![cfg.seed],
    })
}

pub fn train(train: &Cohort, val: &Cohort, cfg: &TrainConfig) -> Result<TrainedModel> {
    train_with_observer(train, val, cfg, &mut |_| {})
}

/// Adapts a trained model on an unlabeled cohort with the consistency and
/// intra-subject ranking losses; `val` is used only for model selection.
/// Labels present on `unlabeled` are stripped before sampling.
pub fn finetune_unsupervised_with_observer(
    start: &TrainedModel,
    unlabeled: &Cohort,
    val: &Cohort,
    cfg: &TrainConfig,
    observer: &mut dyn FnMut(&EpochRecord),
) -> Result<TrainedModel> {
    cfg.validate()?;
    if cfg.mode != TrainingMode::Unsupervised {
        return Err(Error::Config("fine-tuning requires mode = unsupervised".into()));
    }
    if cfg.epochs == 0 {
        return Ok(start.clone());
    }
    if unlabeled.feature_dim() != start.model.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: start.model.input_dim(),
            actual: unlabeled.feature_dim(),
        });
    }
    let stripped = unlabeled.without_labels();
    let (model, history) = optimize(start.model.clone(), &stripped, val, cfg, observer)?;
    let calibrator = fit_calibrator(&model, val)?;
    let mut seed_lineage = start.seed_lineage.clone();
    seed_lineage.push(cfg.seed);
    Ok(TrainedModel {
        config: cfg.clone(),
        model,
        calibrator,
        history,
        seed_lineage,
    })
}

pub fn finetune_unsupervised(
    start: &TrainedModel,
    unlabeled: &Cohort,
    val: &Cohort,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    finetune_unsupervised_with_observer(start, unlabeled, val, cfg, &mut |_| {})
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Eye, Visit};

    /// Small hand-built cohort: features track a linear latent severity.
    fn toy_cohort(n: usize, offset: usize) -> Cohort {
        let mut eyes = Vec::new();
        for i in 0..n {
            let s0 = 0.05 * ((i * 7 + offset) % 11) as f64;
            let rate = 0.01 + 0.004 * ((i * 3 + offset) % 5) as f64;
            let t_star = (1.0 - s0) / rate;
            let times: Vec<f64> = (0..8).map(|v| v as f64 * 9.0).collect();
            let last = *times.last().unwrap();
            let event = t_star <= last;
            let visits = times
                .iter()
                .map(|&t| {
                    let s = s0 + rate * t;
                    let label = if event { SurvivalLabel::event(t_star - t) } else { SurvivalLabel::censored(last - t) };
                    Visit::new(t, vec![s, s * s, 0.1 * (i % 3) as f64], Some(label))
                })
                .collect();
            eyes.push(Eye::new(format!("e{:03}", i + offset * 1000), visits));
        }
        Cohort::new(eyes, 3, true).unwrap()
    }

    fn quick_config() -> TrainConfig {
        TrainConfig {
            epochs: 3,
            updates_per_epoch: 20,
            batch_pairs: 8,
            lr_max: 1e-2,
            lr_half_period: 30,
            encoder_layers: vec![6, 4],
            seed: 11,
            ..Default::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (tr, va) = (toy_cohort(20, 0), toy_cohort(10, 1));
        let cfg = TrainConfig { epochs: 0, ..quick_config() };
        let out = train(&tr, &va, &cfg).unwrap();
        let init = Model::init(3, &cfg.encoder_layers, TimeNormalizer::default(), cfg.seed).unwrap();
        assert_eq!(out.model, init);
        assert!(out.history.records.is_empty());
    }

    #[test]
    fn identical_seeds_identical_histories() {
        let (tr, va) = (toy_cohort(20, 0), toy_cohort(10, 1));
        let a = train(&tr, &va, &quick_config()).unwrap();
        let b = train(&tr, &va, &quick_config()).unwrap();
        assert_eq!(a.history.to_jsonl().unwrap(), b.history.to_jsonl().unwrap());
        assert_eq!(a.model.params(), b.model.params());
        let c = train(&tr, &va, &TrainConfig { seed: 12, ..quick_config() }).unwrap();
        assert_ne!(a.model.params(), c.model.params());
    }

    #[test]
    fn best_epoch_is_kept() {
        let (tr, va) = (toy_cohort(20, 0), toy_cohort(10, 1));
        let mut seen = Vec::new();
        let out = train_with_observer(&tr, &va, &quick_config(), &mut |r| seen.push(r.epoch)).unwrap();
        assert_eq!(seen, vec![1, 2, 3]);
        let (c, _) = validation_metrics(&out.model, &va, &out.config).unwrap();
        assert_eq!(c, out.history.best_metric);
        assert!(out.history.records.iter().filter(|r| r.is_best).count() >= usize::from(out.history.best_epoch.is_some()));
    }

    #[test]
    fn finetune_contracts() {
        let (tr, va) = (toy_cohort(20, 0), toy_cohort(10, 1));
        let base = train(&tr, &va, &quick_config()).unwrap();
        let ft_cfg = TrainConfig { mode: TrainingMode::Unsupervised, seed: 5, ..quick_config() };
        let same = finetune_unsupervised(&base, &tr, &va, &TrainConfig { epochs: 0, ..ft_cfg.clone() }).unwrap();
        assert_eq!(same, base);

        let ft = finetune_unsupervised(&base, &tr, &va, &ft_cfg).unwrap();
        assert_eq!(ft.seed_lineage, vec![11, 5]);
        assert!(ft.history.records.iter().all(|r| r.losses.classification.is_none()));
        // selection includes the starting point, so validation never gets worse
        assert!(ft.history.best_metric >= ft.history.initial_metric);

        assert!(finetune_unsupervised(&base, &tr, &va, &quick_config()).is_err());
    }

    #[test]
    fn supervised_on_unlabeled_names_mode() {
        let (tr, va) = (toy_cohort(20, 0), toy_cohort(10, 1));
        let err = train(&tr.without_labels(), &va, &quick_config()).unwrap_err();
        assert!(err.to_string().contains("supervised mode"));
    }

    #[test]
    fn frozen_groups_do_not_move() {
        let (tr, va) = (toy_cohort(20, 0), toy_cohort(10, 1));
        let cfg = TrainConfig {
            freeze: FreezeFlags { encoder: true, alpha: true, ..Default::default() },
            ..quick_config()
        };
        let out = train(&tr, &va, &cfg).unwrap();
        let init = Model::init(3, &cfg.encoder_layers, TimeNormalizer::default(), cfg.seed).unwrap();
        assert_eq!(out.model.encoder, init.encoder);
        assert_eq!(out.model.head.alpha_raw, init.head.alpha_raw);
    }

    #[test]
    fn digest_is_stable_hex() {
        let h = TrainHistory::default();
        assert_eq!(h.digest().unwrap(), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }
}
