use serde::{Deserialize, Serialize};

use super::optim::CyclicLr;
use crate::error::{Error, Result};
use crate::losses::TrainingMode;
use crate::metrics::PostHorizonConverters;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    #[default]
    Concordance,
    HorizonAuroc,
}

/// Parameter groups held fixed during an optimization run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FreezeFlags {
    pub encoder: bool,
    pub w: bool,
    pub beta: bool,
    pub alpha: bool,
    pub gamma: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub updates_per_epoch: usize,
    pub batch_pairs: usize,
    pub lr_min: f64,
    pub lr_max: f64,
    /// Updates per half cycle of the learning-rate wave.
    pub lr_half_period: u64,
    pub weight_decay: f64,
    pub seed: u64,
    pub mode: TrainingMode,
    pub max_gap_months: f64,
    /// Fraction of each supervised batch whose later visit has converted.
    pub damd_fraction: f64,
    pub selection_metric: SelectionMetric,
    pub selection_horizon_months: f64,
    pub post_horizon_converters: PostHorizonConverters,
    /// Encoder layer widths after the input layer.
    pub encoder_layers: Vec<usize>,
    /// Months mapped to normalized time 1.
    pub horizon_months: f64,
    pub stop_target_gradient: bool,
    pub freeze: FreezeFlags,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            updates_per_epoch: 300,
            batch_pairs: 16,
            lr_min: 1e-6,
            lr_max: 1e-4,
            lr_half_period: 1500,
            weight_decay: 1e-4,
            seed: 0,
            mode: TrainingMode::Supervised,
            max_gap_months: 36.0,
            damd_fraction: 0.5,
            selection_metric: SelectionMetric::Concordance,
            selection_horizon_months: 12.0,
            post_horizon_converters: PostHorizonConverters::Negative,
            encoder_layers: vec![32, 16],
            horizon_months: 36.0,
            stop_target_gradient: false,
            freeze: FreezeFlags::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr_min > 0.0 && self.lr_min <= self.lr_max && self.lr_max.is_finite()) {
            return bad(format!("need 0 < lr_min <= lr_max, got {} and {}", self.lr_min, self.lr_max));
        }
        if self.batch_pairs < 2 {
            return bad(format!("batch_pairs must be at least 2, got {}", self.batch_pairs));
        }
        if !(0.0..=1.0).contains(&self.damd_fraction) {
            return bad(format!("damd_fraction must lie in [0, 1], got {}", self.damd_fraction));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if self.lr_half_period == 0 {
            return bad("lr_half_period must be positive".into());
        }
        if !(self.max_gap_months > 0.0 && self.max_gap_months.is_finite()) {
            return bad(format!("max_gap_months must be positive, got {}", self.max_gap_months));
        }
        if !(self.horizon_months > 0.0 && self.horizon_months.is_finite()) {
            return bad(format!("horizon_months must be positive, got {}", self.horizon_months));
        }
        if !(self.selection_horizon_months > 0.0) {
            return bad("selection_horizon_months must be positive".into());
        }
        if self.encoder_layers.is_empty() || self.encoder_layers.contains(&0) {
            return bad(format!("encoder_layers must be non-empty and positive, got {:?}", self.encoder_layers));
        }
        Ok(())
    }

    pub fn schedule(&self) -> CyclicLr {
        CyclicLr {
            lr_min: self.lr_min,
            lr_max: self.lr_max,
            half_period: self.lr_half_period,
        }
    }

    /// Number of converted later visits per supervised batch.
    pub fn n_converted_per_batch(&self) -> usize {
        (self.batch_pairs as f64 * self.damd_fraction).floor() as usize
    }
}

pub fn lr_at(config: &TrainConfig, step: u64) -> f64 {
    config.schedule().at(step)
}
