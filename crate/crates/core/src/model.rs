//! Encoder and head composed into a trainable model.
//!
//! Both Siamese branches run through the same [`Mlp`]; their parameter
//! gradients are accumulated into one flat vector laid out as
//! `[encoder params..., w..., beta, alpha_raw, gamma_raw]`.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::domain::{SurvivalLabel, TimeNormalizer, Visit};
use crate::encoder::{Encoder, Mlp};
use crate::error::{ensure_dim, Error, Result};
use crate::head::HyperplaneHead;
use crate::losses::{total_loss_with_grad, EmbeddedPair, LossBreakdown, LossOptions, PairBatch};

/// A sampled intra-subject pair before encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct InputPair {
    pub x_j: Vec<f64>,
    pub x_k: Vec<f64>,
    /// Months from visit `j` to visit `k`.
    pub gap_months: f64,
    pub label_j: Option<SurvivalLabel>,
    pub label_k: Option<SurvivalLabel>,
    pub eye: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub encoder: Mlp,
    pub head: HyperplaneHead,
    pub time: TimeNormalizer,
}

/// Named ranges of the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub encoder: Range<usize>,
    pub w: Range<usize>,
    pub beta: usize,
    pub alpha_raw: usize,
    pub gamma_raw: usize,
}

/// Mean over views of the conversion probability at normalized time `t`.
pub fn predict_multiview<E: Encoder>(
    head: &HyperplaneHead,
    encoder: &E,
    visit: &Visit,
    t: f64,
) -> Result<f64> {
    let views = visit.inference_views();
    if views.is_empty() {
        return Err(Error::InvalidArgument("visit has no views".into()));
    }
    let mut sum = 0.0;
    for v in views {
        sum += head.cdf_at(&encoder.embed(v)?, t)?;
    }
    Ok(sum / views.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisitPrediction {
    /// Mean raw risk over views.
    pub risk: f64,
    /// Mean conversion probability per requested normalized time.
    pub probs: Vec<f64>,
}

impl Model {
    /// Seeded initialization; `layer_sizes` excludes the input dimension.
    pub fn init(input_dim: usize, layer_sizes: &[usize], time: TimeNormalizer, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut sizes = vec![input_dim];
        sizes.extend_from_slice(layer_sizes);
        let encoder = Mlp::new(&sizes, &mut rng)?;
        let head = HyperplaneHead::init(encoder.output_dim(), &mut rng);
        Ok(Self { encoder, head, time })
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn layout(&self) -> ParamLayout {
        let e = self.encoder.num_params();
        let d = self.head.dim();
        ParamLayout {
            encoder: 0..e,
            w: e..e + d,
            beta: e + d,
            alpha_raw: e + d + 1,
            gamma_raw: e + d + 2,
        }
    }

    pub fn num_params(&self) -> usize {
        self.encoder.num_params() + self.head.dim() + 3
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.encoder.params();
        p.extend_from_slice(&self.head.w);
        p.extend([self.head.beta, self.head.alpha_raw, self.head.gamma_raw]);
        p
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        ensure_dim(self.num_params(), params.len())?;
        let layout = self.layout();
        self.encoder.set_params(&params[layout.encoder.clone()])?;
        self.head.w.copy_from_slice(&params[layout.w.clone()]);
        self.head.beta = params[layout.beta];
        self.head.alpha_raw = params[layout.alpha_raw];
        self.head.gamma_raw = params[layout.gamma_raw];
        Ok(())
    }

    pub fn risk(&self, features: &[f64]) -> Result<f64> {
        self.head.risk(&self.encoder.embed(features)?)
    }

    /// Risk and conversion probabilities for one visit, averaged over its views.
    /// `times` are normalized.
    pub fn predict(&self, visit: &Visit, times: &[f64]) -> Result<VisitPrediction> {
        let views = visit.inference_views();
        if views.is_empty() {
            return Err(Error::InvalidArgument("visit has no views".into()));
        }
        let mut risk = 0.0;
        let mut probs = vec![0.0; times.len()];
        for v in views {
            let r = self.head.risk(&self.encoder.embed(v)?)?;
            risk += r;
            for (p, &t) in probs.iter_mut().zip(times) {
                *p += self.head.cdf_from_risk(r, t);
            }
        }
        let n = views.len() as f64;
        probs.iter_mut().for_each(|p| *p /= n);
        Ok(VisitPrediction {
            risk: risk / n,
            probs,
        })
    }

    pub fn visit_risk(&self, visit: &Visit) -> Result<f64> {
        Ok(self.predict(visit, &[])?.risk)
    }

    /// Encodes both visits of every pair.
    pub fn embed_batch(&self, pairs: &[InputPair]) -> Result<PairBatch> {
        pairs
            .iter()
            .map(|p| {
                Ok(EmbeddedPair {
                    f_j: self.encoder.embed(&p.x_j)?,
                    f_k: self.encoder.embed(&p.x_k)?,
                    gap: self.time.normalize(p.gap_months)?,
                    label_j: p.label_j,
                    label_k: p.label_k,
                    eye: p.eye,
                })
            })
            .collect::<Result<Vec<_>>>()
            .map(|pairs| PairBatch { pairs })
    }

    pub fn loss(&self, pairs: &[InputPair], opts: &LossOptions) -> Result<LossBreakdown> {
        crate::losses::total_loss(&self.embed_batch(pairs)?, &self.head, opts)
    }

    /// Total loss and its gradient with respect to [`Model::params`].
    pub fn loss_gradients(&self, pairs: &[InputPair], opts: &LossOptions) -> Result<(LossBreakdown, Vec<f64>)> {
        let mut tapes = Vec::with_capacity(2 * pairs.len());
        let mut embedded = Vec::with_capacity(pairs.len());
        for p in pairs {
            let (f_j, tape_j) = self.encoder.forward(&p.x_j)?;
            let (f_k, tape_k) = self.encoder.forward(&p.x_k)?;
            tapes.push((tape_j, tape_k));
            embedded.push(EmbeddedPair {
                f_j,
                f_k,
                gap: self.time.normalize(p.gap_months)?,
                label_j: p.label_j,
                label_k: p.label_k,
                eye: p.eye,
            });
        }
        let batch = PairBatch { pairs: embedded };
        let (breakdown, bg) = total_loss_with_grad(&batch, &self.head, opts)?;

        let mut grad = vec![0.0; self.num_params()];
        let layout = self.layout();
        {
            let enc = &mut grad[layout.encoder.clone()];
            for ((tape_j, tape_k), (d_j, d_k)) in tapes.into_iter().zip(bg.d_f_j.iter().zip(&bg.d_f_k)) {
                let (g_j, _) = self.encoder.backward(tape_j, d_j)?;
                let (g_k, _) = self.encoder.backward(tape_k, d_k)?;
                for ((acc, a), b) in enc.iter_mut().zip(&g_j).zip(&g_k) {
                    *acc += a + b;
                }
            }
        }
        grad[layout.w.clone()].copy_from_slice(&bg.head.w);
        grad[layout.beta] = bg.head.beta;
        grad[layout.alpha_raw] = bg.head.alpha_raw;
        grad[layout.gamma_raw] = bg.head.gamma_raw;
        Ok((breakdown, grad))
    }
}
