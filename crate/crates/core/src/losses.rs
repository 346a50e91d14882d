//! Training losses over batches of intra-subject visit pairs.
//!
//! Each pair `(j, k)` holds an earlier visit `j` and a later visit `k` of the
//! same eye. Three quantities are computed per pair: the stage probabilities
//! `p0_j`, `p0_k` and the forecast `pf_j = sigmoid(r_j + b(gap))` of visit `j`
//! converting by the time of visit `k`.
//!
//! * classification: `bce(y_j, p0_j) + bce(y_k, p0_k) + bce(y_k, pf_j)`
//! * consistency: `bce(p0_k, pf_j)` (soft target, label-free)
//! * ranking: logistic loss on `gamma * (r_m - r_n)` over comparable pairs
//!
//! Batch losses are means over pairs (ranking: over comparable pairs).
//! All gradients here are with respect to embeddings and head parameters;
//! the encoder chain rule lives in [`crate::model`].

use serde::{Deserialize, Serialize};

use crate::domain::{derive_stage, SurvivalLabel};
use crate::error::{ensure_dim, Error, Result};
use crate::head::{dot, sigmoid, HyperplaneHead};

/// Log-clamp applied to every probability before taking a logarithm.
pub const EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainingMode {
    #[default]
    Supervised,
    Unsupervised,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedPair {
    pub f_j: Vec<f64>,
    pub f_k: Vec<f64>,
    /// Normalized time from visit `j` to visit `k`.
    pub gap: f64,
    pub label_j: Option<SurvivalLabel>,
    pub label_k: Option<SurvivalLabel>,
    /// Index of the eye within its cohort.
    pub eye: usize,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairBatch {
    pub pairs: Vec<EmbeddedPair>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// The 2B individual samples, ordered `j0, k0, j1, k1, ...`.
    pub fn rank_samples(&self) -> Result<Vec<RankSample>> {
        let mut out = Vec::with_capacity(2 * self.len());
        for p in &self.pairs {
            for label in [p.label_j, p.label_k] {
                let l = label.ok_or_else(|| Error::MissingLabels("ranking sets need labels".into()))?;
                out.push(RankSample {
                    time: l.time,
                    event: l.event,
                    eye: p.eye,
                });
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankSample {
    pub time: f64,
    pub event: bool,
    pub eye: usize,
}

/// Comparable ordered pairs: `lt` holds `(m, n)` where `m` converts before `n`,
/// `gt` holds `(m, n)` where `m` converts after `n`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ComparablePairSets {
    pub lt: Vec<(usize, usize)>,
    pub gt: Vec<(usize, usize)>,
}

impl ComparablePairSets {
    pub fn len(&self) -> usize {
        self.lt.len() + self.gt.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lt.is_empty() && self.gt.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub classification: Option<f64>,
    pub consistency: f64,
    pub ranking: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossOptions {
    pub mode: TrainingMode,
    /// Treat the consistency target `p0_k` as a constant.
    pub stop_target_gradient: bool,
}

impl Default for LossOptions {
    fn default() -> Self {
        Self {
            mode: TrainingMode::Supervised,
            stop_target_gradient: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGradient {
    pub w: Vec<f64>,
    pub beta: f64,
    pub alpha_raw: f64,
    pub gamma_raw: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchGradient {
    pub d_f_j: Vec<Vec<f64>>,
    pub d_f_k: Vec<Vec<f64>>,
    pub head: HeadGradient,
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(EPS, 1.0 - EPS)
}

fn bce_unchecked(target: f64, pred: f64) -> f64 {
    let p = clamp_prob(pred);
    -(target * p.ln() + (1.0 - target) * (1.0 - p).ln())
}

/// Binary cross entropy with a soft target.
pub fn bce(target: f64, pred: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&target) {
        return Err(Error::InvalidArgument(format!("bce target {target} outside [0, 1]")));
    }
    Ok(bce_unchecked(target, pred))
}

/// d bce(target, sigmoid(z)) / dz; zero where the clamp is active.
fn bce_grad_logit(target: f64, pred: f64) -> f64 {
    if (EPS..=1.0 - EPS).contains(&pred) {
        pred - target
    } else {
        0.0
    }
}

/// d bce(target, pred) / d target.
fn bce_grad_target(pred: f64) -> f64 {
    let p = clamp_prob(pred);
    (1.0 - p).ln() - p.ln()
}

fn stage(label: Option<SurvivalLabel>) -> Result<f64> {
    label
        .map(|l| f64::from(derive_stage(&l)))
        .ok_or_else(|| Error::MissingLabels("classification loss needs labels".into()))
}

struct PairForward {
    r_j: f64,
    r_k: f64,
    p0_j: f64,
    p0_k: f64,
    pf_j: f64,
}

fn forward_pairs(batch: &PairBatch, head: &HyperplaneHead) -> Result<Vec<PairForward>> {
    let alpha = head.alpha();
    batch
        .pairs
        .iter()
        .map(|p| {
            ensure_dim(head.dim(), p.f_j.len())?;
            ensure_dim(head.dim(), p.f_k.len())?;
            let r_j = dot(&head.w, &p.f_j);
            let r_k = dot(&head.w, &p.f_k);
            Ok(PairForward {
                r_j,
                r_k,
                p0_j: sigmoid(r_j + head.beta),
                p0_k: sigmoid(r_k + head.beta),
                pf_j: sigmoid(r_j + alpha * p.gap + head.beta),
            })
        })
        .collect()
}

pub fn classification_loss(batch: &PairBatch, head: &HyperplaneHead) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let fw = forward_pairs(batch, head)?;
    let mut sum = 0.0;
    for (p, f) in batch.pairs.iter().zip(&fw) {
        let y_j = stage(p.label_j)?;
        let y_k = stage(p.label_k)?;
        sum += bce_unchecked(y_j, f.p0_j) + bce_unchecked(y_k, f.p0_k) + bce_unchecked(y_k, f.pf_j);
    }
    Ok(sum / batch.len() as f64)
}

pub fn consistency_loss(batch: &PairBatch, head: &HyperplaneHead) -> Result<f64> {
    if batch.is_empty() {
        return Ok(0.0);
    }
    let fw = forward_pairs(batch, head)?;
    Ok(fw.iter().map(|f| bce_unchecked(f.p0_k, f.pf_j)).sum::<f64>() / batch.len() as f64)
}

/// Comparable pairs over all ordered sample pairs `m != n`, across eyes:
/// `(m, n)` is in `lt` iff `T_m < T_n` and (`E_m = 1` or same eye), and in
/// `gt` iff `T_m > T_n` and (`E_n = 1` or same eye). Tied times give nothing.
pub fn ranking_sets(samples: &[RankSample]) -> ComparablePairSets {
    let mut sets = ComparablePairSets::default();
    for (m, a) in samples.iter().enumerate() {
        for (n, b) in samples.iter().enumerate() {
            if m == n {
                continue;
            }
            let same_eye = a.eye == b.eye;
            if a.time < b.time && (a.event || same_eye) {
                sets.lt.push((m, n));
            } else if a.time > b.time && (b.event || same_eye) {
                sets.gt.push((m, n));
            }
        }
    }
    sets
}

/// Label-free sets for `n_pairs` intra-subject pairs laid out `j0, k0, j1, k1, ...`:
/// the later visit `k` always ranks ahead of `j`.
pub fn intra_subject_sets(n_pairs: usize) -> ComparablePairSets {
    ComparablePairSets {
        lt: (0..n_pairs).map(|i| (2 * i + 1, 2 * i)).collect(),
        gt: (0..n_pairs).map(|i| (2 * i, 2 * i + 1)).collect(),
    }
}

/// Returns the ranking loss together with its gradients with respect to the
/// risks and to the effective scale `gamma`.
pub fn ranking_loss_with_grad(
    risks: &[f64],
    sets: &ComparablePairSets,
    gamma: f64,
) -> (f64, Vec<f64>, f64) {
    let mut d_risks = vec![0.0; risks.len()];
    if sets.is_empty() {
        return (0.0, d_risks, 0.0);
    }
    let scale = 1.0 / sets.len() as f64;
    let mut loss = 0.0;
    let mut d_gamma = 0.0;
    let mut accumulate = |m: usize, n: usize, before: bool| {
        let diff = risks[m] - risks[n];
        let u = gamma * diff;
        // p = probability that m converts before n
        let (prob, grad_u) = if before {
            let p = sigmoid(u);
            (p, if (EPS..=1.0 - EPS).contains(&p) { p - 1.0 } else { 0.0 })
        } else {
            let q = sigmoid(-u);
            (q, if (EPS..=1.0 - EPS).contains(&q) { 1.0 - q } else { 0.0 })
        };
        loss -= clamp_prob(prob).ln();
        let g = grad_u * scale;
        d_risks[m] += g * gamma;
        d_risks[n] -= g * gamma;
        d_gamma += g * diff;
    };
    for &(m, n) in &sets.lt {
        accumulate(m, n, true);
    }
    for &(m, n) in &sets.gt {
        accumulate(m, n, false);
    }
    (loss * scale, d_risks, d_gamma)
}

pub fn ranking_loss(risks: &[f64], sets: &ComparablePairSets, gamma: f64) -> f64 {
    ranking_loss_with_grad(risks, sets, gamma).0
}

fn batch_sets(batch: &PairBatch, mode: TrainingMode) -> Result<ComparablePairSets> {
    match mode {
        TrainingMode::Supervised => Ok(ranking_sets(&batch.rank_samples()?)),
        TrainingMode::Unsupervised => Ok(intra_subject_sets(batch.len())),
    }
}

pub fn total_loss(batch: &PairBatch, head: &HyperplaneHead, opts: &LossOptions) -> Result<LossBreakdown> {
    Ok(total_loss_with_grad(batch, head, opts)?.0)
}

/// Total loss with exact gradients with respect to every embedding in the
/// batch and every head parameter (unconstrained parametrization).
pub fn total_loss_with_grad(
    batch: &PairBatch,
    head: &HyperplaneHead,
    opts: &LossOptions,
) -> Result<(LossBreakdown, BatchGradient)> {
    let b = batch.len();
    let dim = head.dim();
    let fw = forward_pairs(batch, head)?;
    let sets = batch_sets(batch, opts.mode)?;
    let supervised = opts.mode == TrainingMode::Supervised;
    let inv_b = if b == 0 { 0.0 } else { 1.0 / b as f64 };
    let gamma = head.gamma();

    let mut cls = 0.0;
    let mut cns = 0.0;
    let mut d_r = vec![0.0; 2 * b];
    let mut d_beta = 0.0;
    let mut d_alpha = 0.0;

    for (i, (pair, f)) in batch.pairs.iter().zip(&fw).enumerate() {
        let mut dz0_j = 0.0;
        let mut dz0_k = 0.0;
        let mut dzf = 0.0;

        if supervised {
            let y_j = stage(pair.label_j)?;
            let y_k = stage(pair.label_k)?;
            cls += bce_unchecked(y_j, f.p0_j) + bce_unchecked(y_k, f.p0_k) + bce_unchecked(y_k, f.pf_j);
            dz0_j += inv_b * bce_grad_logit(y_j, f.p0_j);
            dz0_k += inv_b * bce_grad_logit(y_k, f.p0_k);
            dzf += inv_b * bce_grad_logit(y_k, f.pf_j);
        }

        cns += bce_unchecked(f.p0_k, f.pf_j);
        dzf += inv_b * bce_grad_logit(f.p0_k, f.pf_j);
        if !opts.stop_target_gradient {
            dz0_k += inv_b * bce_grad_target(f.pf_j) * f.p0_k * (1.0 - f.p0_k);
        }

        d_r[2 * i] += dz0_j + dzf;
        d_r[2 * i + 1] += dz0_k;
        d_beta += dz0_j + dz0_k + dzf;
        d_alpha += dzf * pair.gap;
    }

    let risks: Vec<f64> = fw.iter().flat_map(|f| [f.r_j, f.r_k]).collect();
    let (rnk, d_r_rank, d_gamma) = ranking_loss_with_grad(&risks, &sets, gamma);
    for (d, g) in d_r.iter_mut().zip(&d_r_rank) {
        *d += g;
    }

    let mut d_w = vec![0.0; dim];
    let mut d_f_j = Vec::with_capacity(b);
    let mut d_f_k = Vec::with_capacity(b);
    for (i, pair) in batch.pairs.iter().enumerate() {
        let (gj, gk) = (d_r[2 * i], d_r[2 * i + 1]);
        for c in 0..dim {
            d_w[c] += gj * pair.f_j[c] + gk * pair.f_k[c];
        }
        d_f_j.push(head.w.iter().map(|w| gj * w).collect());
        d_f_k.push(head.w.iter().map(|w| gk * w).collect());
    }

    let cls = supervised.then_some(cls * inv_b);
    let cns = cns * inv_b;
    let breakdown = LossBreakdown {
        classification: cls,
        consistency: cns,
        ranking: rnk,
        total: cls.unwrap_or(0.0) + cns + rnk,
    };
    let grad = BatchGradient {
        d_f_j,
        d_f_k,
        head: HeadGradient {
            w: d_w,
            beta: d_beta,
            alpha_raw: d_alpha * sigmoid(head.alpha_raw),
            gamma_raw: d_gamma * sigmoid(head.gamma_raw),
        },
    };
    Ok((breakdown, grad))
}
