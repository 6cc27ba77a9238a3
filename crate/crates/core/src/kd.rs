//! Prediction-based baseline distillers: ranking distillation (RD) and
//! collaborative distillation (CD).
//!
//! Both losses are per user; callers average over the users of a minibatch.
//! RD's dynamic weight and CD's soft targets are computed outside the loss
//! and passed in as constants, so the losses stay smooth in the student
//! parameters.

use rand::Rng;
use rand_distr::{Distribution, Gumbel};

use crate::error::{Error, Result};
use crate::gradcore::{sigmoid, softplus, ParamStore};
use crate::models::Model;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RdConfig {
    pub k: usize,
    pub temperature: f64,
    pub lambda: f64,
    pub warmup_epochs: usize,
    pub dyn_negatives: usize,
}

impl Default for RdConfig {
    fn default() -> Self {
        RdConfig {
            k: 10,
            temperature: 10.0,
            lambda: 1e-2,
            warmup_epochs: 30,
            dyn_negatives: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CdConfig {
    pub k: usize,
    pub temperature: f64,
    pub lambda: f64,
}

impl Default for CdConfig {
    fn default() -> Self {
        CdConfig {
            k: 10,
            temperature: 10.0,
            lambda: 1e-2,
        }
    }
}

/// Normalized position importance `a_k ∝ exp(-k / T)` for `k = 1..=K`.
pub fn position_weights(k: usize, temperature: f64) -> Vec<f64> {
    // exp(-(k-1)/T) differs from exp(-k/T) by a constant factor
    let raw: Vec<f64> = (0..k).map(|j| (-(j as f64) / temperature).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Ranking-discrepancy factor: each item's estimated student rank among
/// `sampled_scores` (1 + number of sampled items scoring higher), rescaled so
/// the factors average to 1.
pub fn rd_discrepancy(topk_scores: &[f64], sampled_scores: &[f64]) -> Vec<f64> {
    let ranks: Vec<f64> = topk_scores
        .iter()
        .map(|&s| 1.0 + sampled_scores.iter().filter(|&&x| x > s).count() as f64)
        .collect();
    let mean = ranks.iter().sum::<f64>() / ranks.len().max(1) as f64;
    ranks.into_iter().map(|r| r / mean).collect()
}

/// RD weights `w_k = a_k · b_k`; `b_k = 1` while `epoch < warmup_epochs` or
/// when no discrepancy factors are supplied.
pub fn rd_weights(cfg: &RdConfig, epoch: usize, discrepancy: Option<&[f64]>) -> Vec<f64> {
    let a = position_weights(cfg.k, cfg.temperature);
    match discrepancy {
        Some(b) if epoch >= cfg.warmup_epochs => a.iter().zip(b).map(|(x, y)| x * y).collect(),
        _ => a,
    }
}

/// `-Σ_k w_k ln σ(score(u, π_k))`. Gradients times `scale` go into `params`.
pub fn rd_loss(
    model: &Model,
    params: &mut ParamStore,
    user: usize,
    topk: &[usize],
    weights: &[f64],
    scale: f64,
) -> Result<f64> {
    if topk.is_empty() {
        return Err(Error::InvalidArgument("RD needs a non-empty teacher list".into()));
    }
    debug_assert_eq!(topk.len(), weights.len());
    let (v, mut g) = params.split();
    let mut total = 0.0;
    for (&item, &w) in topk.iter().zip(weights) {
        let s = model.score(&v, user, item);
        total += w * softplus(-s);
        model.accumulate_score(&v, &mut g, user, item, -w * sigmoid(-s) * scale);
    }
    Ok(total)
}

/// Sample `k` distinct positions of a ranked list of length `len` without
/// replacement, position `j` (rank `j + 1`) weighted by `exp(-(j + 1) / T)`.
/// Returned in ascending position order, i.e. teacher order.
///
/// Uses the Gumbel-top-k construction, which is equivalent to drawing one
/// position at a time and renormalizing.
pub fn sample_ranked_positions<R: Rng + ?Sized>(len: usize, k: usize, temperature: f64, rng: &mut R) -> Result<Vec<usize>> {
    if k > len {
        return Err(Error::InvalidArgument(format!(
            "cannot sample {k} items from a list of {len}"
        )));
    }
    if k == len {
        return Ok((0..len).collect());
    }
    let gumbel = Gumbel::new(0.0, 1.0).expect("standard Gumbel");
    let mut keys: Vec<(f64, usize)> = (0..len)
        .map(|j| (-((j + 1) as f64) / temperature + gumbel.sample(rng), j))
        .collect();
    keys.select_nth_unstable_by(k - 1, |a, b| b.0.total_cmp(&a.0));
    let mut picks: Vec<usize> = keys[..k].iter().map(|&(_, j)| j).collect();
    picks.sort_unstable();
    Ok(picks)
}

/// CD's sampled list: `k` items of the teacher's ranking, drawn by position
/// importance and kept in teacher order.
pub fn cd_sample<R: Rng + ?Sized>(teacher_ranking: &[usize], k: usize, temperature: f64, rng: &mut R) -> Result<Vec<usize>> {
    Ok(sample_ranked_positions(teacher_ranking.len(), k, temperature, rng)?
        .into_iter()
        .map(|j| teacher_ranking[j])
        .collect())
}

/// Margin that keeps min-max targets strictly inside (0, 1).
pub const CD_TARGET_MARGIN: f64 = 1e-3;

/// Soft targets from unbounded teacher scores: min-max normalized over
/// `reference` (the user's cached teacher list), then squeezed into
/// `[margin, 1 - margin]`.
pub fn minmax_targets(scores: &[f64], reference: &[f64]) -> Vec<f64> {
    let lo = reference.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = reference.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    scores
        .iter()
        .map(|&s| {
            let unit = if hi > lo { ((s - lo) / (hi - lo)).clamp(0.0, 1.0) } else { 0.5 };
            CD_TARGET_MARGIN + (1.0 - 2.0 * CD_TARGET_MARGIN) * unit
        })
        .collect()
}

/// Soft targets from teacher logits: `σ(logit)`.
pub fn probability_targets(logits: &[f64]) -> Vec<f64> {
    logits.iter().map(|&z| sigmoid(z)).collect()
}

/// `-Σ_k [q_k ln σ(s_k) + (1 - q_k) ln(1 - σ(s_k))]` over the sampled list.
pub fn cd_loss(
    model: &Model,
    params: &mut ParamStore,
    user: usize,
    items: &[usize],
    targets: &[f64],
    scale: f64,
) -> f64 {
    debug_assert_eq!(items.len(), targets.len());
    let (v, mut g) = params.split();
    let mut total = 0.0;
    for (&item, &q) in items.iter().zip(targets) {
        let s = model.score(&v, user, item);
        total += q * softplus(-s) + (1.0 - q) * softplus(s);
        model.accumulate_score(&v, &mut g, user, item, (sigmoid(s) - q) * scale);
    }
    total
}
