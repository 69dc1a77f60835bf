//! The five training objectives as interchangeable strategies.
//!
//! Each strategy turns a batch of predicted distributions into per-token
//! loss weights and a truncation mask, from which a single scalar loss
//! and the per-token logit gradients follow. The mask and the TaiLr
//! weights are constants of the iteration (stop-gradient): perturbing the
//! logits of a truncated token with the mask held fixed leaves the loss
//! unchanged.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::math::select_desc_threshold;
use crate::model::DistributionBatch;
use crate::quality::{self, TargetIndex};

pub const MAX_ERROR_NORM: f64 = std::f64::consts::SQRT_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Strategy {
    #[serde(rename = "MLE")]
    Mle,
    #[serde(rename = "LOSS_TRUNC")]
    LossTrunc,
    #[serde(rename = "TAILR")]
    Tailr,
    #[serde(rename = "ENT_FRACTION")]
    EntFraction,
    #[serde(rename = "ENT_THRESHOLD")]
    EntThreshold,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Mle => "MLE",
            Strategy::LossTrunc => "LOSS_TRUNC",
            Strategy::Tailr => "TAILR",
            Strategy::EntFraction => "ENT_FRACTION",
            Strategy::EntThreshold => "ENT_THRESHOLD",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "MLE" => Ok(Strategy::Mle),
            "LOSS_TRUNC" => Ok(Strategy::LossTrunc),
            "TAILR" => Ok(Strategy::Tailr),
            "ENT_FRACTION" => Ok(Strategy::EntFraction),
            "ENT_THRESHOLD" => Ok(Strategy::EntThreshold),
            other => Err(invalid(format!("unknown strategy {other:?}"))),
        }
    }
}

/// Strategy tag plus every hyper-parameter; only the fields of the active
/// strategy are read.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub strategy: Strategy,
    /// Fraction of sentences (LOSS_TRUNC) or tokens (ENT_FRACTION) to
    /// truncate per batch.
    #[serde(default = "default_fraction")]
    pub fraction: f64,
    /// Error-norm cutoff for ENT_THRESHOLD; tokens with norm >= threshold
    /// are truncated.
    #[serde(default = "default_threshold")]
    pub threshold: f64,
    /// TaiLr smoothing factor.
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    /// Lower bound on the TaiLr weighting factor.
    #[serde(default = "default_weight_floor")]
    pub weight_floor: f64,
    /// Before this iteration every strategy behaves exactly as MLE.
    #[serde(default)]
    pub start_iteration: usize,
}

fn default_fraction() -> f64 {
    0.1
}
fn default_threshold() -> f64 {
    1.38
}
fn default_gamma() -> f64 {
    0.1
}
fn default_weight_floor() -> f64 {
    0.2
}

impl ObjectiveConfig {
    pub fn mle() -> Self {
        ObjectiveConfig {
            strategy: Strategy::Mle,
            fraction: default_fraction(),
            threshold: default_threshold(),
            gamma: default_gamma(),
            weight_floor: default_weight_floor(),
            start_iteration: 0,
        }
    }

    pub fn with_strategy(strategy: Strategy) -> Self {
        ObjectiveConfig {
            strategy,
            ..ObjectiveConfig::mle()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.fraction) {
            return Err(invalid(format!(
                "truncation fraction must be in [0, 1), got {}",
                self.fraction
            )));
        }
        if !(self.threshold > 0.0 && self.threshold <= MAX_ERROR_NORM) {
            return Err(invalid(format!(
                "error-norm threshold must be in (0, sqrt(2)], got {}",
                self.threshold
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(invalid(format!("gamma must be in [0, 1], got {}", self.gamma)));
        }
        if !(0.0..=1.0).contains(&self.weight_floor) {
            return Err(invalid(format!(
                "weight floor must be in [0, 1], got {}",
                self.weight_floor
            )));
        }
        Ok(())
    }
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig::mle()
    }
}

/// Per-item truncation flags. Depending on the producing operation the
/// items are tokens or sentences.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TruncationMask {
    pub truncated: Vec<bool>,
    pub kept_count: usize,
}

impl TruncationMask {
    pub fn new(truncated: Vec<bool>) -> Self {
        let kept_count = truncated.iter().filter(|&&t| !t).count();
        TruncationMask { truncated, kept_count }
    }

    pub fn keep_all(len: usize) -> Self {
        TruncationMask {
            truncated: vec![false; len],
            kept_count: len,
        }
    }

    pub fn len(&self) -> usize {
        self.truncated.len()
    }

    pub fn is_empty(&self) -> bool {
        self.truncated.is_empty()
    }

    pub fn truncated_count(&self) -> usize {
        self.truncated.len() - self.kept_count
    }
}

/// Per-token loss weights. Mask-based strategies use {0, 1}; TaiLr
/// produces values in [weight_floor, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct TokenWeights {
    pub weight: Vec<f64>,
}

impl TokenWeights {
    pub fn ones(len: usize) -> Self {
        TokenWeights { weight: vec![1.0; len] }
    }
}

/// TaiLr weighting factor: `max(floor, p_t / (gamma + (1 - gamma) p_t))`.
/// A `p_t` of exactly 0 is treated as the smallest positive normal double,
/// the same cap used for the NLL.
pub fn tailr_weight(p_t: f64, gamma: f64, floor: f64) -> f64 {
    let p = if p_t == 0.0 { f64::MIN_POSITIVE } else { p_t };
    let factor = p / (gamma + (1.0 - gamma) * p);
    factor.max(floor)
}

/// Sentence-level mask: truncate the sentences whose NLL lies strictly
/// above the per-batch `c`-quantile threshold.
pub fn loss_truncation_mask(sentence_nll: &[f64], c: f64) -> Result<TruncationMask> {
    let threshold = select_desc_threshold(sentence_nll, c)?;
    Ok(TruncationMask::new(
        sentence_nll.iter().map(|&nll| nll > threshold).collect(),
    ))
}

/// Token-level mask for a fixed truncation fraction: sort the error norms
/// descending, take the value at index `floor(c * N)` as the threshold,
/// truncate everything strictly above it. When all norms are distinct this
/// truncates exactly `floor(c * N)` tokens.
pub fn ent_fraction_mask(norms: &[f64], c: f64) -> Result<TruncationMask> {
    let threshold = select_desc_threshold(norms, c)?;
    Ok(TruncationMask::new(
        norms.iter().map(|&n| n > threshold).collect(),
    ))
}

/// Token-level mask for a fixed threshold: a token is kept iff its error
/// norm is strictly below `tau`.
pub fn ent_threshold_mask(norms: &[f64], tau: f64) -> Result<TruncationMask> {
    if !(tau > 0.0 && tau <= MAX_ERROR_NORM) {
        return Err(invalid(format!(
            "error-norm threshold must be in (0, sqrt(2)], got {tau}"
        )));
    }
    Ok(TruncationMask::new(norms.iter().map(|&n| n >= tau).collect()))
}

/// Everything `apply_objective` produces for one batch.
#[derive(Debug, Clone)]
pub struct ObjectiveOutput {
    pub loss: f64,
    /// One gradient row per token, each of vocabulary length. Truncated
    /// tokens carry an exact zero row.
    pub logit_gradient: Vec<Vec<f64>>,
    pub mask: TruncationMask,
    pub weights: TokenWeights,
}

fn check_shapes(
    dist: &DistributionBatch,
    targets: &[TargetIndex],
    sentence_boundaries: &[std::ops::Range<usize>],
) -> Result<()> {
    if dist.rows.len() != targets.len() {
        return Err(invalid(format!(
            "batch has {} rows but {} targets",
            dist.rows.len(),
            targets.len()
        )));
    }
    let mut covered = 0usize;
    for range in sentence_boundaries {
        if range.start != covered || range.end < range.start || range.end > targets.len() {
            return Err(invalid(
                "sentence boundaries must partition the token range in order",
            ));
        }
        covered = range.end;
    }
    if covered != targets.len() {
        return Err(invalid(
            "sentence boundaries must cover every token in the batch",
        ));
    }
    Ok(())
}

/// Compute the truncation mask and per-token weights for the configured
/// strategy. Before `start_iteration` every strategy degenerates to MLE
/// (all kept, all weights 1). The result is a constant of the iteration:
/// callers differentiate the loss with the mask and weights held fixed.
pub fn compute_mask_weights(
    dist: &DistributionBatch,
    targets: &[TargetIndex],
    sentence_boundaries: &[std::ops::Range<usize>],
    config: &ObjectiveConfig,
    iteration: usize,
) -> Result<(TruncationMask, TokenWeights)> {
    check_shapes(dist, targets, sentence_boundaries)?;
    config.validate()?;
    let n = targets.len();

    if iteration < config.start_iteration || config.strategy == Strategy::Mle {
        return Ok((TruncationMask::keep_all(n), TokenWeights::ones(n)));
    }

    match config.strategy {
        Strategy::Mle => unreachable!(),
        Strategy::LossTrunc => {
            // Sentence score: mean token NLL, so long sentences are not
            // penalized for their length.
            let sentence_nll: Vec<f64> = sentence_boundaries
                .iter()
                .map(|range| {
                    let mut sum = 0.0;
                    for i in range.clone() {
                        sum += quality::token_nll(&dist.rows[i], targets[i])?;
                    }
                    Ok(sum / (range.len().max(1)) as f64)
                })
                .collect::<Result<_>>()?;
            let sentence_mask = loss_truncation_mask(&sentence_nll, config.fraction)?;
            let mut truncated = vec![false; n];
            for (s, range) in sentence_boundaries.iter().enumerate() {
                if sentence_mask.truncated[s] {
                    for flag in &mut truncated[range.clone()] {
                        *flag = true;
                    }
                }
            }
            Ok((TruncationMask::new(truncated), TokenWeights::ones(n)))
        }
        Strategy::Tailr => {
            let weight: Vec<f64> = dist
                .rows
                .iter()
                .zip(targets)
                .map(|(p, &t)| {
                    let pt = p.get(t.0).ok_or_else(|| {
                        invalid(format!("target index {} out of range", t.0))
                    })?;
                    Ok(tailr_weight(pt, config.gamma, config.weight_floor))
                })
                .collect::<Result<_>>()?;
            Ok((TruncationMask::keep_all(n), TokenWeights { weight }))
        }
        Strategy::EntFraction | Strategy::EntThreshold => {
            let norms: Vec<f64> = dist
                .rows
                .iter()
                .zip(targets)
                .map(|(p, &t)| quality::error_l2_norm(p, t))
                .collect::<Result<_>>()?;
            let mask = if config.strategy == Strategy::EntFraction {
                ent_fraction_mask(&norms, config.fraction)?
            } else {
                ent_threshold_mask(&norms, config.threshold)?
            };
            Ok((mask, TokenWeights::ones(n)))
        }
    }
}

/// Loss and logit gradients with a fixed mask and fixed weights:
///
///   loss = sum_kept w_i nll_i / max(1, kept)
///   d logits_i = w_i (p_i - OH(t_i)) / max(1, kept)   (zero if truncated)
///
/// An all-truncated batch yields loss 0 and a zero gradient; that is a
/// documented outcome, not an error.
pub fn masked_loss_grad(
    dist: &DistributionBatch,
    targets: &[TargetIndex],
    mask: &TruncationMask,
    weights: &TokenWeights,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let n = targets.len();
    if dist.rows.len() != n || mask.truncated.len() != n || weights.weight.len() != n {
        return Err(invalid("mask/weights/targets shape mismatch"));
    }
    let denom = mask.kept_count.max(1) as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(n);
    for i in 0..n {
        let p = &dist.rows[i];
        let t = targets[i];
        if mask.truncated[i] {
            grads.push(vec![0.0; p.len()]);
            continue;
        }
        let w = weights.weight[i];
        loss += w * quality::token_nll(p, t)? / denom;
        let scale = w / denom;
        let mut row: Vec<f64> = p.values().iter().map(|&py| scale * py).collect();
        row[t.0] -= scale;
        grads.push(row);
    }
    Ok((loss, grads))
}

/// One-call form: mask/weight computation followed by the masked loss.
pub fn apply_objective(
    dist: &DistributionBatch,
    targets: &[TargetIndex],
    sentence_boundaries: &[std::ops::Range<usize>],
    config: &ObjectiveConfig,
    iteration: usize,
) -> Result<ObjectiveOutput> {
    let (mask, weights) = compute_mask_weights(dist, targets, sentence_boundaries, config, iteration)?;
    let (loss, logit_gradient) = masked_loss_grad(dist, targets, &mask, &weights)?;
    Ok(ObjectiveOutput {
        loss,
        logit_gradient,
        mask,
        weights,
    })
}
