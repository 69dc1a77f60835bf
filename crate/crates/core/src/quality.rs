//! Per-token data-quality scores.
//!
//! The central quantity is the error norm: the l2 distance between the
//! model's predicted next-token distribution and the one-hot ground-truth
//! vector. Unlike the NLL it looks at the whole distribution, so it
//! separates "the model is unsure" (diffuse row, moderate norm) from "the
//! model confidently disagrees with the data" (skewed row, norm near
//! sqrt(2)). The other scores here are the comparison quantities the
//! error norm is sandwiched between:
//!
//!   (1/2) l2  <=  (1/2) l1  =  TVD(p, OH(t))  =  1 - p_t  <=  sqrt(nll / 2)
//!
//! where the last step is Pinsker's inequality applied to
//! KL(OH(t) || p) = -ln p_t.

use crate::error::{invalid, Result};
use crate::math::ProbRow;
use crate::model::DistributionBatch;

/// Index of the ground-truth token. The one-hot vector is never
/// materialized; the index suffices for every score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TargetIndex(pub usize);

/// All quality scores for one evaluated token.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QualityScores {
    /// -ln p_t, capped (see [`token_nll`]).
    pub nll: f64,
    /// l1 norm of p - OH(t); equals 2 (1 - p_t). Range [0, 2].
    pub l1: f64,
    /// l2 norm of p - OH(t), the error norm. Range [0, sqrt(2)].
    pub l2: f64,
    /// Total variation distance to the point mass at t: 1 - p_t.
    pub tvd: f64,
    /// Renyi entropy of order 2: -ln ||p||_2.
    pub renyi2: f64,
}

fn check_index(p: &ProbRow, t: TargetIndex) -> Result<()> {
    if t.0 >= p.len() {
        return Err(invalid(format!(
            "target index {} out of range for vocabulary of size {}",
            t.0,
            p.len()
        )));
    }
    Ok(())
}

/// Error norm: `sqrt((1 - p_t)^2 + sum_{y != t} p_y^2)`, in [0, sqrt(2)].
pub fn error_l2_norm(p: &ProbRow, t: TargetIndex) -> Result<f64> {
    check_index(p, t)?;
    let mut sum = 0.0;
    for (y, &py) in p.values().iter().enumerate() {
        let d = if y == t.0 { py - 1.0 } else { py };
        sum += d * d;
    }
    Ok(sum.sqrt())
}

/// l1 error norm: `sum_y |p_y - OH(t)_y|`, which collapses to
/// `2 (1 - p_t)` because the off-target entries sum to `1 - p_t`.
pub fn error_l1_norm(p: &ProbRow, t: TargetIndex) -> Result<f64> {
    check_index(p, t)?;
    Ok(2.0 * (1.0 - p.values()[t.0]))
}

/// Total variation distance between `p` and the point mass at `t`:
/// `sup_y |p_y - OH(t)_y| = 1 - p_t`. The supremum is attained at `y = t`
/// since the off-target entries individually cannot exceed their sum
/// `1 - p_t`.
pub fn tvd_to_point_mass(p: &ProbRow, t: TargetIndex) -> Result<f64> {
    check_index(p, t)?;
    Ok(1.0 - p.values()[t.0])
}

/// Negative log-likelihood `-ln p_t`. If `p_t` underflowed to exactly 0
/// the result is capped at `-ln(f64::MIN_POSITIVE)` (~708.4) so that
/// rankings stay total without infinities.
pub fn token_nll(p: &ProbRow, t: TargetIndex) -> Result<f64> {
    check_index(p, t)?;
    let pt = p.values()[t.0];
    if pt == 0.0 {
        Ok(-f64::MIN_POSITIVE.ln())
    } else {
        Ok(-pt.ln())
    }
}

/// Renyi entropy of order 2: `-ln ||p||_2`. Zero for a one-hot row,
/// `ln(V) / 2` for the uniform row.
pub fn renyi2_entropy(p: &ProbRow) -> f64 {
    let sq_sum: f64 = p.values().iter().map(|v| v * v).sum();
    -0.5 * sq_sum.ln()
}

/// Highlight bucket for a token's error norm: 0 below `low`, 1 in
/// `[low, high)`, 2 at or above `high`.
pub fn highlight_level(norm: f64, low: f64, high: f64) -> u8 {
    if norm >= high {
        2
    } else if norm >= low {
        1
    } else {
        0
    }
}

/// All five scores for every row of a batch. Row count must equal target
/// count; each record agrees with the scalar operations above.
pub fn score_batch(dist: &DistributionBatch, targets: &[TargetIndex]) -> Result<Vec<QualityScores>> {
    if dist.rows.len() != targets.len() {
        return Err(invalid(format!(
            "distribution batch has {} rows but {} targets were given",
            dist.rows.len(),
            targets.len()
        )));
    }
    dist.rows
        .iter()
        .zip(targets)
        .map(|(p, &t)| {
            Ok(QualityScores {
                nll: token_nll(p, t)?,
                l1: error_l1_norm(p, t)?,
                l2: error_l2_norm(p, t)?,
                tvd: tvd_to_point_mass(p, t)?,
                renyi2: renyi2_entropy(p),
            })
        })
        .collect()
}
