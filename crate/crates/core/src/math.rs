//! Numerically stable probability primitives shared by every other module.
//!
//! All probability math is done in f64: the finite-difference gradient
//! checks elsewhere in the crate need at least 1e-4 relative accuracy and
//! f32 would not leave enough headroom.

use crate::error::{invalid, Result};

/// Unnormalized per-vocabulary scores for a single predicted position.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitRow {
    values: Vec<f64>,
}

impl LogitRow {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("logit row must not be empty"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(invalid("logit row contains a non-finite entry"));
        }
        Ok(LogitRow { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// A probability distribution over the vocabulary: non-negative entries
/// summing to 1 within 1e-9.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbRow {
    values: Vec<f64>,
}

impl ProbRow {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(invalid("probability row must not be empty"));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(invalid("probability row entries must be finite and >= 0"));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(invalid(format!("probability row sums to {sum}, not 1")));
        }
        Ok(ProbRow { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, index: usize) -> Option<f64> {
        self.values.get(index).copied()
    }
}

/// Max-shifted softmax: `exp(x_i - max) / sum_j exp(x_j - max)`.
/// Never overflows for finite input and sums to 1 within 1e-12 relative.
pub fn stable_softmax(logits: &LogitRow) -> ProbRow {
    let max = logits
        .values()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let mut values: Vec<f64> = logits.values().iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = values.iter().sum();
    for v in values.iter_mut() {
        *v /= sum;
    }
    // Construction guarantees the invariants; validation is skipped.
    ProbRow { values }
}

/// Log of [`stable_softmax`] without going through the probabilities:
/// `x_i - max - ln(sum_j exp(x_j - max))`. Avoids `ln(0)` for very
/// negative logits.
pub fn stable_log_softmax(logits: &LogitRow) -> Vec<f64> {
    let max = logits
        .values()
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    let log_sum: f64 = logits
        .values()
        .iter()
        .map(|x| (x - max).exp())
        .sum::<f64>()
        .ln();
    logits.values().iter().map(|x| x - max - log_sum).collect()
}

/// Element at zero-based index `floor(fraction * N)` of the descending
/// sort of `scores` (index clamped to `N - 1`). Ties are broken by a
/// stable sort on the original index, which makes the returned value
/// permutation-invariant.
pub fn select_desc_threshold(scores: &[f64], fraction: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(invalid("cannot select a threshold from an empty score list"));
    }
    if !(0.0..1.0).contains(&fraction) {
        return Err(invalid(format!("fraction must be in [0, 1), got {fraction}")));
    }
    let mut sorted = scores.to_vec();
    // sort_by is stable: equal scores keep their original relative order.
    sorted.sort_by(|a, b| b.total_cmp(a));
    let index = ((fraction * scores.len() as f64).floor() as usize).min(scores.len() - 1);
    Ok(sorted[index])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn logits(v: &[f64]) -> LogitRow {
        LogitRow::new(v.to_vec()).unwrap()
    }

    #[test]
    fn softmax_symmetry() {
        let p = stable_softmax(&logits(&[0.0, 0.0, 0.0, 0.0]));
        for v in p.values() {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_no_overflow() {
        let p = stable_softmax(&logits(&[1000.0, 0.0]));
        assert!(p.values().iter().all(|v| v.is_finite()));
        assert!((p.values()[0] - 1.0).abs() < 1e-12);
        assert!(p.values()[1] < 1e-12);
    }

    #[test]
    fn softmax_closed_form() {
        // [ln 2, 0] -> [2/3, 1/3]
        let p = stable_softmax(&logits(&[2.0f64.ln(), 0.0]));
        assert!((p.values()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((p.values()[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_sums_to_one_relative() {
        let mut rng = SeededRng::new(11);
        for _ in 0..200 {
            let v: Vec<f64> = (0..8).map(|_| rng.gen_range_f64(-50.0, 50.0)).collect();
            let p = stable_softmax(&logits(&v));
            let sum: f64 = p.values().iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_matches_softmax() {
        let mut rng = SeededRng::new(13);
        for _ in 0..200 {
            let v: Vec<f64> = (0..6).map(|_| rng.gen_range_f64(-50.0, 50.0)).collect();
            let row = logits(&v);
            let p = stable_softmax(&row);
            let lp = stable_log_softmax(&row);
            for (pi, li) in p.values().iter().zip(&lp) {
                assert!((li.exp() - pi).abs() < 1e-9);
            }
            // logsumexp of the output must be 0.
            let lse: f64 = lp.iter().map(|x| x.exp()).sum::<f64>().ln();
            assert!(lse.abs() < 1e-10);
        }
    }

    #[test]
    fn log_softmax_closed_forms() {
        let lp = stable_log_softmax(&logits(&[0.0, 0.0]));
        assert!((lp[0] + 2.0f64.ln()).abs() < 1e-15);
        assert!((lp[1] + 2.0f64.ln()).abs() < 1e-15);

        let lp = stable_log_softmax(&logits(&[3.0f64.ln(), 0.0]));
        assert!((lp[0] - (3.0f64 / 4.0).ln()).abs() < 1e-12);
        assert!((lp[1] - (1.0f64 / 4.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn log_softmax_no_neg_inf() {
        let lp = stable_log_softmax(&logits(&[-1000.0, 0.0]));
        assert!(lp[0].is_finite());
        assert!((lp[0] + 1000.0).abs() < 1e-9);
    }

    #[test]
    fn non_finite_logits_rejected() {
        assert!(LogitRow::new(vec![f64::NAN, 0.0]).is_err());
        assert!(LogitRow::new(vec![f64::INFINITY]).is_err());
        assert!(LogitRow::new(vec![]).is_err());
    }

    #[test]
    fn threshold_basic() {
        let t = select_desc_threshold(&[1.41, 1.2, 0.9, 0.5], 0.25).unwrap();
        assert_eq!(t, 1.2);
        // Any input order gives the same answer.
        let t = select_desc_threshold(&[0.5, 0.9, 1.2, 1.41], 0.25).unwrap();
        assert_eq!(t, 1.2);
    }

    #[test]
    fn threshold_fraction_zero_is_max() {
        let t = select_desc_threshold(&[3.0, 9.0, 1.0], 0.0).unwrap();
        assert_eq!(t, 9.0);
    }

    #[test]
    fn threshold_all_equal() {
        let t = select_desc_threshold(&[5.0, 5.0, 5.0], 0.5).unwrap();
        assert_eq!(t, 5.0);
    }

    #[test]
    fn threshold_index_clamped() {
        // fraction close to 1 on a short list: floor(0.99 * 2) = 1 = N - 1.
        let t = select_desc_threshold(&[2.0, 7.0], 0.99).unwrap();
        assert_eq!(t, 2.0);
    }

    #[test]
    fn threshold_errors() {
        assert!(select_desc_threshold(&[], 0.1).is_err());
        assert!(select_desc_threshold(&[1.0], 1.0).is_err());
        assert!(select_desc_threshold(&[1.0], -0.1).is_err());
    }

    #[test]
    fn threshold_permutation_invariant() {
        let mut rng = SeededRng::new(17);
        for _ in 0..100 {
            let n = 1 + rng.gen_index(12);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen_f64()).collect();
            let fraction = rng.gen_f64() * 0.999;
            let expected = select_desc_threshold(&scores, fraction).unwrap();
            let mut shuffled = scores.clone();
            rng.shuffle(&mut shuffled);
            assert_eq!(select_desc_threshold(&shuffled, fraction).unwrap(), expected);
        }
    }
}
