//! Evaluation metrics and the clean/noisy separation analysis.

use serde::Serialize;

use crate::data::{Batch, ParallelCorpus};
use crate::error::{invalid, Result};
use crate::model::{forward, generate_greedy, ModelConfig, ModelParams};
use crate::quality::{self, TargetIndex};

/// Evaluation results on a named split.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub split: String,
    pub perplexity: f64,
    pub token_accuracy: f64,
    pub exact_match: f64,
    pub edit_similarity: f64,
}

/// Corpora are evaluated in fixed-size chunks to bound the activation
/// memory of a forward pass.
const EVAL_CHUNK: usize = 64;

fn eval_batches(corpus: &ParallelCorpus) -> Result<Vec<Batch>> {
    let indices: Vec<usize> = (0..corpus.len()).collect();
    indices
        .chunks(EVAL_CHUNK)
        .map(|chunk| Batch::from_indices(corpus, chunk))
        .collect()
}

/// `exp(mean token NLL)` over all non-padding target tokens (terminal EOS
/// included), under teacher forcing.
pub fn perplexity(params: &ModelParams, config: &ModelConfig, split: &ParallelCorpus) -> Result<f64> {
    if split.is_empty() {
        return Err(invalid("cannot compute perplexity of an empty split"));
    }
    let mut total_nll = 0.0;
    let mut count = 0usize;
    for batch in eval_batches(split)? {
        let (dist, _) = forward(params, config, &batch)?;
        for (row, &target) in dist.rows.iter().zip(&batch.targets()) {
            total_nll += quality::token_nll(row, TargetIndex(target as usize))?;
            count += 1;
        }
    }
    Ok((total_nll / count as f64).exp())
}

/// Classic Levenshtein distance.
fn levenshtein(a: &[u32], b: &[u32]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut current = vec![0usize; b.len() + 1];
    for (i, &x) in a.iter().enumerate() {
        current[0] = i + 1;
        for (j, &y) in b.iter().enumerate() {
            let substitute = prev[j] + usize::from(x != y);
            current[j + 1] = substitute.min(prev[j + 1] + 1).min(current[j] + 1);
        }
        std::mem::swap(&mut prev, &mut current);
    }
    prev[b.len()]
}

fn edit_similarity(decode: &[u32], reference: &[u32]) -> f64 {
    let max_len = decode.len().max(reference.len());
    if max_len == 0 {
        return 1.0;
    }
    1.0 - levenshtein(decode, reference) as f64 / max_len as f64
}

/// Sequence-level metrics plus perplexity on a split:
/// * `token_accuracy`: per-position argmax accuracy under teacher forcing;
/// * `exact_match`: fraction of greedy decodes equal to the reference;
/// * `edit_similarity`: mean of `1 - levenshtein / max(len)`.
pub fn sequence_metrics(
    params: &ModelParams,
    config: &ModelConfig,
    split: &ParallelCorpus,
    split_name: &str,
) -> Result<MetricsReport> {
    if split.is_empty() {
        return Err(invalid("cannot evaluate an empty split"));
    }
    let mut correct_tokens = 0usize;
    let mut total_tokens = 0usize;
    for batch in eval_batches(split)? {
        let (dist, _) = forward(params, config, &batch)?;
        for (row, &target) in dist.rows.iter().zip(&batch.targets()) {
            let mut best = 0usize;
            let mut best_p = row.values()[0];
            for (v, &p) in row.values().iter().enumerate().skip(1) {
                if p > best_p {
                    best = v;
                    best_p = p;
                }
            }
            if best == target as usize {
                correct_tokens += 1;
            }
            total_tokens += 1;
        }
    }

    let mut exact = 0usize;
    let mut edit_sum = 0.0;
    for example in &split.examples {
        let decode = generate_greedy(params, config, &example.src, example.tgt.len() + 4)?;
        if decode == example.tgt {
            exact += 1;
        }
        edit_sum += edit_similarity(&decode, &example.tgt);
    }

    Ok(MetricsReport {
        split: split_name.to_string(),
        perplexity: perplexity(params, config, split)?,
        token_accuracy: correct_tokens as f64 / total_tokens as f64,
        exact_match: exact as f64 / split.len() as f64,
        edit_similarity: edit_sum / split.len() as f64,
    })
}

/// Overlap of two normalized histograms over shared equal-width bins
/// spanning the combined min..max range: `sum_b min(h_a[b], h_b[b])`,
/// in [0, 1]. The last bin is right-inclusive.
pub fn histogram_overlap(scores_a: &[f64], scores_b: &[f64], bins: usize) -> Result<f64> {
    if scores_a.is_empty() || scores_b.is_empty() {
        return Err(invalid("histogram overlap needs two non-empty samples"));
    }
    if bins < 2 {
        return Err(invalid("histogram overlap needs at least 2 bins"));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &x in scores_a.iter().chain(scores_b) {
        lo = lo.min(x);
        hi = hi.max(x);
    }
    let width = hi - lo;
    let bin_of = |x: f64| -> usize {
        if width == 0.0 {
            0
        } else {
            (((x - lo) / width * bins as f64) as usize).min(bins - 1)
        }
    };
    let histogram = |scores: &[f64]| -> Vec<f64> {
        let mut h = vec![0.0; bins];
        for &x in scores {
            h[bin_of(x)] += 1.0;
        }
        let total = scores.len() as f64;
        for v in h.iter_mut() {
            *v /= total;
        }
        h
    };
    let ha = histogram(scores_a);
    let hb = histogram(scores_b);
    Ok(ha.iter().zip(&hb).map(|(a, b)| a.min(*b)).sum())
}

/// Probability that a uniformly random noisy score exceeds a uniformly
/// random clean score, ties counted one half (Mann-Whitney with average
/// ranks). Invariant under strictly increasing transforms of the scores.
pub fn auroc(noisy: &[f64], clean: &[f64]) -> Result<f64> {
    if noisy.is_empty() || clean.is_empty() {
        return Err(invalid("AUROC needs both a noisy and a clean sample"));
    }
    let mut combined: Vec<(f64, bool)> = noisy
        .iter()
        .map(|&s| (s, true))
        .chain(clean.iter().map(|&s| (s, false)))
        .collect();
    combined.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum_noisy = 0.0;
    let mut i = 0;
    while i < combined.len() {
        let mut j = i;
        while j < combined.len() && combined[j].0 == combined[i].0 {
            j += 1;
        }
        // 1-based average rank of the tie group [i, j).
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for item in &combined[i..j] {
            if item.1 {
                rank_sum_noisy += avg_rank;
            }
        }
        i = j;
    }
    let m = noisy.len() as f64;
    let n = clean.len() as f64;
    Ok((rank_sum_noisy - m * (m + 1.0) / 2.0) / (m * n))
}

/// Clean-versus-noisy separation of the per-token loss and error norm.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeparationReport {
    pub bins: usize,
    pub clean_tokens: usize,
    pub noisy_tokens: usize,
    pub overlap_loss: f64,
    pub overlap_error_norm: f64,
    pub auroc_loss: f64,
    pub auroc_error_norm: f64,
}

/// Per-token loss and error norm of every scored position under teacher
/// forcing, split by the corpus's ground-truth noise labels. The terminal
/// EOS of each example counts as clean.
pub fn separation_report(
    params: &ModelParams,
    config: &ModelConfig,
    corpus: &ParallelCorpus,
    bins: usize,
) -> Result<SeparationReport> {
    if corpus.is_empty() {
        return Err(invalid("cannot analyze an empty corpus"));
    }
    let mut clean_loss = Vec::new();
    let mut noisy_loss = Vec::new();
    let mut clean_norm = Vec::new();
    let mut noisy_norm = Vec::new();
    for batch in eval_batches(corpus)? {
        let (dist, _) = forward(params, config, &batch)?;
        let targets = batch.targets();
        for ((row, meta), &target) in dist.rows.iter().zip(&dist.meta).zip(&targets) {
            let t = TargetIndex(target as usize);
            let nll = quality::token_nll(row, t)?;
            let norm = quality::error_l2_norm(row, t)?;
            let example = &corpus.examples[meta.example];
            let noisy = example.noisy_tgt_positions.binary_search(&meta.position).is_ok();
            if noisy {
                noisy_loss.push(nll);
                noisy_norm.push(norm);
            } else {
                clean_loss.push(nll);
                clean_norm.push(norm);
            }
        }
    }
    if noisy_loss.is_empty() {
        return Err(invalid("corpus has no noisy-labeled tokens"));
    }
    if clean_loss.is_empty() {
        return Err(invalid("corpus has no clean-labeled tokens"));
    }
    Ok(SeparationReport {
        bins,
        clean_tokens: clean_loss.len(),
        noisy_tokens: noisy_loss.len(),
        overlap_loss: histogram_overlap(&clean_loss, &noisy_loss, bins)?,
        overlap_error_norm: histogram_overlap(&clean_norm, &noisy_norm, bins)?,
        auroc_loss: auroc(&noisy_loss, &clean_loss)?,
        auroc_error_norm: auroc(&noisy_norm, &clean_norm)?,
    })
}
