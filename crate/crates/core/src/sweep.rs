//! Experiment grids: noise-robustness sweeps and prune-retrain curves,
//! with one results.csv row per grid cell (mean over seeds).
//!
//! Cells are independent and run on a rayon pool; results are collected
//! in deterministic grid order, so reruns produce byte-identical CSVs.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::config::{NoiseMode, RunConfig};
use crate::data::{prune_corpus, read_corpus, ParallelCorpus, PruneMode};
use crate::error::{invalid, Error, Result};
use crate::eval::sequence_metrics;
use crate::model::{forward, ModelConfig, ModelParams};
use crate::noise::{inject, inject_append, NoiseKind, NoiseSpec};
use crate::objectives::Strategy;
use crate::quality::{self, TargetIndex};
use crate::train::train;

/// One row of results.csv.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub noise_kind: String,
    pub rate_or_fraction: f64,
    pub strategy: String,
    pub seed_count: usize,
    pub perplexity: f64,
    pub token_accuracy: f64,
    pub exact_match: f64,
    pub edit_similarity: f64,
}

#[derive(Debug, Clone)]
pub struct NoiseRobustnessSpec {
    pub kinds: Vec<NoiseKind>,
    pub rates: Vec<f64>,
    pub strategies: Vec<Strategy>,
    pub seeds: Vec<u64>,
    pub mode: NoiseMode,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PruneMetric {
    LossMean,
    ErrorNormMean,
    Random,
}

impl PruneMetric {
    pub fn name(&self) -> &'static str {
        match self {
            PruneMetric::LossMean => "loss-mean",
            PruneMetric::ErrorNormMean => "error-norm-mean",
            PruneMetric::Random => "random",
        }
    }
}

impl std::str::FromStr for PruneMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "loss-mean" => Ok(PruneMetric::LossMean),
            "error-norm-mean" => Ok(PruneMetric::ErrorNormMean),
            "random" => Ok(PruneMetric::Random),
            other => Err(invalid(format!("unknown prune metric {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PruneRetrainSpec {
    pub fractions: Vec<f64>,
    pub metrics: Vec<PruneMetric>,
    pub seeds: Vec<u64>,
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

fn load_split(config: &RunConfig) -> Result<(ParallelCorpus, ParallelCorpus)> {
    let train_corpus = read_corpus(&config.data.train)?;
    let valid_path = config
        .data
        .valid
        .as_ref()
        .ok_or_else(|| Error::Config("sweeps require a data.valid split".to_string()))?;
    let valid_corpus = read_corpus(valid_path)?;
    if train_corpus.vocab != valid_corpus.vocab {
        return Err(Error::Config(
            "train and valid corpora use different vocabularies".to_string(),
        ));
    }
    Ok((train_corpus, valid_corpus))
}

/// For each (noise kind, rate, strategy) cell: corrupt the clean training
/// corpus, train with the strategy, evaluate on the held-out split; the
/// row reports the mean over seeds. Each seed drives both the noise draw
/// and the training run.
pub fn run_noise_robustness(config: &RunConfig, spec: &NoiseRobustnessSpec) -> Result<Vec<SweepRow>> {
    if spec.kinds.is_empty() || spec.rates.is_empty() || spec.strategies.is_empty() || spec.seeds.is_empty()
    {
        return Err(invalid("noise-robustness sweep grid must not be empty"));
    }
    let (clean, valid) = load_split(config)?;
    let model_config = config.model_config(clean.vocab.len())?;

    let mut cells = Vec::new();
    for &kind in &spec.kinds {
        for &rate in &spec.rates {
            for &strategy in &spec.strategies {
                cells.push((kind, rate, strategy));
            }
        }
    }

    cells
        .par_iter()
        .map(|&(kind, rate, strategy)| {
            let mut accs = Vec::new();
            let mut ppls = Vec::new();
            let mut exacts = Vec::new();
            let mut edits = Vec::new();
            for &seed in &spec.seeds {
                let noise_spec = NoiseSpec { kind, rate, seed };
                let corpus = match spec.mode {
                    NoiseMode::Replace => inject(&clean, &noise_spec)?,
                    NoiseMode::Append => inject_append(&clean, &noise_spec)?,
                };
                let mut train_config = config.train_config();
                train_config.seed = seed;
                train_config.objective.strategy = strategy;
                let out = train(&corpus, None, &model_config, &train_config)?;
                let report = sequence_metrics(&out.params, &model_config, &valid, "valid")?;
                ppls.push(report.perplexity);
                accs.push(report.token_accuracy);
                exacts.push(report.exact_match);
                edits.push(report.edit_similarity);
            }
            Ok(SweepRow {
                noise_kind: kind.name().to_string(),
                rate_or_fraction: rate,
                strategy: strategy.name().to_string(),
                seed_count: spec.seeds.len(),
                perplexity: mean(&ppls),
                token_accuracy: mean(&accs),
                exact_match: mean(&exacts),
                edit_similarity: mean(&edits),
            })
        })
        .collect()
}

/// Mean per-example token NLL and error norm under teacher forcing; the
/// per-example sentence score for pruning.
pub fn score_examples(
    params: &ModelParams,
    config: &ModelConfig,
    corpus: &ParallelCorpus,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut loss_sum = vec![0.0; corpus.len()];
    let mut norm_sum = vec![0.0; corpus.len()];
    let mut counts = vec![0usize; corpus.len()];
    let indices: Vec<usize> = (0..corpus.len()).collect();
    for chunk in indices.chunks(64) {
        let batch = crate::data::Batch::from_indices(corpus, chunk)?;
        let (dist, _) = forward(params, config, &batch)?;
        let targets = batch.targets();
        for ((row, meta), &target) in dist.rows.iter().zip(&dist.meta).zip(&targets) {
            let t = TargetIndex(target as usize);
            loss_sum[meta.example] += quality::token_nll(row, t)?;
            norm_sum[meta.example] += quality::error_l2_norm(row, t)?;
            counts[meta.example] += 1;
        }
    }
    let loss_mean: Vec<f64> = loss_sum
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| s / c.max(1) as f64)
        .collect();
    let norm_mean: Vec<f64> = norm_sum
        .iter()
        .zip(&counts)
        .map(|(&s, &c)| s / c.max(1) as f64)
        .collect();
    Ok((loss_mean, norm_mean))
}

/// For each seed, train an MLE reference model on the (typically noisy)
/// training corpus and score every example; then for each (fraction,
/// metric) cell prune, retrain MLE from scratch and evaluate on the
/// held-out split. Rows carry `noise_kind = "prune"` and the prune metric
/// in the strategy column.
pub fn run_prune_retrain(config: &RunConfig, spec: &PruneRetrainSpec) -> Result<Vec<SweepRow>> {
    if spec.fractions.is_empty() || spec.metrics.is_empty() || spec.seeds.is_empty() {
        return Err(invalid("prune-retrain sweep grid must not be empty"));
    }
    let (train_corpus, valid) = load_split(config)?;
    let model_config = config.model_config(train_corpus.vocab.len())?;

    // Reference scores per seed, reused by every cell.
    let reference: Vec<(Vec<f64>, Vec<f64>)> = spec
        .seeds
        .par_iter()
        .map(|&seed| {
            let mut train_config = config.train_config();
            train_config.seed = seed;
            train_config.objective.strategy = Strategy::Mle;
            let out = train(&train_corpus, None, &model_config, &train_config)?;
            score_examples(&out.params, &model_config, &train_corpus)
        })
        .collect::<Result<_>>()?;

    let mut cells = Vec::new();
    for &fraction in &spec.fractions {
        for &metric in &spec.metrics {
            cells.push((fraction, metric));
        }
    }

    cells
        .par_iter()
        .map(|&(fraction, metric)| {
            let mut accs = Vec::new();
            let mut ppls = Vec::new();
            let mut exacts = Vec::new();
            let mut edits = Vec::new();
            for (seed_idx, &seed) in spec.seeds.iter().enumerate() {
                let (loss_mean, norm_mean) = &reference[seed_idx];
                let pruned = match metric {
                    PruneMetric::LossMean => {
                        prune_corpus(&train_corpus, loss_mean, fraction, PruneMode::Highest)?
                    }
                    PruneMetric::ErrorNormMean => {
                        prune_corpus(&train_corpus, norm_mean, fraction, PruneMode::Highest)?
                    }
                    PruneMetric::Random => prune_corpus(
                        &train_corpus,
                        loss_mean,
                        fraction,
                        PruneMode::Random { seed },
                    )?,
                };
                let mut train_config = config.train_config();
                train_config.seed = seed;
                train_config.objective.strategy = Strategy::Mle;
                let out = train(&pruned, None, &model_config, &train_config)?;
                let report = sequence_metrics(&out.params, &model_config, &valid, "valid")?;
                ppls.push(report.perplexity);
                accs.push(report.token_accuracy);
                exacts.push(report.exact_match);
                edits.push(report.edit_similarity);
            }
            Ok(SweepRow {
                noise_kind: "prune".to_string(),
                rate_or_fraction: fraction,
                strategy: metric.name().to_string(),
                seed_count: spec.seeds.len(),
                perplexity: mean(&ppls),
                token_accuracy: mean(&accs),
                exact_match: mean(&exacts),
                edit_similarity: mean(&edits),
            })
        })
        .collect()
}

/// results.csv with the fixed column order.
pub fn write_results_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut out = String::from(
        "noise_kind,rate_or_fraction,strategy,seed_count,perplexity,token_accuracy,exact_match,edit_similarity\n",
    );
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.noise_kind,
            r.rate_or_fraction,
            r.strategy,
            r.seed_count,
            r.perplexity,
            r.token_accuracy,
            r.exact_match,
            r.edit_similarity
        ));
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}
