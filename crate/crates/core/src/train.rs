//! Training loop with warm-up gating, dynamics logging and deterministic
//! optimizers.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{make_batches, ParallelCorpus};
use crate::error::{invalid, Error, Result};
use crate::eval::{sequence_metrics, MetricsReport};
use crate::model::{backward, forward, init_params, ModelConfig, ModelParams};
use crate::objectives::{apply_objective, ObjectiveConfig};
use crate::quality::{self, TargetIndex};
use crate::rng::{SeededRng, Stream};

/// Uniform init half-width for the embeddings and input projection.
pub const DEFAULT_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerKind {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub objective: ObjectiveConfig,
    /// Evaluate on the held-out split every this many iterations.
    pub eval_every: usize,
    /// Stop after this many iterations even if epochs remain.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_iterations: Option<usize>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(invalid("epochs, batch_size and eval_every must be >= 1"));
        }
        if !self.learning_rate.is_finite() || self.learning_rate <= 0.0 {
            return Err(invalid("learning rate must be finite and > 0"));
        }
        self.objective.validate()
    }
}

/// Per-iteration training dynamics, recorded before the parameter update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicsRecord {
    pub iteration: usize,
    /// Mean error norm of the largest 10% of token norms in the batch
    /// (at least one token).
    pub mean_top10pct_error_norm: f64,
    pub truncated_fraction: f64,
    pub train_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub iteration: usize,
    pub report: MetricsReport,
}

/// Optimizer state. Adam moments are stored in parameter-shaped tensors.
#[derive(Debug, Clone, PartialEq)]
pub enum OptimizerState {
    Sgd,
    Adam {
        step: u64,
        m: ModelParams,
        v: ModelParams,
    },
}

pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    state: OptimizerState,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, config: &ModelConfig) -> Self {
        let state = match kind {
            OptimizerKind::Sgd => OptimizerState::Sgd,
            OptimizerKind::Adam { .. } => OptimizerState::Adam {
                step: 0,
                m: ModelParams::zeros(config),
                v: ModelParams::zeros(config),
            },
        };
        Optimizer {
            kind,
            learning_rate,
            state,
        }
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &ModelParams) {
        match (&self.kind, &mut self.state) {
            (OptimizerKind::Sgd, OptimizerState::Sgd) => {
                let lr = self.learning_rate;
                for (tensor, grad) in params.tensors_mut().into_iter().zip(grads.tensors()) {
                    for (p, &g) in tensor.iter_mut().zip(grad.iter()) {
                        *p -= lr * g;
                    }
                }
            }
            (OptimizerKind::Adam { beta1, beta2, eps }, OptimizerState::Adam { step, m, v }) => {
                *step += 1;
                let t = *step as f64;
                let bias1 = 1.0 - beta1.powf(t);
                let bias2 = 1.0 - beta2.powf(t);
                let lr = self.learning_rate;
                let param_tensors = params.tensors_mut();
                let grad_tensors = grads.tensors();
                let m_tensors = m.tensors_mut();
                let v_tensors = v.tensors_mut();
                for (((tensor, grad), m_t), v_t) in param_tensors
                    .into_iter()
                    .zip(grad_tensors)
                    .zip(m_tensors)
                    .zip(v_tensors)
                {
                    for (((p, &g), m_e), v_e) in
                        tensor.iter_mut().zip(grad.iter()).zip(m_t.iter_mut()).zip(v_t.iter_mut())
                    {
                        *m_e = beta1 * *m_e + (1.0 - beta1) * g;
                        *v_e = beta2 * *v_e + (1.0 - beta2) * g * g;
                        let m_hat = *m_e / bias1;
                        let v_hat = *v_e / bias2;
                        *p -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
            _ => unreachable!("optimizer kind/state mismatch"),
        }
    }
}

#[derive(Debug)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub dynamics: Vec<DynamicsRecord>,
    pub metrics: Vec<MetricsRecord>,
    pub optimizer_state: OptimizerState,
}

/// Full training run. Per iteration: forward, objective (gated by
/// `start_iteration`), backward, optimizer step; one [`DynamicsRecord`]
/// per iteration and a [`MetricsRecord`] on the eval split every
/// `eval_every` iterations plus one at the end. Deterministic under the
/// config seed. A non-finite loss aborts with [`Error::Divergence`].
pub fn train(
    corpus: &ParallelCorpus,
    eval_split: Option<&ParallelCorpus>,
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<TrainOutput> {
    model_config.validate()?;
    train_config.validate()?;
    if model_config.vocab_size != corpus.vocab.len() {
        return Err(invalid(format!(
            "model vocab_size {} does not match corpus vocabulary {}",
            model_config.vocab_size,
            corpus.vocab.len()
        )));
    }
    let root = SeededRng::new(train_config.seed);
    let mut init_rng = root.substream(Stream::Init);
    let mut shuffle_rng = root.substream(Stream::Shuffle);
    let mut params = init_params(model_config, &mut init_rng, DEFAULT_INIT_SCALE)?;
    let mut optimizer = Optimizer::new(train_config.optimizer, train_config.learning_rate, model_config);

    let mut dynamics = Vec::new();
    let mut metrics = Vec::new();
    let mut iteration = 0usize;
    let iteration_cap = train_config.max_iterations.unwrap_or(usize::MAX);

    'epochs: for _epoch in 0..train_config.epochs {
        for batch in make_batches(corpus, train_config.batch_size, &mut shuffle_rng)? {
            if iteration >= iteration_cap {
                break 'epochs;
            }
            let (dist, cache) = match forward(&params, model_config, &batch) {
                Ok(pair) => pair,
                Err(Error::Divergence { loss, .. }) => {
                    return Err(Error::Divergence { iteration, loss })
                }
                Err(other) => return Err(other),
            };
            let targets: Vec<TargetIndex> =
                batch.targets().iter().map(|&t| TargetIndex(t as usize)).collect();
            let bounds = batch.sentence_boundaries();
            let out = apply_objective(
                &dist,
                &targets,
                &bounds,
                &train_config.objective,
                iteration,
            )?;

            if !out.loss.is_finite() {
                return Err(Error::Divergence {
                    iteration,
                    loss: out.loss,
                });
            }

            let mut norms: Vec<f64> = dist
                .rows
                .iter()
                .zip(&targets)
                .map(|(p, &t)| quality::error_l2_norm(p, t))
                .collect::<Result<_>>()?;
            norms.sort_by(|a, b| b.total_cmp(a));
            let top = ((norms.len() as f64 * 0.1).floor() as usize).max(1);
            let mean_top: f64 = norms[..top].iter().sum::<f64>() / top as f64;
            dynamics.push(DynamicsRecord {
                iteration,
                mean_top10pct_error_norm: mean_top,
                truncated_fraction: out.mask.truncated_count() as f64 / targets.len() as f64,
                train_loss: out.loss,
            });

            let grads = backward(&params, model_config, &cache, &out.logit_gradient)?;
            optimizer.step(&mut params, &grads);

            iteration += 1;
            if let Some(split) = eval_split {
                if iteration % train_config.eval_every == 0 {
                    metrics.push(MetricsRecord {
                        iteration,
                        report: sequence_metrics(&params, model_config, split, "valid")?,
                    });
                }
            }
        }
    }

    if let Some(split) = eval_split {
        let already = metrics.last().map(|m| m.iteration) == Some(iteration);
        if !already {
            metrics.push(MetricsRecord {
                iteration,
                report: sequence_metrics(&params, model_config, split, "valid")?,
            });
        }
    }

    Ok(TrainOutput {
        params,
        dynamics,
        metrics,
        optimizer_state: optimizer.state,
    })
}

/// dynamics.csv: `iteration,mean_top10pct_error_norm,truncated_fraction,train_loss`.
pub fn write_dynamics_csv(path: &Path, records: &[DynamicsRecord]) -> Result<()> {
    let mut out = String::from("iteration,mean_top10pct_error_norm,truncated_fraction,train_loss\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.iteration, r.mean_top10pct_error_norm, r.truncated_fraction, r.train_loss
        ));
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

/// metrics.csv: `iteration,split,perplexity,token_accuracy,exact_match,edit_similarity`.
pub fn write_metrics_csv(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let mut out = String::from("iteration,split,perplexity,token_accuracy,exact_match,edit_similarity\n");
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iteration,
            r.report.split,
            r.report.perplexity,
            r.report.token_accuracy,
            r.report.exact_match,
            r.report.edit_similarity
        ));
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

const OPTIMIZER_TRAILER_MAGIC: &[u8; 4] = b"OPTS";

fn encode_optimizer_state(state: &OptimizerState) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(OPTIMIZER_TRAILER_MAGIC);
    match state {
        OptimizerState::Sgd => out.push(0),
        OptimizerState::Adam { step, m, v } => {
            out.push(1);
            out.extend_from_slice(&step.to_le_bytes());
            for tensors in [m.tensors(), v.tensors()] {
                for tensor in tensors {
                    for &x in tensor.iter() {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
    }
    out
}

fn decode_optimizer_state(bytes: &[u8], config: &ModelConfig) -> Result<OptimizerState> {
    let fail = |msg: &str| Error::Parse {
        line: 0,
        msg: msg.to_string(),
    };
    if bytes.len() < 5 || &bytes[..4] != OPTIMIZER_TRAILER_MAGIC {
        return Err(fail("bad optimizer-state trailer"));
    }
    match bytes[4] {
        0 => Ok(OptimizerState::Sgd),
        1 => {
            let mut cursor = 5;
            if bytes.len() < cursor + 8 {
                return Err(fail("optimizer trailer truncated"));
            }
            let step = u64::from_le_bytes(bytes[cursor..cursor + 8].try_into().unwrap());
            cursor += 8;
            let read_params = |cursor: &mut usize| -> Result<ModelParams> {
                let mut p = ModelParams::zeros(config);
                for tensor in p.tensors_mut() {
                    for x in tensor.iter_mut() {
                        if bytes.len() < *cursor + 8 {
                            return Err(Error::Parse {
                                line: 0,
                                msg: "optimizer trailer truncated".to_string(),
                            });
                        }
                        *x = f64::from_le_bytes(bytes[*cursor..*cursor + 8].try_into().unwrap());
                        *cursor += 8;
                    }
                }
                Ok(p)
            };
            let m = read_params(&mut cursor)?;
            let v = read_params(&mut cursor)?;
            Ok(OptimizerState::Adam { step, m, v })
        }
        tag => Err(fail(&format!("unknown optimizer tag {tag}"))),
    }
}

/// Model checkpoint followed by an optimizer-state trailer, so a run can
/// be resumed bit-exactly. Readers of the plain model format simply stop
/// after the tensors.
pub fn write_checkpoint_with_state(
    path: &Path,
    config: &ModelConfig,
    params: &ModelParams,
    state: &OptimizerState,
) -> Result<()> {
    let mut bytes = crate::model::encode_checkpoint(config, params);
    bytes.extend_from_slice(&encode_optimizer_state(state));
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_checkpoint_with_state(
    path: &Path,
) -> Result<(ModelConfig, ModelParams, Option<OptimizerState>)> {
    let bytes = std::fs::read(path)?;
    let (config, params, consumed) = crate::model::decode_checkpoint(&bytes)?;
    if consumed == bytes.len() {
        return Ok((config, params, None));
    }
    let state = decode_optimizer_state(&bytes[consumed..], &config)?;
    Ok((config, params, Some(state)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_cipher_corpus;
    use crate::objectives::Strategy;

    fn corpus(n: usize, seed: u64) -> ParallelCorpus {
        let mut rng = SeededRng::new(seed).substream(Stream::Generator);
        gen_cipher_corpus(6, n, (2, 5), &mut rng).unwrap()
    }

    fn model_config(v: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: v,
            embed_dim: 6,
            hidden_dim: 12,
            context_window: 2,
            use_source: true,
        }
    }

    fn train_config(seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 8,
            learning_rate: 0.1,
            optimizer: OptimizerKind::adam(),
            seed,
            objective: ObjectiveConfig::mle(),
            eval_every: 50,
            max_iterations: None,
        }
    }

    #[test]
    fn max_iterations_caps_the_run() {
        let c = corpus(40, 10);
        let mc = model_config(c.vocab.len());
        let mut tc = train_config(23);
        tc.epochs = 4;
        tc.max_iterations = Some(7);
        let out = train(&c, None, &mc, &tc).unwrap();
        assert_eq!(out.dynamics.len(), 7);
    }

    #[test]
    fn training_is_deterministic() {
        let c = corpus(40, 1);
        let mc = model_config(c.vocab.len());
        let tc = train_config(5);
        let a = train(&c, None, &mc, &tc).unwrap();
        let b = train(&c, None, &mc, &tc).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.dynamics, b.dynamics);
    }

    #[test]
    fn first_iteration_dynamics_exact() {
        let c = corpus(40, 2);
        let mc = model_config(c.vocab.len());
        let mut tc = train_config(7);
        tc.objective = ObjectiveConfig::with_strategy(Strategy::EntThreshold);
        tc.objective.threshold = 1.35;
        let out = train(&c, None, &mc, &tc).unwrap();
        let v = mc.vocab_size as f64;
        let first = out.dynamics[0];
        assert_eq!(first.iteration, 0);
        assert!((first.mean_top10pct_error_norm - (1.0 - 1.0 / v).sqrt()).abs() < 1e-12);
        assert_eq!(first.truncated_fraction, 0.0);
        assert!((first.train_loss - v.ln()).abs() < 1e-12);
    }

    #[test]
    fn gate_never_opening_matches_mle() {
        let c = corpus(30, 3);
        let mc = model_config(c.vocab.len());
        let mle = train(&c, None, &mc, &train_config(9)).unwrap();
        let mut tc = train_config(9);
        tc.objective = ObjectiveConfig::with_strategy(Strategy::EntThreshold);
        tc.objective.start_iteration = usize::MAX;
        let gated = train(&c, None, &mc, &tc).unwrap();
        assert_eq!(mle.params, gated.params);
    }

    #[test]
    fn learning_reduces_loss() {
        let c = corpus(60, 4);
        let mc = model_config(c.vocab.len());
        let mut tc = train_config(11);
        tc.epochs = 10;
        let out = train(&c, None, &mc, &tc).unwrap();
        let first = out.dynamics.first().unwrap().train_loss;
        let last = out.dynamics.last().unwrap().train_loss;
        assert!(last < first * 0.5, "loss {first} -> {last}");
    }

    #[test]
    fn divergence_reported() {
        let c = corpus(20, 5);
        let mc = model_config(c.vocab.len());
        let mut tc = train_config(13);
        tc.optimizer = OptimizerKind::Sgd;
        tc.learning_rate = 1e200;
        tc.epochs = 5;
        match train(&c, None, &mc, &tc) {
            Err(Error::Divergence { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn eval_records_emitted() {
        let c = corpus(40, 6);
        let valid = c.slice(30..40).unwrap();
        let train_part = c.slice(0..30).unwrap();
        let mc = model_config(c.vocab.len());
        let mut tc = train_config(15);
        tc.eval_every = 3;
        let out = train(&train_part, Some(&valid), &mc, &tc).unwrap();
        assert!(!out.metrics.is_empty());
        // Last record is at the final iteration.
        assert_eq!(out.metrics.last().unwrap().iteration, out.dynamics.len());
        for m in &out.metrics {
            assert_eq!(m.report.split, "valid");
            assert!(m.report.perplexity >= 1.0);
        }
    }

    #[test]
    fn sgd_and_adam_differ() {
        let c = corpus(30, 7);
        let mc = model_config(c.vocab.len());
        let mut tc = train_config(17);
        tc.optimizer = OptimizerKind::Sgd;
        let sgd = train(&c, None, &mc, &tc).unwrap();
        tc.optimizer = OptimizerKind::adam();
        let adam = train(&c, None, &mc, &tc).unwrap();
        assert_ne!(sgd.params, adam.params);
    }

    #[test]
    fn checkpoint_with_state_roundtrip() {
        let c = corpus(20, 8);
        let mc = model_config(c.vocab.len());
        let out = train(&c, None, &mc, &train_config(19)).unwrap();
        let dir = tempfile::tempdir().unwrap();

        let with_state = dir.path().join("with_state.ckpt");
        write_checkpoint_with_state(&with_state, &mc, &out.params, &out.optimizer_state).unwrap();
        let (mc2, params2, state2) = read_checkpoint_with_state(&with_state).unwrap();
        assert_eq!(mc, mc2);
        assert_eq!(out.params, params2);
        assert_eq!(Some(out.optimizer_state.clone()), state2);

        // A plain model reader ignores the trailer.
        let (mc3, params3) = crate::model::read_checkpoint(&with_state).unwrap();
        assert_eq!(mc, mc3);
        assert_eq!(out.params, params3);

        // A plain checkpoint reads back with no state.
        let plain = dir.path().join("plain.ckpt");
        crate::model::write_checkpoint(&plain, &mc, &out.params).unwrap();
        let (_, _, state) = read_checkpoint_with_state(&plain).unwrap();
        assert!(state.is_none());
    }

    #[test]
    fn csv_writers_deterministic() {
        let c = corpus(20, 9);
        let mc = model_config(c.vocab.len());
        let valid = c.slice(15..20).unwrap();
        let train_part = c.slice(0..15).unwrap();
        let out = train(&train_part, Some(&valid), &mc, &train_config(21)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let d1 = dir.path().join("d1.csv");
        let d2 = dir.path().join("d2.csv");
        write_dynamics_csv(&d1, &out.dynamics).unwrap();
        write_dynamics_csv(&d2, &out.dynamics).unwrap();
        assert_eq!(std::fs::read(&d1).unwrap(), std::fs::read(&d2).unwrap());
        let m1 = dir.path().join("m1.csv");
        write_metrics_csv(&m1, &out.metrics).unwrap();
        let text = std::fs::read_to_string(&m1).unwrap();
        assert!(text.starts_with("iteration,split,perplexity,token_accuracy,exact_match,edit_similarity\n"));
    }
}
