//! A tiny conditional autoregressive next-token model with exact manual
//! gradients.
//!
//! The predictor is a context-window MLP: for target position `t` the
//! feature vector concatenates the embeddings of the `k` previous target
//! tokens (BOS-padded), the embedding of the source token aligned at `t`
//! (BOS when out of range or in pure-LM mode) and the mean of all source
//! token embeddings. One tanh hidden layer feeds a softmax over the
//! vocabulary. The output projection starts at exactly zero, so the
//! initial predictive rows are exactly uniform and the initial error norm
//! is exactly `sqrt(1 - 1/V)`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, BOS};
use crate::error::{invalid, Error, Result};
use crate::math::{stable_softmax, LogitRow, ProbRow};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Number of previous target tokens fed to the predictor.
    pub context_window: usize,
    /// Conditional model when true, pure language model when false.
    pub use_source: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 5 {
            return Err(invalid("vocab_size must cover the reserved tokens plus data"));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.context_window == 0 {
            return Err(invalid("embed_dim, hidden_dim and context_window must be >= 1"));
        }
        Ok(())
    }

    /// Length of the concatenated feature vector: `(k + 2) * embed_dim`.
    pub fn feature_dim(&self) -> usize {
        (self.context_window + 2) * self.embed_dim
    }
}

/// Row-major dense matrix of f64.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    #[inline]
    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn at_mut(&mut self, r: usize, c: usize) -> &mut f64 {
        &mut self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }
}

/// All trainable tensors. The struct doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    /// V x E token embedding table.
    pub embedding: Matrix,
    /// feature_dim x H input projection.
    pub w1: Matrix,
    pub b1: Vec<f64>,
    /// H x V output projection.
    pub w2: Matrix,
    pub b2: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(config: &ModelConfig) -> Self {
        ModelParams {
            embedding: Matrix::zeros(config.vocab_size, config.embed_dim),
            w1: Matrix::zeros(config.feature_dim(), config.hidden_dim),
            b1: vec![0.0; config.hidden_dim],
            w2: Matrix::zeros(config.hidden_dim, config.vocab_size),
            b2: vec![0.0; config.vocab_size],
        }
    }

    /// Tensors in declaration order (the checkpoint order).
    pub fn tensors(&self) -> [&Vec<f64>; 5] {
        [
            &self.embedding.data,
            &self.w1.data,
            &self.b1,
            &self.w2.data,
            &self.b2,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; 5] {
        [
            &mut self.embedding.data,
            &mut self.w1.data,
            &mut self.b1,
            &mut self.w2.data,
            &mut self.b2,
        ]
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Position metadata for one predicted row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMeta {
    /// Corpus-level example index.
    pub example: usize,
    /// Target position; the terminal EOS sits at `tgt.len()`.
    pub position: usize,
}

/// Predicted probability rows for every scored slot of a batch,
/// example-major, with their positions.
#[derive(Debug, Clone, PartialEq)]
pub struct DistributionBatch {
    pub rows: Vec<ProbRow>,
    pub meta: Vec<TokenMeta>,
}

/// Cached activations for one scored slot, enough to run the backward
/// pass without recomputation.
#[derive(Debug, Clone)]
struct SlotCache {
    batch_row: usize,
    /// The k context token ids, most recent first.
    context: Vec<u32>,
    aligned: u32,
    feature: Vec<f64>,
    hidden: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    slots: Vec<SlotCache>,
    srcs: Vec<Vec<u32>>,
    vocab_size: usize,
}

impl ForwardCache {
    pub fn slot_count(&self) -> usize {
        self.slots.len()
    }
}

/// Embeddings and input projection drawn uniform from (-scale, scale);
/// output projection and bias exactly zero, which makes every initial
/// row exactly uniform.
pub fn init_params(config: &ModelConfig, rng: &mut SeededRng, scale: f64) -> Result<ModelParams> {
    config.validate()?;
    if scale < 0.0 {
        return Err(invalid("init scale must be >= 0"));
    }
    let mut params = ModelParams::zeros(config);
    for v in params.embedding.data.iter_mut() {
        *v = rng.gen_range_f64(-scale, scale);
    }
    for v in params.w1.data.iter_mut() {
        *v = rng.gen_range_f64(-scale, scale);
    }
    for v in params.b1.iter_mut() {
        *v = rng.gen_range_f64(-scale, scale);
    }
    // w2 and b2 stay zero.
    Ok(params)
}

fn check_token(id: u32, vocab_size: usize) -> Result<()> {
    if id as usize >= vocab_size {
        return Err(invalid(format!(
            "token id {id} out of range for vocabulary of {vocab_size}"
        )));
    }
    Ok(())
}

/// Feature vector for one slot: k context embeddings (most recent first),
/// the aligned source embedding, the mean source embedding.
fn build_feature(
    params: &ModelParams,
    config: &ModelConfig,
    context: &[u32],
    aligned: u32,
    src: &[u32],
) -> Vec<f64> {
    let e = config.embed_dim;
    let mut feature = Vec::with_capacity(config.feature_dim());
    for &id in context {
        feature.extend_from_slice(params.embedding.row(id as usize));
    }
    feature.extend_from_slice(params.embedding.row(aligned as usize));
    if config.use_source && !src.is_empty() {
        let inv = 1.0 / src.len() as f64;
        let base = feature.len();
        feature.resize(base + e, 0.0);
        for &id in src {
            let row = params.embedding.row(id as usize);
            for (slot, &val) in feature[base..].iter_mut().zip(row) {
                *slot += val * inv;
            }
        }
    } else {
        feature.extend_from_slice(params.embedding.row(BOS as usize));
    }
    feature
}

fn slot_forward(
    params: &ModelParams,
    config: &ModelConfig,
    feature: &[f64],
) -> Result<(Vec<f64>, ProbRow)> {
    let h = config.hidden_dim;
    let v = config.vocab_size;
    let mut hidden = params.b1.clone();
    for (f_idx, &f_val) in feature.iter().enumerate() {
        if f_val == 0.0 {
            continue;
        }
        let row = params.w1.row(f_idx);
        for (h_idx, &w) in row.iter().enumerate() {
            hidden[h_idx] += f_val * w;
        }
    }
    for x in hidden.iter_mut() {
        *x = x.tanh();
    }
    let mut logits = params.b2.clone();
    for h_idx in 0..h {
        let act = hidden[h_idx];
        if act == 0.0 {
            continue;
        }
        let row = params.w2.row(h_idx);
        for (v_idx, &w) in row.iter().enumerate() {
            logits[v_idx] += act * w;
        }
    }
    debug_assert_eq!(logits.len(), v);
    // Parameters that blew up overflow here first; surface that as
    // numeric divergence rather than a precondition failure.
    let logits = LogitRow::new(logits).map_err(|_| Error::Divergence {
        iteration: 0,
        loss: f64::NAN,
    })?;
    Ok((hidden, stable_softmax(&logits)))
}

/// The k previous target ids for position `t`, most recent first,
/// BOS-padded past the sequence start.
fn context_ids(prefix: &[u32], t: usize, k: usize) -> Vec<u32> {
    (0..k)
        .map(|j| if t > j { prefix[t - 1 - j] } else { BOS })
        .collect()
}

fn aligned_source(config: &ModelConfig, src: &[u32], t: usize) -> u32 {
    if config.use_source && t < src.len() {
        src[t]
    } else {
        BOS
    }
}

/// Teacher-forced forward pass over every scored slot of the batch.
pub fn forward(
    params: &ModelParams,
    config: &ModelConfig,
    batch: &Batch,
) -> Result<(DistributionBatch, ForwardCache)> {
    config.validate()?;
    let mut rows = Vec::new();
    let mut meta = Vec::new();
    let mut slots = Vec::new();
    for b in 0..batch.rows() {
        let src = &batch.src[b];
        let tgt = &batch.tgt_padded[b];
        for &id in src.iter().chain(tgt.iter()) {
            check_token(id, config.vocab_size)?;
        }
        for (t, &on) in batch.scored[b].iter().enumerate() {
            if !on {
                continue;
            }
            let context = context_ids(tgt, t, config.context_window);
            let aligned = aligned_source(config, src, t);
            let feature = build_feature(params, config, &context, aligned, src);
            let (hidden, row) = slot_forward(params, config, &feature)?;
            rows.push(row);
            meta.push(TokenMeta {
                example: batch.example_indices[b],
                position: t,
            });
            slots.push(SlotCache {
                batch_row: b,
                context,
                aligned,
                feature,
                hidden,
            });
        }
    }
    Ok((
        DistributionBatch { rows, meta },
        ForwardCache {
            slots,
            srcs: batch.src.clone(),
            vocab_size: config.vocab_size,
        },
    ))
}

/// Exact gradients of the loss with respect to every parameter, given the
/// per-slot logit gradients produced by the objective.
pub fn backward(
    params: &ModelParams,
    config: &ModelConfig,
    cache: &ForwardCache,
    logit_gradient: &[Vec<f64>],
) -> Result<ModelParams> {
    if logit_gradient.len() != cache.slots.len() {
        return Err(invalid(format!(
            "got {} gradient rows for {} cached slots",
            logit_gradient.len(),
            cache.slots.len()
        )));
    }
    let e = config.embed_dim;
    let h = config.hidden_dim;
    let k = config.context_window;
    let mut grad = ModelParams::zeros(config);

    for (slot, gl) in cache.slots.iter().zip(logit_gradient) {
        if gl.len() != cache.vocab_size {
            return Err(invalid("logit gradient row has wrong vocabulary length"));
        }
        if gl.iter().all(|&g| g == 0.0) {
            continue;
        }
        // Output layer.
        for (v_idx, &g) in gl.iter().enumerate() {
            grad.b2[v_idx] += g;
        }
        let mut d_hidden = vec![0.0; h];
        for h_idx in 0..h {
            let act = slot.hidden[h_idx];
            let w2_row = params.w2.row(h_idx);
            let g_row = &mut grad.w2.data[h_idx * cache.vocab_size..(h_idx + 1) * cache.vocab_size];
            let mut acc = 0.0;
            for (v_idx, &g) in gl.iter().enumerate() {
                g_row[v_idx] += act * g;
                acc += w2_row[v_idx] * g;
            }
            d_hidden[h_idx] = acc;
        }
        // Through tanh.
        let mut d_pre = d_hidden;
        for (h_idx, d) in d_pre.iter_mut().enumerate() {
            let act = slot.hidden[h_idx];
            *d *= 1.0 - act * act;
        }
        // Input projection and feature gradient.
        let mut d_feature = vec![0.0; slot.feature.len()];
        for (f_idx, &f_val) in slot.feature.iter().enumerate() {
            let w1_row = params.w1.row(f_idx);
            let g_row = &mut grad.w1.data[f_idx * h..(f_idx + 1) * h];
            let mut acc = 0.0;
            for (h_idx, &d) in d_pre.iter().enumerate() {
                g_row[h_idx] += f_val * d;
                acc += w1_row[h_idx] * d;
            }
            d_feature[f_idx] = acc;
        }
        for (h_idx, &d) in d_pre.iter().enumerate() {
            grad.b1[h_idx] += d;
        }
        // Scatter into the embedding table: context slots, aligned slot,
        // then the mean slot spread over all source tokens.
        for (j, &id) in slot.context.iter().enumerate() {
            let g_row = &mut grad.embedding.data[id as usize * e..(id as usize + 1) * e];
            for (g_slot, &d) in g_row.iter_mut().zip(&d_feature[j * e..(j + 1) * e]) {
                *g_slot += d;
            }
        }
        let aligned_range = k * e..(k + 1) * e;
        let g_row =
            &mut grad.embedding.data[slot.aligned as usize * e..(slot.aligned as usize + 1) * e];
        for (g_slot, &d) in g_row.iter_mut().zip(&d_feature[aligned_range]) {
            *g_slot += d;
        }
        let mean_range = (k + 1) * e..(k + 2) * e;
        let src = &cache.srcs[slot.batch_row];
        if config.use_source && !src.is_empty() {
            let inv = 1.0 / src.len() as f64;
            for &id in src {
                let g_row = &mut grad.embedding.data[id as usize * e..(id as usize + 1) * e];
                for (g_slot, &d) in g_row.iter_mut().zip(&d_feature[mean_range.clone()]) {
                    *g_slot += d * inv;
                }
            }
        } else {
            let g_row =
                &mut grad.embedding.data[BOS as usize * e..(BOS as usize + 1) * e];
            for (g_slot, &d) in g_row.iter_mut().zip(&d_feature[mean_range]) {
                *g_slot += d;
            }
        }
    }
    Ok(grad)
}

/// Greedy argmax decoding until EOS or `max_len` tokens. Ties go to the
/// lowest token id. The returned sequence excludes the EOS.
pub fn generate_greedy(
    params: &ModelParams,
    config: &ModelConfig,
    src: &[u32],
    max_len: usize,
) -> Result<Vec<u32>> {
    if max_len == 0 {
        return Err(invalid("max_len must be >= 1"));
    }
    for &id in src {
        check_token(id, config.vocab_size)?;
    }
    let mut out: Vec<u32> = Vec::new();
    for t in 0..max_len {
        let context = context_ids(&out, t, config.context_window);
        let aligned = aligned_source(config, src, t);
        let feature = build_feature(params, config, &context, aligned, src);
        let (_, row) = slot_forward(params, config, &feature)?;
        let mut best = 0usize;
        let mut best_p = row.values()[0];
        for (v_idx, &p) in row.values().iter().enumerate().skip(1) {
            if p > best_p {
                best = v_idx;
                best_p = p;
            }
        }
        if best as u32 == crate::data::EOS {
            break;
        }
        out.push(best as u32);
    }
    Ok(out)
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"ENTCKPT\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Binary checkpoint layout (all integers and floats little-endian):
/// magic (8 bytes), version (u32), then the ModelConfig ints
/// vocab_size/embed_dim/hidden_dim/context_window/use_source as u32,
/// then the parameter tensors in declaration order as f64.
pub fn encode_checkpoint(config: &ModelConfig, params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for value in [
        config.vocab_size as u32,
        config.embed_dim as u32,
        config.hidden_dim as u32,
        config.context_window as u32,
        u32::from(config.use_source),
    ] {
        out.extend_from_slice(&value.to_le_bytes());
    }
    for tensor in params.tensors() {
        for &v in tensor.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Inverse of [`encode_checkpoint`]. Returns the number of bytes consumed
/// so callers can detect (and own) any trailing section.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ModelParams, usize)> {
    let fail = |msg: &str| Error::Parse {
        line: 0,
        msg: msg.to_string(),
    };
    if bytes.len() < 8 + 4 + 5 * 4 {
        return Err(fail("checkpoint too short"));
    }
    if &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(fail("bad checkpoint magic"));
    }
    let mut cursor = 8;
    let read_u32 = |cursor: &mut usize| -> u32 {
        let v = u32::from_le_bytes(bytes[*cursor..*cursor + 4].try_into().unwrap());
        *cursor += 4;
        v
    };
    let version = read_u32(&mut cursor);
    if version != CHECKPOINT_VERSION {
        return Err(fail(&format!("unsupported checkpoint version {version}")));
    }
    let config = ModelConfig {
        vocab_size: read_u32(&mut cursor) as usize,
        embed_dim: read_u32(&mut cursor) as usize,
        hidden_dim: read_u32(&mut cursor) as usize,
        context_window: read_u32(&mut cursor) as usize,
        use_source: read_u32(&mut cursor) != 0,
    };
    config.validate()?;
    let mut params = ModelParams::zeros(&config);
    for tensor in params.tensors_mut() {
        let needed = tensor.len() * 8;
        if bytes.len() < cursor + needed {
            return Err(Error::Parse {
                line: 0,
                msg: "checkpoint truncated inside a tensor".to_string(),
            });
        }
        for v in tensor.iter_mut() {
            *v = f64::from_le_bytes(bytes[cursor..cursor + 8].try_into().unwrap());
            cursor += 8;
        }
    }
    Ok((config, params, cursor))
}

pub fn write_checkpoint(path: &Path, config: &ModelConfig, params: &ModelParams) -> Result<()> {
    std::fs::write(path, encode_checkpoint(config, params))?;
    Ok(())
}

/// Reads config and parameters; trailing bytes (e.g. an optimizer-state
/// section) are ignored here.
pub fn read_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let bytes = std::fs::read(path)?;
    let (config, params, _) = decode_checkpoint(&bytes)?;
    Ok((config, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_cipher_corpus, Batch};
    use crate::objectives::{apply_objective, ObjectiveConfig};
    use crate::quality::TargetIndex;
    use crate::rng::{SeededRng, Stream};

    fn tiny_config(v: usize) -> ModelConfig {
        ModelConfig {
            vocab_size: v,
            embed_dim: 3,
            hidden_dim: 4,
            context_window: 2,
            use_source: true,
        }
    }

    fn random_params(config: &ModelConfig, seed: u64) -> ModelParams {
        let mut rng = SeededRng::new(seed).substream(Stream::Init);
        let mut params = init_params(config, &mut rng, 0.5).unwrap();
        // The FD tests need a non-zero output layer too.
        for v in params.w2.data.iter_mut() {
            *v = rng.gen_range_f64(-0.5, 0.5);
        }
        for v in params.b2.iter_mut() {
            *v = rng.gen_range_f64(-0.5, 0.5);
        }
        params
    }

    fn small_batch(seed: u64) -> (crate::data::ParallelCorpus, Batch) {
        let mut rng = SeededRng::new(seed).substream(Stream::Generator);
        let corpus = gen_cipher_corpus(4, 3, (2, 4), &mut rng).unwrap();
        let batch = Batch::from_indices(&corpus, &[0, 1, 2]).unwrap();
        (corpus, batch)
    }

    #[test]
    fn zero_init_rows_are_uniform() {
        let (corpus, batch) = small_batch(5);
        let config = tiny_config(corpus.vocab.len());
        let mut rng = SeededRng::new(1).substream(Stream::Init);
        let params = init_params(&config, &mut rng, 0.2).unwrap();
        let (dist, _) = forward(&params, &config, &batch).unwrap();
        let v = config.vocab_size as f64;
        for row in &dist.rows {
            for &p in row.values() {
                assert!((p - 1.0 / v).abs() < 1e-15);
            }
        }
        // Error norm of every row is exactly sqrt(1 - 1/V) up to rounding.
        let norm = crate::quality::error_l2_norm(&dist.rows[0], TargetIndex(0)).unwrap();
        assert!((norm - (1.0 - 1.0 / v).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn init_scale_zero_all_zero() {
        let config = tiny_config(8);
        let mut rng = SeededRng::new(2).substream(Stream::Init);
        let params = init_params(&config, &mut rng, 0.0).unwrap();
        for t in params.tensors() {
            assert!(t.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn init_deterministic() {
        let config = tiny_config(8);
        let mut a = SeededRng::new(3).substream(Stream::Init);
        let mut b = SeededRng::new(3).substream(Stream::Init);
        assert_eq!(
            init_params(&config, &mut a, 0.1).unwrap(),
            init_params(&config, &mut b, 0.1).unwrap()
        );
    }

    #[test]
    fn forward_deterministic_and_blockwise() {
        let (corpus, _) = small_batch(7);
        let config = tiny_config(corpus.vocab.len());
        let params = random_params(&config, 11);
        // A batch of the same example twice gives identical row blocks.
        let batch = Batch::from_indices(&corpus, &[0, 0]).unwrap();
        let (dist, _) = forward(&params, &config, &batch).unwrap();
        let per_example = dist.rows.len() / 2;
        for i in 0..per_example {
            assert_eq!(dist.rows[i], dist.rows[per_example + i]);
        }
        let (dist2, _) = forward(&params, &config, &batch).unwrap();
        assert_eq!(dist.rows, dist2.rows);
    }

    #[test]
    fn forward_rejects_out_of_range_ids() {
        let (corpus, batch) = small_batch(9);
        let mut config = tiny_config(corpus.vocab.len());
        config.vocab_size = 5; // smaller than the corpus alphabet
        let params = ModelParams::zeros(&config);
        assert!(forward(&params, &config, &batch).is_err());
    }

    #[test]
    fn backward_zero_gradient_is_zero() {
        let (corpus, batch) = small_batch(13);
        let config = tiny_config(corpus.vocab.len());
        let params = random_params(&config, 17);
        let (dist, cache) = forward(&params, &config, &batch).unwrap();
        let zeros = vec![vec![0.0; config.vocab_size]; dist.rows.len()];
        let grad = backward(&params, &config, &cache, &zeros).unwrap();
        for t in grad.tensors() {
            assert!(t.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn backward_is_linear_in_logit_gradient() {
        let (corpus, batch) = small_batch(19);
        let config = tiny_config(corpus.vocab.len());
        let params = random_params(&config, 23);
        let (dist, cache) = forward(&params, &config, &batch).unwrap();
        let targets: Vec<TargetIndex> =
            batch.targets().iter().map(|&t| TargetIndex(t as usize)).collect();
        let out = apply_objective(
            &dist,
            &targets,
            &batch.sentence_boundaries(),
            &ObjectiveConfig::mle(),
            0,
        )
        .unwrap();
        let grad = backward(&params, &config, &cache, &out.logit_gradient).unwrap();
        let doubled: Vec<Vec<f64>> = out
            .logit_gradient
            .iter()
            .map(|row| row.iter().map(|&g| 2.0 * g).collect())
            .collect();
        let grad2 = backward(&params, &config, &cache, &doubled).unwrap();
        for (a, b) in grad.tensors().iter().zip(grad2.tensors().iter()) {
            for (&x, &y) in a.iter().zip(b.iter()) {
                assert!((y - 2.0 * x).abs() < 1e-12);
            }
        }
    }

    /// Central finite differences over every parameter. This is the single
    /// most important test in the module.
    #[test]
    fn backward_matches_finite_differences() {
        let (corpus, batch) = small_batch(29);
        let config = tiny_config(corpus.vocab.len());
        let params = random_params(&config, 31);
        let targets: Vec<TargetIndex> =
            batch.targets().iter().map(|&t| TargetIndex(t as usize)).collect();
        let bounds = batch.sentence_boundaries();
        let cfg = ObjectiveConfig::mle();

        let loss_of = |p: &ModelParams| -> f64 {
            let (dist, _) = forward(p, &config, &batch).unwrap();
            apply_objective(&dist, &targets, &bounds, &cfg, 0).unwrap().loss
        };

        let (dist, cache) = forward(&params, &config, &batch).unwrap();
        let out = apply_objective(&dist, &targets, &bounds, &cfg, 0).unwrap();
        let analytic = backward(&params, &config, &cache, &out.logit_gradient).unwrap();

        let step = 1e-5;
        let mut checked = 0usize;
        for tensor_idx in 0..5 {
            let len = analytic.tensors()[tensor_idx].len();
            for elem in 0..len {
                let mut plus = params.clone();
                plus.tensors_mut()[tensor_idx][elem] += step;
                let mut minus = params.clone();
                minus.tensors_mut()[tensor_idx][elem] -= step;
                let numeric = (loss_of(&plus) - loss_of(&minus)) / (2.0 * step);
                let a = analytic.tensors()[tensor_idx][elem];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                assert!(
                    (a - numeric).abs() / denom < 1e-4,
                    "tensor {tensor_idx} elem {elem}: analytic {a} vs numeric {numeric}"
                );
                checked += 1;
            }
        }
        assert!(checked > 50);
    }

    #[test]
    fn generate_zero_init_emits_lowest_id() {
        let config = tiny_config(8);
        let params = ModelParams::zeros(&config);
        let out = generate_greedy(&params, &config, &[4, 5], 3).unwrap();
        // Uniform rows: tie rule picks id 0 (PAD), never EOS.
        assert_eq!(out, vec![0, 0, 0]);
    }

    #[test]
    fn generate_respects_max_len() {
        let config = tiny_config(8);
        let params = ModelParams::zeros(&config);
        let out = generate_greedy(&params, &config, &[4], 1).unwrap();
        assert_eq!(out.len(), 1);
        assert!(generate_greedy(&params, &config, &[4], 0).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let config = tiny_config(9);
        let params = random_params(&config, 37);
        let bytes = encode_checkpoint(&config, &params);
        let (config2, params2, consumed) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(config, config2);
        assert_eq!(params, params2);
        assert_eq!(consumed, bytes.len());

        // Trailing bytes are tolerated and reported via `consumed`.
        let mut with_trailer = bytes.clone();
        with_trailer.extend_from_slice(b"TRAILER");
        let (_, _, consumed2) = decode_checkpoint(&with_trailer).unwrap();
        assert_eq!(consumed2, bytes.len());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        write_checkpoint(&path, &config, &params).unwrap();
        let (config3, params3) = read_checkpoint(&path).unwrap();
        assert_eq!(config, config3);
        assert_eq!(params, params3);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        assert!(decode_checkpoint(b"short").is_err());
        let mut bytes = encode_checkpoint(&tiny_config(8), &ModelParams::zeros(&tiny_config(8)));
        bytes[0] = b'X';
        assert!(decode_checkpoint(&bytes).is_err());
        let bytes = encode_checkpoint(&tiny_config(8), &ModelParams::zeros(&tiny_config(8)));
        assert!(decode_checkpoint(&bytes[..bytes.len() - 3]).is_err());
    }
}
