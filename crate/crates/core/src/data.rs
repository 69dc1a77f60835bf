//! Vocabulary, parallel corpora, batching, the synthetic cipher task and
//! metric-based corpus pruning.
//!
//! The on-disk corpus format is JSONL: line 1 is the vocabulary header
//! `{"tokens": [...]}` (plus an optional `"provenance"` list), every
//! following line is one example
//! `{"src": [ids], "tgt": [ids], "noise_tag": "...",
//! "noisy_tgt_positions": [...]}`. UTF-8, LF line endings. Writing is
//! deterministic, so identical corpora serialize to identical bytes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::{SeededRng, Stream};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const SEP: u32 = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<sep>"];

/// Token/id bijection with the four reserved ids fixed at the front.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() {
            return Err(invalid("vocabulary must include the four reserved tokens"));
        }
        for (i, reserved) in RESERVED.iter().enumerate() {
            if tokens[i] != *reserved {
                return Err(invalid(format!(
                    "vocabulary slot {i} must be {reserved:?}, found {:?}",
                    tokens[i]
                )));
            }
        }
        let mut seen = std::collections::HashSet::new();
        for t in &tokens {
            if !seen.insert(t.as_str()) {
                return Err(invalid(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocab { tokens })
    }

    /// Reserved tokens plus `alphabet_size` letter tokens (`a`, `b`, ...,
    /// then `w26`, `w27`, ... past the latin alphabet).
    pub fn for_alphabet(alphabet_size: usize) -> Result<Self> {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for i in 0..alphabet_size {
            if i < 26 {
                tokens.push(((b'a' + i as u8) as char).to_string());
            } else {
                tokens.push(format!("w{i}"));
            }
        }
        Vocab::new(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.tokens.iter().position(|t| t == token).map(|i| i as u32)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Ids of the non-reserved tokens.
    pub fn letter_ids(&self) -> std::ops::Range<u32> {
        RESERVED.len() as u32..self.tokens.len() as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseTag {
    Clean,
    Copy,
    Shuffle,
    Substitution,
}

impl NoiseTag {
    pub fn name(&self) -> &'static str {
        match self {
            NoiseTag::Clean => "clean",
            NoiseTag::Copy => "copy",
            NoiseTag::Shuffle => "shuffle",
            NoiseTag::Substitution => "substitution",
        }
    }
}

/// One source/target pair with its ground-truth noise labels.
/// `noisy_tgt_positions` indexes positions of `tgt` (strictly increasing);
/// clean examples carry an empty set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParallelExample {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
    pub noise_tag: NoiseTag,
    pub noisy_tgt_positions: Vec<usize>,
}

impl ParallelExample {
    pub fn clean(src: Vec<u32>, tgt: Vec<u32>) -> Self {
        ParallelExample {
            src,
            tgt,
            noise_tag: NoiseTag::Clean,
            noisy_tgt_positions: Vec::new(),
        }
    }

    fn validate(&self, vocab_len: usize, line: usize) -> Result<()> {
        let bad_id = self
            .src
            .iter()
            .chain(self.tgt.iter())
            .find(|&&id| id as usize >= vocab_len);
        if let Some(&id) = bad_id {
            return Err(Error::Parse {
                line,
                msg: format!("token id {id} out of range for vocabulary of {vocab_len}"),
            });
        }
        let mut prev: Option<usize> = None;
        for &pos in &self.noisy_tgt_positions {
            if pos >= self.tgt.len() {
                return Err(Error::Parse {
                    line,
                    msg: format!("noisy position {pos} out of range for target of length {}", self.tgt.len()),
                });
            }
            if let Some(p) = prev {
                if pos <= p {
                    return Err(Error::Parse {
                        line,
                        msg: "noisy positions must be strictly increasing".to_string(),
                    });
                }
            }
            prev = Some(pos);
        }
        if self.noise_tag == NoiseTag::Clean && !self.noisy_tgt_positions.is_empty() {
            return Err(Error::Parse {
                line,
                msg: "clean example with non-empty noisy positions".to_string(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParallelCorpus {
    pub vocab: Vocab,
    pub examples: Vec<ParallelExample>,
    /// Human-readable lineage: generator seed, applied noise specs, slices.
    pub provenance: Vec<String>,
}

impl ParallelCorpus {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Copy of a contiguous example range, sharing the vocabulary.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Result<ParallelCorpus> {
        if range.end > self.examples.len() || range.start > range.end {
            return Err(invalid(format!(
                "slice {range:?} out of range for corpus of {}",
                self.examples.len()
            )));
        }
        let mut provenance = self.provenance.clone();
        provenance.push(format!("slice range={}..{}", range.start, range.end));
        Ok(ParallelCorpus {
            vocab: self.vocab.clone(),
            examples: self.examples[range].to_vec(),
            provenance,
        })
    }

    /// Total number of scored positions: every target token plus the
    /// terminal EOS of each example.
    pub fn scored_token_count(&self) -> usize {
        self.examples.iter().map(|e| e.tgt.len() + 1).sum()
    }
}

/// Deterministic cipher-translation corpus: a seeded bijective cipher over
/// the alphabet is applied position-wise, `tgt[i] = cipher(src[i])`. All
/// examples are clean.
pub fn gen_cipher_corpus(
    alphabet_size: usize,
    n_examples: usize,
    len_range: (usize, usize),
    rng: &mut SeededRng,
) -> Result<ParallelCorpus> {
    let (min_len, max_len) = len_range;
    if alphabet_size < 2 {
        return Err(invalid("alphabet size must be at least 2"));
    }
    if n_examples == 0 {
        return Err(invalid("need at least one example"));
    }
    if min_len == 0 || min_len > max_len {
        return Err(invalid(format!(
            "length range must satisfy 1 <= min <= max, got {min_len}..{max_len}"
        )));
    }
    let vocab = Vocab::for_alphabet(alphabet_size)?;
    let letters: Vec<u32> = vocab.letter_ids().collect();
    let mut cipher_map = letters.clone();
    rng.shuffle(&mut cipher_map);

    let mut examples = Vec::with_capacity(n_examples);
    for _ in 0..n_examples {
        let len = min_len + rng.gen_index(max_len - min_len + 1);
        let src: Vec<u32> = (0..len).map(|_| letters[rng.gen_index(letters.len())]).collect();
        let tgt: Vec<u32> = src
            .iter()
            .map(|&id| cipher_map[(id - RESERVED.len() as u32) as usize])
            .collect();
        examples.push(ParallelExample::clean(src, tgt));
    }
    Ok(ParallelCorpus {
        vocab,
        examples,
        provenance: vec![format!(
            "gen-cipher alphabet={alphabet_size} n={n_examples} len={min_len}..{max_len} seed={}",
            rng.seed()
        )],
    })
}

/// One training batch. Targets carry the terminal EOS and are padded to
/// the batch maximum with PAD; `scored` flags the non-PAD positions, which
/// are the only ones that ever reach a loss or quantile.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Corpus index of each batch row.
    pub example_indices: Vec<usize>,
    pub src: Vec<Vec<u32>>,
    pub tgt_padded: Vec<Vec<u32>>,
    pub scored: Vec<Vec<bool>>,
}

impl Batch {
    pub fn from_indices(corpus: &ParallelCorpus, indices: &[usize]) -> Result<Batch> {
        if indices.is_empty() {
            return Err(invalid("batch must contain at least one example"));
        }
        let mut max_len = 0;
        for &i in indices {
            let e = corpus
                .examples
                .get(i)
                .ok_or_else(|| invalid(format!("example index {i} out of range")))?;
            max_len = max_len.max(e.tgt.len() + 1);
        }
        let mut src = Vec::with_capacity(indices.len());
        let mut tgt_padded = Vec::with_capacity(indices.len());
        let mut scored = Vec::with_capacity(indices.len());
        for &i in indices {
            let e = &corpus.examples[i];
            let mut row = e.tgt.clone();
            row.push(EOS);
            let scored_row: Vec<bool> = (0..max_len).map(|p| p < row.len()).collect();
            row.resize(max_len, PAD);
            src.push(e.src.clone());
            tgt_padded.push(row);
            scored.push(scored_row);
        }
        Ok(Batch {
            example_indices: indices.to_vec(),
            src,
            tgt_padded,
            scored,
        })
    }

    pub fn rows(&self) -> usize {
        self.example_indices.len()
    }

    /// Gold target id for every scored slot, example-major.
    pub fn targets(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for (row, flags) in self.tgt_padded.iter().zip(&self.scored) {
            for (p, &on) in flags.iter().enumerate() {
                if on {
                    out.push(row[p]);
                }
            }
        }
        out
    }

    /// Flattened slot range of each example, in batch order.
    pub fn sentence_boundaries(&self) -> Vec<std::ops::Range<usize>> {
        let mut bounds = Vec::with_capacity(self.rows());
        let mut cursor = 0;
        for flags in &self.scored {
            let n = flags.iter().filter(|&&on| on).count();
            bounds.push(cursor..cursor + n);
            cursor += n;
        }
        bounds
    }

    pub fn scored_slot_count(&self) -> usize {
        self.scored
            .iter()
            .map(|flags| flags.iter().filter(|&&on| on).count())
            .sum()
    }
}

/// Seeded shuffle of the corpus, then fixed-size batches (the last one may
/// be short). Every example appears exactly once.
pub fn make_batches(corpus: &ParallelCorpus, batch_size: usize, rng: &mut SeededRng) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(invalid("batch size must be at least 1"));
    }
    if corpus.is_empty() {
        return Err(invalid("cannot batch an empty corpus"));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    rng.shuffle(&mut order);
    order
        .chunks(batch_size)
        .map(|chunk| Batch::from_indices(corpus, chunk))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PruneMode {
    /// Remove the examples with the highest score, ties broken by lower
    /// original index first.
    Highest,
    /// Remove a seeded uniform sample.
    Random { seed: u64 },
}

/// Removes `floor(fraction * n)` examples and returns the remainder in the
/// original order.
pub fn prune_corpus(
    corpus: &ParallelCorpus,
    per_example_scores: &[f64],
    fraction: f64,
    mode: PruneMode,
) -> Result<ParallelCorpus> {
    if per_example_scores.len() != corpus.len() {
        return Err(invalid(format!(
            "got {} scores for {} examples",
            per_example_scores.len(),
            corpus.len()
        )));
    }
    if !(0.0..1.0).contains(&fraction) {
        return Err(invalid(format!("prune fraction must be in [0, 1), got {fraction}")));
    }
    let n = corpus.len();
    let remove_count = (fraction * n as f64).floor() as usize;
    let removed: Vec<usize> = match mode {
        PruneMode::Highest => {
            let mut idx: Vec<usize> = (0..n).collect();
            // Stable sort by descending score keeps ties in index order.
            idx.sort_by(|&a, &b| per_example_scores[b].total_cmp(&per_example_scores[a]));
            let mut removed = idx[..remove_count].to_vec();
            removed.sort_unstable();
            removed
        }
        PruneMode::Random { seed } => {
            let mut rng = SeededRng::new(seed).substream(Stream::Prune);
            rng.sample_indices(n, remove_count)
        }
    };
    let mut keep = vec![true; n];
    for &i in &removed {
        keep[i] = false;
    }
    let examples: Vec<ParallelExample> = corpus
        .examples
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(e, _)| e.clone())
        .collect();
    let mode_name = match mode {
        PruneMode::Highest => "highest".to_string(),
        PruneMode::Random { seed } => format!("random seed={seed}"),
    };
    let mut provenance = corpus.provenance.clone();
    provenance.push(format!("prune fraction={fraction} mode={mode_name}"));
    Ok(ParallelCorpus {
        vocab: corpus.vocab.clone(),
        examples,
        provenance,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabHeader {
    tokens: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    provenance: Vec<String>,
}

pub fn write_corpus(corpus: &ParallelCorpus, path: &Path) -> Result<()> {
    let file = File::create(path)?;
    let mut w = BufWriter::new(file);
    let header = VocabHeader {
        tokens: corpus.vocab.tokens().to_vec(),
        provenance: corpus.provenance.clone(),
    };
    let header_json = serde_json::to_string(&header)
        .map_err(|e| invalid(format!("cannot serialize vocabulary header: {e}")))?;
    writeln!(w, "{header_json}")?;
    for e in &corpus.examples {
        let line = serde_json::to_string(e)
            .map_err(|err| invalid(format!("cannot serialize example: {err}")))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_corpus(path: &Path) -> Result<ParallelCorpus> {
    let file = File::open(path)?;
    let reader = BufReader::new(file);
    let mut lines = reader.lines();
    let header_line = match lines.next() {
        Some(line) => line?,
        None => {
            return Err(Error::Parse {
                line: 1,
                msg: "empty corpus file: missing vocabulary header".to_string(),
            })
        }
    };
    let header: VocabHeader = serde_json::from_str(&header_line).map_err(|e| Error::Parse {
        line: 1,
        msg: format!("bad vocabulary header: {e}"),
    })?;
    let vocab = Vocab::new(header.tokens)?;
    let mut examples = Vec::new();
    for (offset, line) in lines.enumerate() {
        let line_no = offset + 2;
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let example: ParallelExample = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            msg: e.to_string(),
        })?;
        example.validate(vocab.len(), line_no)?;
        examples.push(example);
    }
    Ok(ParallelCorpus {
        vocab,
        examples,
        provenance: header.provenance,
    })
}
