//! Corpus corruption operators with exact ground-truth labels.
//!
//! Three noise kinds: `copy` replaces the target with the source
//! (untranslated text), `shuffle` permutes the target tokens (misordered
//! words), `substitution` rerolls individual target tokens. Replace mode
//! corrupts examples in place and keeps the corpus size constant; append
//! mode adds the corrupted copies after the untouched originals.

use serde::{Deserialize, Serialize};

use crate::data::{NoiseTag, ParallelCorpus, RESERVED};
use crate::error::{invalid, Result};
use crate::rng::{SeededRng, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Copy,
    Shuffle,
    Substitution,
}

impl NoiseKind {
    pub fn name(&self) -> &'static str {
        match self {
            NoiseKind::Copy => "copy",
            NoiseKind::Shuffle => "shuffle",
            NoiseKind::Substitution => "substitution",
        }
    }
}

impl std::str::FromStr for NoiseKind {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(NoiseKind::Copy),
            "shuffle" => Ok(NoiseKind::Shuffle),
            "substitution" => Ok(NoiseKind::Substitution),
            other => Err(invalid(format!("unknown noise kind {other:?}"))),
        }
    }
}

/// For `copy` and `shuffle` the rate is the fraction of examples
/// corrupted; for `substitution` it is the per-token replacement
/// probability.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub rate: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(invalid(format!("noise rate must be in [0, 1], got {}", self.rate)));
        }
        Ok(())
    }

    fn rng(&self) -> SeededRng {
        SeededRng::new(self.seed).substream(Stream::Noise)
    }
}

fn provenance_entry(spec: &NoiseSpec, mode: &str) -> String {
    format!(
        "inject kind={} rate={} seed={} mode={mode}",
        spec.kind.name(),
        spec.rate,
        spec.seed
    )
}

/// Untranslated-copy noise: for `floor(rate * n)` clean examples the
/// target becomes a copy of the source; every target position is labeled
/// noisy.
pub fn inject_copy(corpus: &ParallelCorpus, spec: &NoiseSpec) -> Result<ParallelCorpus> {
    if spec.kind != NoiseKind::Copy {
        return Err(invalid("inject_copy requires a copy spec"));
    }
    spec.validate()?;
    let n = corpus.len();
    let m = (spec.rate * n as f64).floor() as usize;
    let clean: Vec<usize> = (0..n)
        .filter(|&i| corpus.examples[i].noise_tag == NoiseTag::Clean)
        .collect();
    if m > clean.len() {
        return Err(invalid(format!(
            "cannot corrupt {m} examples: only {} clean examples available",
            clean.len()
        )));
    }
    let mut rng = spec.rng();
    let picked = rng.sample_indices(clean.len(), m);
    let mut out = corpus.clone();
    for &p in &picked {
        let idx = clean[p];
        let e = &mut out.examples[idx];
        e.tgt = e.src.clone();
        e.noise_tag = NoiseTag::Copy;
        e.noisy_tgt_positions = (0..e.tgt.len()).collect();
    }
    out.provenance.push(provenance_entry(spec, "replace"));
    Ok(out)
}

/// Misordered-words noise: for `floor(rate * n)` eligible examples the
/// target is replaced by a seeded uniform permutation of itself, resampled
/// until it differs from the original. Eligible examples are clean, at
/// least two tokens long and contain at least two distinct tokens (a
/// constant target has no differing permutation).
pub fn inject_shuffle(corpus: &ParallelCorpus, spec: &NoiseSpec) -> Result<ParallelCorpus> {
    if spec.kind != NoiseKind::Shuffle {
        return Err(invalid("inject_shuffle requires a shuffle spec"));
    }
    spec.validate()?;
    let n = corpus.len();
    let m = (spec.rate * n as f64).floor() as usize;
    let eligible: Vec<usize> = (0..n)
        .filter(|&i| {
            let e = &corpus.examples[i];
            e.noise_tag == NoiseTag::Clean
                && e.tgt.len() >= 2
                && e.tgt.iter().any(|&t| t != e.tgt[0])
        })
        .collect();
    if m > eligible.len() {
        return Err(invalid(format!(
            "cannot shuffle {m} examples: only {} eligible examples available",
            eligible.len()
        )));
    }
    let mut rng = spec.rng();
    let picked = rng.sample_indices(eligible.len(), m);
    let mut out = corpus.clone();
    for &p in &picked {
        let idx = eligible[p];
        let e = &mut out.examples[idx];
        let original = e.tgt.clone();
        loop {
            rng.shuffle(&mut e.tgt);
            if e.tgt != original {
                break;
            }
        }
        e.noise_tag = NoiseTag::Shuffle;
        e.noisy_tgt_positions = (0..e.tgt.len()).collect();
    }
    out.provenance.push(provenance_entry(spec, "replace"));
    Ok(out)
}

/// Token-substitution noise: every target token of every example is
/// independently replaced with probability `rate` by a seeded uniform
/// non-reserved token different from the original.
pub fn inject_substitution(corpus: &ParallelCorpus, spec: &NoiseSpec) -> Result<ParallelCorpus> {
    if spec.kind != NoiseKind::Substitution {
        return Err(invalid("inject_substitution requires a substitution spec"));
    }
    spec.validate()?;
    let first_letter = RESERVED.len() as u32;
    let letters = corpus.vocab.len() as u32 - first_letter;
    if letters < 2 {
        return Err(invalid("substitution needs at least two non-reserved tokens"));
    }
    let mut rng = spec.rng();
    let mut out = corpus.clone();
    for e in out.examples.iter_mut() {
        let mut replaced = Vec::new();
        for (pos, tok) in e.tgt.iter_mut().enumerate() {
            if rng.gen_f64() >= spec.rate {
                continue;
            }
            let original = *tok;
            *tok = if original >= first_letter {
                // Uniform over the letters excluding the original.
                let r = rng.gen_index(letters as usize - 1) as u32;
                let candidate = first_letter + r;
                if candidate >= original {
                    candidate + 1
                } else {
                    candidate
                }
            } else {
                first_letter + rng.gen_index(letters as usize) as u32
            };
            replaced.push(pos);
        }
        if !replaced.is_empty() {
            if e.noise_tag == NoiseTag::Clean {
                e.noise_tag = NoiseTag::Substitution;
            }
            let mut positions: Vec<usize> = e
                .noisy_tgt_positions
                .iter()
                .copied()
                .chain(replaced)
                .collect();
            positions.sort_unstable();
            positions.dedup();
            e.noisy_tgt_positions = positions;
        }
    }
    out.provenance.push(provenance_entry(spec, "replace"));
    Ok(out)
}

/// Replace-mode dispatch.
pub fn inject(corpus: &ParallelCorpus, spec: &NoiseSpec) -> Result<ParallelCorpus> {
    match spec.kind {
        NoiseKind::Copy => inject_copy(corpus, spec),
        NoiseKind::Shuffle => inject_shuffle(corpus, spec),
        NoiseKind::Substitution => inject_substitution(corpus, spec),
    }
}

/// Append mode: the original corpus stays untouched and the corrupted
/// copies of the examples the injector changed are appended after it, in
/// original-index order.
pub fn inject_append(corpus: &ParallelCorpus, spec: &NoiseSpec) -> Result<ParallelCorpus> {
    let corrupted = inject(corpus, spec)?;
    let mut out = corpus.clone();
    for (original, new) in corpus.examples.iter().zip(&corrupted.examples) {
        if new != original {
            out.examples.push(new.clone());
        }
    }
    out.provenance.push(provenance_entry(spec, "append"));
    Ok(out)
}
