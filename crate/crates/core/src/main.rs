//! Command-line entry points: gen-data, inject-noise, train, eval, score,
//! sweep. Exit codes: 0 success, 1 usage/config error, 2 I/O error,
//! 3 numeric divergence.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use entlab::config::{NoiseMode, RunConfig};
use entlab::data::{gen_cipher_corpus, read_corpus, write_corpus, ParallelCorpus};
use entlab::error::Error;
use entlab::eval::sequence_metrics;
use entlab::model::{forward, read_checkpoint, write_checkpoint};
use entlab::noise::{inject, inject_append, NoiseKind, NoiseSpec};
use entlab::objectives::Strategy;
use entlab::quality::{self, TargetIndex};
use entlab::rng::{SeededRng, Stream};
use entlab::sweep::{
    run_noise_robustness, run_prune_retrain, write_results_csv, NoiseRobustnessSpec, PruneMetric,
    PruneRetrainSpec,
};
use entlab::train::{train, write_dynamics_csv, write_metrics_csv};

#[derive(Parser)]
#[command(name = "entlab", about = "Robust-training laboratory for tiny text-generation models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cipher-translation corpus
    GenData {
        /// Number of distinct letters in the alphabet
        #[arg(long, default_value_t = 26)]
        alphabet: usize,
        /// Number of examples
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        len_min: usize,
        #[arg(long, default_value_t = 12)]
        len_max: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Hold out this many trailing examples into a separate file
        #[arg(long, default_value_t = 0)]
        holdout: usize,
        #[arg(long)]
        holdout_out: Option<PathBuf>,
    },

    /// Corrupt a corpus with copy, shuffle or substitution noise
    InjectNoise {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        kind: String,
        #[arg(long)]
        rate: f64,
        /// replace corrupts in place; append adds corrupted copies
        #[arg(long, default_value = "replace")]
        mode: String,
        #[arg(long)]
        seed: u64,
    },

    /// Train a model from a JSON run config; writes checkpoint.bin,
    /// dynamics.csv and metrics.csv into --out-dir
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },

    /// Evaluate a checkpoint on a corpus and print the metrics as JSON
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "eval")]
        split_name: String,
    },

    /// Per-token quality scores as TSV, plus a clean/noisy histogram CSV
    /// when the corpus carries noise labels
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Two error-norm highlight thresholds
        #[arg(long, default_value = "1.0,1.3", value_delimiter = ',')]
        highlight: Vec<f64>,
        #[arg(long)]
        hist_out: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        bins: usize,
    },

    /// Noise-robustness or prune-retrain experiment grid
    Sweep {
        /// noise-robustness or prune-retrain
        #[arg(long)]
        mode: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        noise_kinds: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        rates: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        strategies: Vec<String>,
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value = "append")]
        noise_mode: String,
        #[arg(long, value_delimiter = ',')]
        fractions: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        prune_metrics: Vec<String>,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = match err.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = err.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("error: {err}");
        let code = match err {
            Error::InvalidInput(_) | Error::Config(_) => 1,
            Error::Io(_) | Error::Parse { .. } => 2,
            Error::Divergence { .. } => 3,
        };
        std::process::exit(code);
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData {
            alphabet,
            n,
            len_min,
            len_max,
            seed,
            out,
            holdout,
            holdout_out,
        } => cmd_gen_data(alphabet, n, (len_min, len_max), seed, &out, holdout, holdout_out.as_deref()),
        Command::InjectNoise {
            input,
            out,
            kind,
            rate,
            mode,
            seed,
        } => cmd_inject_noise(&input, &out, &kind, rate, &mode, seed),
        Command::Train { config, out_dir } => cmd_train(&config, &out_dir),
        Command::Eval {
            checkpoint,
            corpus,
            split_name,
        } => cmd_eval(&checkpoint, &corpus, &split_name),
        Command::Score {
            checkpoint,
            corpus,
            out,
            highlight,
            hist_out,
            bins,
        } => cmd_score(&checkpoint, &corpus, &out, &highlight, hist_out.as_deref(), bins),
        Command::Sweep {
            mode,
            config,
            out,
            noise_kinds,
            rates,
            strategies,
            seeds,
            noise_mode,
            fractions,
            prune_metrics,
        } => cmd_sweep(
            &mode,
            &config,
            &out,
            &noise_kinds,
            &rates,
            &strategies,
            &seeds,
            &noise_mode,
            &fractions,
            &prune_metrics,
        ),
    }
}

fn cmd_gen_data(
    alphabet: usize,
    n: usize,
    len_range: (usize, usize),
    seed: u64,
    out: &Path,
    holdout: usize,
    holdout_out: Option<&Path>,
) -> Result<(), Error> {
    let mut rng = SeededRng::new(seed).substream(Stream::Generator);
    let corpus = gen_cipher_corpus(alphabet, n, len_range, &mut rng)?;
    if holdout > 0 {
        let holdout_path = holdout_out.ok_or_else(|| {
            Error::InvalidInput("--holdout requires --holdout-out".to_string())
        })?;
        if holdout >= n {
            return Err(Error::InvalidInput(format!(
                "holdout {holdout} must be smaller than n {n}"
            )));
        }
        let head = corpus.slice(0..n - holdout)?;
        let tail = corpus.slice(n - holdout..n)?;
        write_corpus(&head, out)?;
        write_corpus(&tail, holdout_path)?;
    } else {
        write_corpus(&corpus, out)?;
    }
    Ok(())
}

fn cmd_inject_noise(
    input: &Path,
    out: &Path,
    kind: &str,
    rate: f64,
    mode: &str,
    seed: u64,
) -> Result<(), Error> {
    let kind: NoiseKind = kind.parse()?;
    let mode: NoiseMode = mode.parse()?;
    let corpus = read_corpus(input)?;
    let spec = NoiseSpec { kind, rate, seed };
    let corrupted = match mode {
        NoiseMode::Replace => inject(&corpus, &spec)?,
        NoiseMode::Append => inject_append(&corpus, &spec)?,
    };
    write_corpus(&corrupted, out)
}

fn load_training_corpus(config: &RunConfig) -> Result<ParallelCorpus, Error> {
    let corpus = read_corpus(&config.data.train)?;
    match &config.noise {
        None => Ok(corpus),
        Some(noise) => {
            let spec = NoiseSpec {
                kind: noise.kind,
                rate: noise.rate,
                seed: noise.seed,
            };
            match noise.mode {
                NoiseMode::Replace => inject(&corpus, &spec),
                NoiseMode::Append => inject_append(&corpus, &spec),
            }
        }
    }
}

fn cmd_train(config_path: &Path, out_dir: &Path) -> Result<(), Error> {
    let config = RunConfig::load(config_path)?;
    let corpus = load_training_corpus(&config)?;
    let valid = match &config.data.valid {
        Some(path) => Some(read_corpus(path)?),
        None => None,
    };
    if let Some(v) = &valid {
        if v.vocab != corpus.vocab {
            return Err(Error::Config(
                "train and valid corpora use different vocabularies".to_string(),
            ));
        }
    }
    let model_config = config.model_config(corpus.vocab.len())?;
    let train_config = config.train_config();
    let out = train(&corpus, valid.as_ref(), &model_config, &train_config)?;

    std::fs::create_dir_all(out_dir)?;
    write_checkpoint(&out_dir.join("checkpoint.bin"), &model_config, &out.params)?;
    write_dynamics_csv(&out_dir.join("dynamics.csv"), &out.dynamics)?;
    write_metrics_csv(&out_dir.join("metrics.csv"), &out.metrics)?;

    let final_report = match (&valid, out.metrics.last()) {
        (Some(_), Some(record)) => record.report.clone(),
        _ => sequence_metrics(&out.params, &model_config, &corpus, "train")?,
    };
    let json = serde_json::to_string(&final_report)
        .map_err(|e| Error::InvalidInput(format!("cannot serialize report: {e}")))?;
    println!("{json}");
    Ok(())
}

fn cmd_eval(checkpoint: &Path, corpus_path: &Path, split_name: &str) -> Result<(), Error> {
    let (model_config, params) = read_checkpoint(checkpoint)?;
    let corpus = read_corpus(corpus_path)?;
    if model_config.vocab_size != corpus.vocab.len() {
        return Err(Error::InvalidInput(format!(
            "checkpoint vocabulary {} does not match corpus vocabulary {}",
            model_config.vocab_size,
            corpus.vocab.len()
        )));
    }
    let report = sequence_metrics(&params, &model_config, &corpus, split_name)?;
    let json = serde_json::to_string(&report)
        .map_err(|e| Error::InvalidInput(format!("cannot serialize report: {e}")))?;
    println!("{json}");
    Ok(())
}

fn cmd_score(
    checkpoint: &Path,
    corpus_path: &Path,
    out: &Path,
    highlight: &[f64],
    hist_out: Option<&Path>,
    bins: usize,
) -> Result<(), Error> {
    if highlight.len() != 2 || highlight[0] >= highlight[1] {
        return Err(Error::InvalidInput(
            "--highlight needs two increasing thresholds, e.g. 1.0,1.3".to_string(),
        ));
    }
    let (model_config, params) = read_checkpoint(checkpoint)?;
    let corpus = read_corpus(corpus_path)?;
    if model_config.vocab_size != corpus.vocab.len() {
        return Err(Error::InvalidInput(format!(
            "checkpoint vocabulary {} does not match corpus vocabulary {}",
            model_config.vocab_size,
            corpus.vocab.len()
        )));
    }

    let mut tsv = String::from(
        "example_id\tposition\ttoken\tnll\tl1\tl2\trenyi2\tnoise_label\thighlight_level\n",
    );
    let mut clean_norms = Vec::new();
    let mut noisy_norms = Vec::new();
    let indices: Vec<usize> = (0..corpus.len()).collect();
    for chunk in indices.chunks(64) {
        let batch = entlab::data::Batch::from_indices(&corpus, chunk)?;
        let (dist, _) = forward(&params, &model_config, &batch)?;
        let targets = batch.targets();
        for ((row, meta), &target) in dist.rows.iter().zip(&dist.meta).zip(&targets) {
            let t = TargetIndex(target as usize);
            let nll = quality::token_nll(row, t)?;
            let l1 = quality::error_l1_norm(row, t)?;
            let l2 = quality::error_l2_norm(row, t)?;
            let renyi2 = quality::renyi2_entropy(row);
            let example = &corpus.examples[meta.example];
            let noisy = example.noisy_tgt_positions.binary_search(&meta.position).is_ok();
            let level = quality::highlight_level(l2, highlight[0], highlight[1]);
            let token = corpus
                .vocab
                .token(target)
                .ok_or_else(|| Error::InvalidInput(format!("token id {target} unmapped")))?;
            tsv.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                meta.example,
                meta.position,
                token,
                nll,
                l1,
                l2,
                renyi2,
                if noisy { "noisy" } else { "clean" },
                level
            ));
            if noisy {
                noisy_norms.push(l2);
            } else {
                clean_norms.push(l2);
            }
        }
    }
    std::fs::write(out, tsv)?;

    if let Some(hist_path) = hist_out {
        if noisy_norms.is_empty() {
            return Err(Error::InvalidInput(
                "histogram output requires a corpus with noise labels".to_string(),
            ));
        }
        std::fs::write(hist_path, histogram_csv(&clean_norms, &noisy_norms, bins)?)?;
    }
    Ok(())
}

/// Histogram CSV over the error norm: `score` is the bin center, the
/// densities are normalized per class.
fn histogram_csv(clean: &[f64], noisy: &[f64], bins: usize) -> Result<String, Error> {
    if bins < 2 {
        return Err(Error::InvalidInput("need at least 2 bins".to_string()));
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &x in clean.iter().chain(noisy) {
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
    let mut clean_hist = vec![0.0; bins];
    let mut noisy_hist = vec![0.0; bins];
    for &x in clean {
        clean_hist[bin_of(x)] += 1.0;
    }
    for &x in noisy {
        noisy_hist[bin_of(x)] += 1.0;
    }
    let mut out = String::from("score,clean_density,noisy_density\n");
    for b in 0..bins {
        let center = if width == 0.0 {
            lo
        } else {
            lo + (b as f64 + 0.5) * width / bins as f64
        };
        out.push_str(&format!(
            "{},{},{}\n",
            center,
            clean_hist[b] / clean.len().max(1) as f64,
            noisy_hist[b] / noisy.len().max(1) as f64
        ));
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
fn cmd_sweep(
    mode: &str,
    config_path: &Path,
    out: &Path,
    noise_kinds: &[String],
    rates: &[f64],
    strategies: &[String],
    seeds: &[u64],
    noise_mode: &str,
    fractions: &[f64],
    prune_metrics: &[String],
) -> Result<(), Error> {
    let config = RunConfig::load(config_path)?;
    let rows = match mode {
        "noise-robustness" => {
            let kinds: Vec<NoiseKind> = noise_kinds
                .iter()
                .map(|s| s.parse())
                .collect::<Result<_, _>>()?;
            let strategies: Vec<Strategy> = strategies
                .iter()
                .map(|s| s.parse())
                .collect::<Result<_, _>>()?;
            let spec = NoiseRobustnessSpec {
                kinds,
                rates: rates.to_vec(),
                strategies,
                seeds: seeds.to_vec(),
                mode: noise_mode.parse()?,
            };
            run_noise_robustness(&config, &spec)?
        }
        "prune-retrain" => {
            let metrics: Vec<PruneMetric> = prune_metrics
                .iter()
                .map(|s| s.parse())
                .collect::<Result<_, _>>()?;
            let spec = PruneRetrainSpec {
                fractions: fractions.to_vec(),
                metrics,
                seeds: seeds.to_vec(),
            };
            run_prune_retrain(&config, &spec)?
        }
        other => {
            return Err(Error::InvalidInput(format!(
                "unknown sweep mode {other:?}; use noise-robustness or prune-retrain"
            )))
        }
    };
    write_results_csv(out, &rows)
}
