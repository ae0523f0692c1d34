//! Command-line front end. Every command is a thin wrapper over library calls.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{
    build_synthetic_banks, build_synthetic_corpus_with, load_manifest, read_wav, resample, save_manifest,
    split_speaker_disjoint, write_wav, LoadedCorpus, SplitSpec, SyntheticCorpusOptions, WORKING_RATE,
};
use crate::eval::{
    embed_corpus, evaluate_corpus, export_embeddings, fit_fallback_classifier, project_2d, write_degradation_log,
    write_projection, AggregationMode, Condition, EvalOptions, PredictOptions,
};
use crate::features::{sliding_windows, spectrogram, INFERENCE_HOP_FRAMES};
use crate::model::Checkpoint;
use crate::train::{fine_tune, train_with, OutputOptions, TrainConfig, DEFAULT_FINE_TUNE_STEPS};
use crate::warp::{WarpBank, WarpRegistry};

pub const TRAIN_MANIFEST: &str = "train.jsonl";
pub const VAL_MANIFEST: &str = "val.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.tsv";
pub const PROJECTION_FILE: &str = "projection.tsv";
pub const CONFIG_FILE: &str = "config.toml";

/// Default seed for bank partitioning and evaluation draws.
pub const DEFAULT_SEED: u64 = 250;

#[derive(Debug, Parser)]
#[command(name = "vocalemb", version, about = "Vocal-quality embeddings for dysphonia detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML training configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set ablation.data_warping=false`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic phonation corpus and IR/noise banks.
    Synth {
        /// Number of speakers.
        #[arg(long, default_value_t = 200)]
        n: usize,
        /// Recording length in seconds.
        #[arg(long, default_value_t = 1.0)]
        duration: f64,
        #[arg(long, default_value_t = 12)]
        n_ir: usize,
        #[arg(long, default_value_t = 6)]
        n_noise: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Split a manifest into speaker-disjoint train and validation manifests.
    Split {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value_t = 0.7)]
        train_fraction: f64,
        #[command(flatten)]
        common: Common,
    },
    /// Train from scratch.
    Train {
        #[arg(long)]
        train: PathBuf,
        /// Directory holding `ir/` and `noise/` subdirectories.
        #[arg(long)]
        banks: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Continue training a checkpoint on another corpus.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        banks: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_FINE_TUNE_STEPS)]
        steps: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint under one or more recording conditions.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        banks: Option<PathBuf>,
        /// clean, an, ir or an_ir; repeatable.
        #[arg(long, default_value = "clean")]
        condition: Vec<Condition>,
        /// logprob_mean or embedding_mean.
        #[arg(long, default_value = "logprob_mean")]
        mode: AggregationMode,
        /// Training manifest for fitting the embedding classifier.
        #[arg(long)]
        fit_manifest: Option<PathBuf>,
        /// Average probabilities instead of log-probabilities.
        #[arg(long)]
        average_probabilities: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Export window-mean embeddings and their 2-D projection.
    Embed {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write a randomly warped copy of one recording and its degradation log.
    WarpPreview {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        banks: PathBuf,
        /// Also dump the first spectrogram patch as tab-separated text.
        #[arg(long)]
        dump_patch: bool,
        #[command(flatten)]
        common: Common,
    },
}

fn manifest_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    }
}

pub fn load_corpus(manifest: &Path) -> Result<LoadedCorpus> {
    let records = load_manifest(manifest)?;
    LoadedCorpus::load(records, manifest_dir(manifest))
        .with_context(|| format!("loading audio listed in {}", manifest.display()))
}

pub fn load_bank(dir: &Path, seed: u64) -> Result<WarpBank> {
    WarpBank::from_dirs(&dir.join("ir"), &dir.join("noise"), seed)
        .with_context(|| format!("loading IR/noise banks from {}", dir.display()))
}

fn load_config(common: &Common, base: Option<&TrainConfig>) -> Result<TrainConfig> {
    let text = match (&common.config, base) {
        (Some(p), _) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
        (None, Some(b)) => b.to_toml(),
        (None, None) => String::new(),
    };
    let mut sets = common.set.clone();
    if let Some(s) = common.seed {
        sets.push(format!("seed={s}"));
    }
    Ok(TrainConfig::from_toml_with_overrides(&text, &sets)?)
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn absolute(p: &Path) -> Result<PathBuf> {
    std::fs::canonicalize(p).with_context(|| format!("resolving {}", p.display()))
}

fn stored_config(ckpt: &Checkpoint) -> Result<TrainConfig> {
    Ok(TrainConfig::from_json(&ckpt.train_config)?)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth {
            n,
            duration,
            n_ir,
            n_noise,
            common,
        } => {
            let seed = common.seed.unwrap_or(DEFAULT_SEED);
            let mut opts = SyntheticCorpusOptions::new(n, seed);
            opts.duration = duration;
            let records = build_synthetic_corpus_with(&opts, &common.out_dir)?;
            build_synthetic_banks(&common.out_dir.join("banks"), n_ir, n_noise, 4.0, seed ^ 0x62616e6b)?;
            println!("wrote {} recordings to {}", records.len(), common.out_dir.display());
        }
        Command::Split {
            manifest,
            train_fraction,
            common,
        } => {
            let base = absolute(manifest_dir(&manifest))?;
            let records: Vec<_> = load_manifest(&manifest)?
                .into_iter()
                .map(|mut r| {
                    r.path = r.resolve_path(&base);
                    r
                })
                .collect();
            let spec = SplitSpec {
                train_fraction,
                seed: common.seed.unwrap_or(DEFAULT_SEED),
            };
            let (train, val) = split_speaker_disjoint(&records, spec)?;
            ensure_dir(&common.out_dir)?;
            let header = |side: &str| {
                vec![format!(
                    "{side} side of a speaker-disjoint split of {} (fraction {train_fraction}, seed {})",
                    manifest.display(),
                    spec.seed
                )]
            };
            save_manifest(&common.out_dir.join(TRAIN_MANIFEST), &header("train"), &train)?;
            save_manifest(&common.out_dir.join(VAL_MANIFEST), &header("validation"), &val)?;
            println!("train {} recordings, validation {}", train.len(), val.len());
        }
        Command::Train { train, banks, common } => {
            let cfg = load_config(&common, None)?;
            for w in cfg.warnings() {
                eprintln!("warning: {w}");
            }
            let corpus = load_corpus(&train)?;
            let bank = banks.as_deref().map(|b| load_bank(b, cfg.seed)).transpose()?;
            ensure_dir(&common.out_dir)?;
            std::fs::write(common.out_dir.join(CONFIG_FILE), cfg.to_toml())?;
            let out = OutputOptions {
                out_dir: Some(common.out_dir.clone()),
                stop_at: None,
                verbose: true,
            };
            let ckpt = train_with(&corpus, bank.as_ref(), &cfg, &out)?;
            println!("trained {} steps; checkpoints in {}", ckpt.step, common.out_dir.display());
        }
        Command::Finetune {
            checkpoint,
            train,
            banks,
            steps,
            common,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let cfg = load_config(&common, Some(&stored_config(&ckpt)?))?;
            let corpus = load_corpus(&train)?;
            let bank = banks.as_deref().map(|b| load_bank(b, cfg.seed)).transpose()?;
            ensure_dir(&common.out_dir)?;
            std::fs::write(common.out_dir.join(CONFIG_FILE), cfg.to_toml())?;
            let out = OutputOptions {
                out_dir: Some(common.out_dir.clone()),
                stop_at: None,
                verbose: true,
            };
            let done = fine_tune(&ckpt, &corpus, bank.as_ref(), &cfg, steps, &out)?;
            println!("fine-tuned to step {}; checkpoints in {}", done.step, common.out_dir.display());
        }
        Command::Eval {
            checkpoint,
            manifest,
            banks,
            condition,
            mode,
            fit_manifest,
            average_probabilities,
            common,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let cfg = load_config(&common, Some(&stored_config(&ckpt)?))?;
            let seed = common.seed.unwrap_or(DEFAULT_SEED);
            let corpus = load_corpus(&manifest)?;
            let bank = match &banks {
                Some(b) => load_bank(b, seed)?,
                None => WarpBank::default(),
            };
            let fallback = match (mode, &fit_manifest) {
                (AggregationMode::EmbeddingMean, Some(m)) => {
                    Some(fit_fallback_classifier(&ckpt.params, &load_corpus(m)?, &cfg.spectrogram)?)
                }
                (AggregationMode::EmbeddingMean, None) => bail!("--mode embedding_mean needs --fit-manifest"),
                _ => None,
            };
            let opts = EvalOptions {
                predict: PredictOptions {
                    spectrogram: cfg.spectrogram,
                    mode,
                    average_probabilities,
                },
                seed,
                ..EvalOptions::default()
            };
            ensure_dir(&common.out_dir)?;
            for cond in condition {
                let out = evaluate_corpus(&ckpt.params, &corpus, &bank, cond, &opts, fallback.as_ref())?;
                let path = common.out_dir.join(format!("report_{}.json", cond.slug()));
                std::fs::write(&path, out.report.to_json())?;
                write_degradation_log(
                    &common.out_dir.join(format!("degradation_{}.tsv", cond.slug())),
                    &out.degradation_log,
                )?;
                println!(
                    "{cond}: balanced accuracy {:.4}, AMI {:.4} over {} recordings",
                    out.report.balanced_accuracy, out.report.ami, out.report.n_recordings
                );
            }
        }
        Command::Embed {
            checkpoint,
            manifest,
            common,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let cfg = load_config(&common, Some(&stored_config(&ckpt)?))?;
            let corpus = load_corpus(&manifest)?;
            let emb = embed_corpus(&ckpt.params, &corpus, &cfg.spectrogram)?;
            ensure_dir(&common.out_dir)?;
            export_embeddings(&emb, corpus.records(), &common.out_dir.join(EMBEDDINGS_FILE))?;
            let coords = project_2d(&emb)?;
            write_projection(&common.out_dir.join(PROJECTION_FILE), corpus.records(), &coords)?;
            println!("exported {} embeddings to {}", emb.len(), common.out_dir.display());
        }
        Command::WarpPreview {
            input,
            banks,
            dump_patch,
            common,
        } => {
            let cfg = load_config(&common, None)?;
            let clip = resample(&read_wav(&input)?, WORKING_RATE)?;
            let bank = load_bank(&banks, cfg.seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let (warped, events) = WarpRegistry::standard().apply_random(&clip, &bank, &cfg.warp, &mut rng)?;
            ensure_dir(&common.out_dir)?;
            write_wav(&common.out_dir.join("warped.wav"), &warped)?;
            let mut log = String::from("method\tfile\toffset\tsnr_db\tcents\n");
            let opt = |v: Option<String>| v.unwrap_or_else(|| "-".into());
            for e in &events {
                log.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\n",
                    e.method,
                    opt(e.file.clone()),
                    opt(e.offset.map(|o| o.to_string())),
                    opt(e.snr_db.map(|s| format!("{s:.4}"))),
                    opt(e.cents.map(|c| format!("{c:.2}"))),
                ));
            }
            std::fs::write(common.out_dir.join("warp_log.tsv"), log)?;
            if dump_patch {
                let spec = spectrogram(&warped, &cfg.spectrogram)?;
                let patches = sliding_windows(&spec, INFERENCE_HOP_FRAMES);
                patches[0].write_tsv(&common.out_dir.join("patch.tsv"))?;
            }
            println!("applied {} warps; output in {}", events.len(), common.out_dir.display());
        }
    }
    Ok(())
}
