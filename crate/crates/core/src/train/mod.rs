//! Batch sampling, the SGD loop, checkpointing and fine-tuning.

mod config;
mod svm;

use std::io::Write;
use std::path::PathBuf;

use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use config::{Ablation, TrainConfig};
pub use svm::{fit_embedding_classifier, fit_svm, EmbeddingClassifier, SvmParams, DEFAULT_C, DEFAULT_TOLERANCE};

use crate::corpus::{Gender, Label, LoadedCorpus, ManifestRecord};
use crate::error::{Error, Result};
use crate::features::{random_crop, spectrogram, Spectrogram, SpectrogramPatch};
use crate::loss::loss_gradients_with;
use crate::model::{init_model, Checkpoint, ModelParams, RngState};
use crate::warp::{WarpBank, WarpRegistry};

/// Stream of the data RNG; model initialisation uses stream 0 of the same seed.
const DATA_STREAM: u64 = 1;
const FINE_TUNE_STREAM: u64 = 2;
pub const DEFAULT_FINE_TUNE_STEPS: u64 = 2500;
pub const LOG_HEADER: &str = "step\tge2e\tnll\tcombined\tomega\tbias";

/// Indices of one training batch: `M` dysphonic followed by `M` healthy
/// records, all of one gender.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchIndices {
    pub gender: Gender,
    pub indices: Vec<usize>,
    pub labels: Vec<Label>,
}

/// Draws a same-gender batch. The gender is uniform over genders that have at
/// least `m` records of each label; records are drawn without replacement.
pub fn sample_batch(records: &[ManifestRecord], m: usize, rng: &mut dyn RngCore) -> Result<BatchIndices> {
    if m == 0 {
        return Err(Error::invalid("M must be at least 1"));
    }
    let pool = |g: Gender, l: Label| -> Vec<usize> {
        (0..records.len())
            .filter(|&i| records[i].gender == g && records[i].label == l)
            .collect()
    };
    let eligible: Vec<Gender> = [Gender::Female, Gender::Male]
        .into_iter()
        .filter(|&g| pool(g, Label::Dysphonic).len() >= m && pool(g, Label::Healthy).len() >= m)
        .collect();
    if eligible.is_empty() {
        return Err(Error::Insufficient(format!(
            "no gender has at least {m} dysphonic and {m} healthy training records"
        )));
    }
    let gender = eligible[rng.gen_range(0..eligible.len())];
    let mut indices = Vec::with_capacity(2 * m);
    let mut labels = Vec::with_capacity(2 * m);
    for label in [Label::Dysphonic, Label::Healthy] {
        let p = pool(gender, label);
        for k in sample(rng, p.len(), m).into_iter() {
            indices.push(p[k]);
            labels.push(label);
        }
    }
    Ok(BatchIndices {
        gender,
        indices,
        labels,
    })
}

/// Mutable training state. The data RNG is a ChaCha stream whose position is
/// stored in checkpoints.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParams,
    pub step: u64,
    rng_seed: u64,
    rng: ChaCha8Rng,
    /// Exponential moving averages of (ge2e, nll, combined).
    pub running: [f64; 3],
}

impl TrainState {
    pub fn new(params: ModelParams, seed: u64) -> Self {
        Self::with_stream(params, seed, DATA_STREAM)
    }

    fn with_stream(params: ModelParams, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        Self {
            params,
            step: 0,
            rng_seed: seed,
            rng,
            running: [0.0; 3],
        }
    }

    pub fn rng_state(&self) -> RngState {
        RngState {
            seed: self.rng_seed,
            stream: self.rng.get_stream(),
            word_pos: self.rng.get_word_pos(),
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            train_config: cfg.to_json(),
            step: self.step,
            rng: self.rng_state(),
            optimizer_state: Vec::new(),
            stats: self.running.to_vec(),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(ckpt.rng.seed);
        rng.set_stream(ckpt.rng.stream);
        rng.set_word_pos(ckpt.rng.word_pos);
        let mut running = [0.0; 3];
        for (r, s) in running.iter_mut().zip(&ckpt.stats) {
            *r = *s;
        }
        Self {
            params: ckpt.params.clone(),
            step: ckpt.step,
            rng_seed: ckpt.rng.seed,
            rng,
            running,
        }
    }
}

/// Losses and similarity parameters after one update; one training-log row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub ge2e: f64,
    pub nll: f64,
    pub combined: f64,
    pub omega: f64,
    pub bias: f64,
}

impl StepRecord {
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}",
            self.step, self.ge2e, self.nll, self.combined, self.omega, self.bias
        )
    }
}

/// One plain SGD update on a prepared batch.
pub fn train_step(
    state: &mut TrainState,
    patches: &[SpectrogramPatch],
    labels: &[Label],
    cfg: &TrainConfig,
) -> Result<StepRecord> {
    let g = loss_gradients_with(&state.params, patches, labels, cfg.objective()).map_err(|e| match e {
        Error::NonFinite(m) => Error::NonFinite(format!("step {}: {m}", state.step + 1)),
        other => other,
    })?;
    let lr = cfg.learning_rate;
    for (p, d) in state.params.values_mut().iter_mut().zip(&g.grads) {
        *p -= lr * d;
    }
    state.params.clamp_omega();
    state.step += 1;
    let now = [g.ge2e, g.nll, g.total];
    if state.step == 1 {
        state.running = now;
    } else {
        for (r, v) in state.running.iter_mut().zip(now) {
            *r = 0.99 * *r + 0.01 * v;
        }
    }
    Ok(StepRecord {
        step: state.step,
        ge2e: g.ge2e,
        nll: g.nll,
        combined: g.total,
        omega: state.params.omega(),
        bias: state.params.sim_bias(),
    })
}

/// Where and how often to write checkpoints and the training log.
#[derive(Debug, Clone, Default)]
pub struct OutputOptions {
    pub out_dir: Option<PathBuf>,
    /// Stop after this many total steps instead of `cfg.steps`.
    pub stop_at: Option<u64>,
    pub verbose: bool,
}

pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const LOG_FILE: &str = "train_log.tsv";

pub fn checkpoint_name(step: u64) -> String {
    format!("step{step:08}.ckpt")
}

/// Runs the sample, warp, spectrogram, crop, update loop.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    corpus: &'a LoadedCorpus,
    bank: Option<&'a WarpBank>,
    registry: WarpRegistry,
    clean_specs: Vec<Option<Spectrogram>>,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, corpus: &'a LoadedCorpus, bank: Option<&'a WarpBank>) -> Result<Self> {
        cfg.validate()?;
        if cfg.ablation.data_warping && bank.map_or(true, |b| b.ir_train.is_empty() || b.noise_train.is_empty()) {
            return Err(Error::EmptyBank(
                "data warping needs training impulse responses and noise".into(),
            ));
        }
        let clean_specs = vec![None; corpus.clips().len()];
        Ok(Self {
            cfg,
            corpus,
            bank,
            registry: WarpRegistry::standard(),
            clean_specs,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Warp registry used for data warping; its counter is the number of
    /// warp chains applied so far.
    pub fn registry(&self) -> &WarpRegistry {
        &self.registry
    }

    pub fn init_state(&self) -> Result<TrainState> {
        Ok(TrainState::new(init_model(&self.cfg.encoder, self.cfg.seed)?, self.cfg.seed))
    }

    /// Draws a batch and turns it into patches, consuming the state's RNG
    /// sequentially.
    pub fn prepare_batch(&mut self, rng: &mut ChaCha8Rng) -> Result<(Vec<SpectrogramPatch>, Vec<Label>)> {
        let batch = sample_batch(self.corpus.records(), self.cfg.samples_per_class, rng)?;
        let mut patches = Vec::with_capacity(batch.indices.len());
        for &i in &batch.indices {
            let patch = if self.cfg.ablation.data_warping {
                let bank = self.bank.expect("checked in new");
                let (clip, _) = self.registry.apply_random(&self.corpus.clips()[i], bank, &self.cfg.warp, rng)?;
                random_crop(&spectrogram(&clip, &self.cfg.spectrogram)?, rng)
            } else {
                if self.clean_specs[i].is_none() {
                    self.clean_specs[i] = Some(spectrogram(&self.corpus.clips()[i], &self.cfg.spectrogram)?);
                }
                random_crop(self.clean_specs[i].as_ref().expect("filled"), rng)
            };
            patches.push(patch);
        }
        Ok((patches, batch.labels))
    }

    pub fn step(&mut self, state: &mut TrainState) -> Result<StepRecord> {
        let (patches, labels) = self.prepare_batch(&mut state.rng)?;
        train_step(state, &patches, &labels, &self.cfg)
    }

    /// Steps until `target` total steps, writing checkpoints every
    /// `checkpoint_interval` steps and appending to the log when an output
    /// directory is given.
    pub fn run_until(&mut self, state: &mut TrainState, target: u64, out: &OutputOptions) -> Result<Vec<StepRecord>> {
        let mut log = match &out.out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let path = dir.join(LOG_FILE);
                let fresh = state.step == 0 || !path.exists();
                let mut f = std::fs::OpenOptions::new()
                    .create(true)
                    .append(!fresh)
                    .write(true)
                    .truncate(fresh)
                    .open(&path)
                    .map_err(|e| Error::io(&path, e))?;
                if fresh {
                    writeln!(f, "{LOG_HEADER}").map_err(|e| Error::io(&path, e))?;
                }
                Some((path, f))
            }
            None => None,
        };
        let mut records = Vec::new();
        while state.step < target {
            let rec = self.step(state)?;
            if let Some((path, f)) = log.as_mut() {
                writeln!(f, "{}", rec.log_line()).map_err(|e| Error::io(path.as_path(), e))?;
            }
            if out.verbose && (rec.step % 100 == 0 || rec.step == target) {
                eprintln!("{}", rec.log_line());
            }
            if let Some(dir) = &out.out_dir {
                if rec.step % self.cfg.checkpoint_interval == 0 {
                    state.to_checkpoint(&self.cfg).save(&dir.join(checkpoint_name(rec.step)))?;
                }
            }
            records.push(rec);
        }
        if let Some(dir) = &out.out_dir {
            state.to_checkpoint(&self.cfg).save(&dir.join(FINAL_CHECKPOINT))?;
        }
        Ok(records)
    }
}

/// Trains from scratch for `cfg.steps` steps and returns the final checkpoint.
pub fn train(corpus: &LoadedCorpus, bank: Option<&WarpBank>, cfg: &TrainConfig) -> Result<Checkpoint> {
    train_with(corpus, bank, cfg, &OutputOptions::default())
}

pub fn train_with(
    corpus: &LoadedCorpus,
    bank: Option<&WarpBank>,
    cfg: &TrainConfig,
    out: &OutputOptions,
) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(cfg.clone(), corpus, bank)?;
    let mut state = trainer.init_state()?;
    trainer.run_until(&mut state, out.stop_at.unwrap_or(cfg.steps).min(cfg.steps), out)?;
    Ok(state.to_checkpoint(cfg))
}

/// Continues a run from a checkpoint to `cfg.steps` total steps, using the
/// configuration stored in the checkpoint.
pub fn resume(
    ckpt: &Checkpoint,
    corpus: &LoadedCorpus,
    bank: Option<&WarpBank>,
    out: &OutputOptions,
) -> Result<Checkpoint> {
    let cfg = TrainConfig::from_json(&ckpt.train_config)?;
    check_compatible(ckpt, &cfg)?;
    let mut trainer = Trainer::new(cfg.clone(), corpus, bank)?;
    let mut state = TrainState::from_checkpoint(ckpt);
    trainer.run_until(&mut state, out.stop_at.unwrap_or(cfg.steps).min(cfg.steps), out)?;
    Ok(state.to_checkpoint(&cfg))
}

fn check_compatible(ckpt: &Checkpoint, cfg: &TrainConfig) -> Result<()> {
    if ckpt.params.config() != &cfg.encoder {
        let have = ckpt.params.config();
        return Err(Error::Checkpoint(format!(
            "checkpoint model (embedding_dim {}, channels {}, layers {}) does not match the configured model \
             (embedding_dim {}, channels {}, layers {})",
            have.embedding_dim,
            have.residual_channels,
            have.total_layers,
            cfg.encoder.embedding_dim,
            cfg.encoder.residual_channels,
            cfg.encoder.total_layers
        )));
    }
    Ok(())
}

/// Continues SGD from `ckpt` on a new corpus for `steps` more steps.
/// `cfg` supplies everything except the step budget and must describe the
/// same model as the checkpoint.
pub fn fine_tune(
    ckpt: &Checkpoint,
    corpus: &LoadedCorpus,
    bank: Option<&WarpBank>,
    cfg: &TrainConfig,
    steps: u64,
    out: &OutputOptions,
) -> Result<Checkpoint> {
    check_compatible(ckpt, cfg)?;
    let mut cfg = cfg.clone();
    cfg.steps = ckpt.step + steps;
    let mut trainer = Trainer::new(cfg.clone(), corpus, bank)?;
    let mut state = TrainState::with_stream(ckpt.params.clone(), cfg.seed, FINE_TUNE_STREAM);
    state.step = ckpt.step;
    trainer.run_until(&mut state, cfg.steps, out)?;
    Ok(state.to_checkpoint(&cfg))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::corpus::{synthesize_phonation, PhonationParams, WORKING_RATE};
    use crate::features::SpectrogramConfig;
    use crate::model::tests::tiny_config;

    fn rec(id: usize, label: Label, gender: Gender) -> ManifestRecord {
        ManifestRecord {
            speaker_id: format!("s{id}"),
            session_id: "1".into(),
            label,
            gender,
            corpus: "t".into(),
            path: PathBuf::from(format!("s{id}.wav")),
            sample_rate: WORKING_RATE,
            duration: 0.25,
        }
    }

    fn records(counts: [(Label, Gender, usize); 4]) -> Vec<ManifestRecord> {
        let mut v = Vec::new();
        for (l, g, n) in counts {
            for _ in 0..n {
                v.push(rec(v.len(), l, g));
            }
        }
        v
    }

    #[test]
    fn batches_are_balanced_and_single_gender() {
        let rs = records([
            (Label::Dysphonic, Gender::Female, 20),
            (Label::Healthy, Gender::Female, 20),
            (Label::Dysphonic, Gender::Male, 17),
            (Label::Healthy, Gender::Male, 30),
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut females = 0;
        for _ in 0..400 {
            let b = sample_batch(&rs, 16, &mut rng).unwrap();
            assert_eq!(b.indices.len(), 32);
            let mut idx = b.indices.clone();
            idx.sort();
            idx.dedup();
            assert_eq!(idx.len(), 32);
            assert!(b.indices.iter().all(|&i| rs[i].gender == b.gender));
            for (k, &i) in b.indices.iter().enumerate() {
                assert_eq!(rs[i].label, b.labels[k]);
            }
            assert_eq!(b.labels.iter().filter(|l| **l == Label::Dysphonic).count(), 16);
            females += (b.gender == Gender::Female) as usize;
        }
        assert!((160..240).contains(&females), "{females}");
    }

    #[test]
    fn insufficient_records() {
        let rs = records([
            (Label::Dysphonic, Gender::Male, 10),
            (Label::Healthy, Gender::Male, 20),
            (Label::Dysphonic, Gender::Female, 0),
            (Label::Healthy, Gender::Female, 0),
        ]);
        assert!(sample_batch(&rs, 16, &mut ChaCha8Rng::seed_from_u64(0)).is_err());
    }

    /// 4 + 4 short synthetic recordings per gender with a 64-point STFT.
    pub(crate) fn tiny_corpus() -> LoadedCorpus {
        let mut rs = Vec::new();
        let mut clips = Vec::new();
        for i in 0..16 {
            let label = if i % 2 == 0 { Label::Dysphonic } else { Label::Healthy };
            let gender = if (i / 2) % 2 == 0 { Gender::Female } else { Gender::Male };
            let p = PhonationParams {
                f0: if gender == Gender::Female { 200.0 } else { 110.0 } + i as f64,
                jitter: if label == Label::Dysphonic { 0.03 } else { 0.002 },
                shimmer: if label == Label::Dysphonic { 0.1 } else { 0.02 },
                hnr_db: if label == Label::Dysphonic { 6.0 } else { 25.0 },
                duration: 0.25,
                seed: i as u64,
            };
            clips.push(synthesize_phonation(&p, WORKING_RATE).unwrap());
            rs.push(rec(i, label, gender));
        }
        LoadedCorpus::from_clips(rs, clips).unwrap()
    }

    pub(crate) fn tiny_train_config() -> TrainConfig {
        let spectrogram = SpectrogramConfig {
            window_length: 64,
            hop: 32,
            fft_length: 64,
            ..SpectrogramConfig::default()
        };
        TrainConfig {
            samples_per_class: 2,
            steps: 6,
            learning_rate: 0.01,
            checkpoint_interval: 2,
            ablation: Ablation {
                data_warping: false,
                ..Ablation::default()
            },
            encoder: tiny_config(),
            spectrogram,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let corpus = tiny_corpus();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            ..tiny_train_config()
        };
        let mut t = Trainer::new(tiny_train_config(), &corpus, None).unwrap();
        let mut state = t.init_state().unwrap();
        let before = state.params.clone();
        let (p, l) = t.prepare_batch(&mut state.rng).unwrap();
        train_step(&mut state, &p, &l, &cfg).unwrap();
        assert_eq!(state.params, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn overfits_one_batch() {
        let corpus = tiny_corpus();
        let cfg = tiny_train_config();
        let mut t = Trainer::new(cfg.clone(), &corpus, None).unwrap();
        let mut state = t.init_state().unwrap();
        let (p, l) = t.prepare_batch(&mut state.rng).unwrap();
        let first = train_step(&mut state, &p, &l, &cfg).unwrap().combined;
        let mut last = first;
        for _ in 0..200 {
            last = train_step(&mut state, &p, &l, &cfg).unwrap().combined;
        }
        assert!(last < first, "{last} !< {first}");
    }

    #[test]
    fn no_warping_never_invokes_warps() {
        let corpus = tiny_corpus();
        let mut t = Trainer::new(tiny_train_config(), &corpus, None).unwrap();
        let mut state = t.init_state().unwrap();
        t.run_until(&mut state, 3, &OutputOptions::default()).unwrap();
        assert_eq!(t.registry().invocations(), 0);
    }

    #[test]
    fn warping_needs_a_bank() {
        let corpus = tiny_corpus();
        let mut cfg = tiny_train_config();
        cfg.ablation.data_warping = true;
        assert!(Trainer::new(cfg, &corpus, None).is_err());
    }

    #[test]
    fn deterministic_and_resumable() {
        let corpus = tiny_corpus();
        let cfg = tiny_train_config();
        let a = train(&corpus, None, &cfg).unwrap();
        let b = train(&corpus, None, &cfg).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes());

        let dir = tempfile::tempdir().unwrap();
        let out = OutputOptions {
            out_dir: Some(dir.path().to_path_buf()),
            stop_at: Some(4),
            verbose: false,
        };
        train_with(&corpus, None, &cfg, &out).unwrap();
        assert!(dir.path().join(checkpoint_name(2)).exists());
        let mid = Checkpoint::load(&dir.path().join(checkpoint_name(4))).unwrap();
        assert_eq!(mid.step, 4);
        let out = OutputOptions {
            stop_at: None,
            ..out
        };
        let resumed = resume(&mid, &corpus, None, &out).unwrap();
        assert_eq!(resumed.to_bytes(), a.to_bytes());
        let log = std::fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines[0], LOG_HEADER);
        assert_eq!(lines.len(), 7);
    }

    #[test]
    fn fine_tune_contracts() {
        let corpus = tiny_corpus();
        let cfg = tiny_train_config();
        let ckpt = train(&corpus, None, &cfg).unwrap();
        let same = fine_tune(&ckpt, &corpus, None, &cfg, 0, &OutputOptions::default()).unwrap();
        assert_eq!(same.params, ckpt.params);
        let moved = fine_tune(&ckpt, &corpus, None, &cfg, 2, &OutputOptions::default()).unwrap();
        assert_eq!(moved.step, ckpt.step + 2);
        assert_ne!(moved.params, ckpt.params);
        let mut other = cfg.clone();
        other.encoder.embedding_dim += 1;
        assert!(fine_tune(&ckpt, &corpus, None, &other, 2, &OutputOptions::default()).is_err());
    }
}
