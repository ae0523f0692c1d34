//! Stochastic data warping of training audio.
//!
//! Each degradation is a [`WarpMethod`] registered by name in a
//! [`WarpRegistry`]. [`apply_random_warps`] runs the standard registry: IR
//! convolution, Gaussian noise, environmental noise and pitch shift, in that
//! order, each skipped independently with probability `skip_prob`.

mod dsp;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

pub use dsp::{add_noise, convolve_ir, fft_convolve, pitch_shift, time_stretch};

use crate::corpus::{read_wav, resample, AudioClip, WORKING_RATE};
use crate::error::{Error, Result};

/// A bank entry: a clip and the file name it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct BankItem {
    pub name: String,
    pub clip: AudioClip,
}

/// Impulse responses and noise recordings, each split into a training half
/// and a held-out evaluation half.
#[derive(Debug, Clone, Default)]
pub struct WarpBank {
    pub ir_train: Vec<BankItem>,
    pub ir_eval: Vec<BankItem>,
    pub noise_train: Vec<BankItem>,
    pub noise_eval: Vec<BankItem>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BankPartition {
    pub train: Vec<PathBuf>,
    pub eval: Vec<PathBuf>,
}

/// Randomly splits bank files in half; with an odd count the extra file goes
/// to training. Each side is returned in name order.
pub fn partition_ir_bank(files: &[PathBuf], seed: u64) -> Result<BankPartition> {
    if files.len() < 2 {
        return Err(Error::Insufficient(format!(
            "bank partition needs at least 2 files, got {}",
            files.len()
        )));
    }
    let mut sorted = files.to_vec();
    sorted.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    sorted.shuffle(&mut rng);
    let n_train = files.len().div_ceil(2);
    let mut train = sorted[..n_train].to_vec();
    let mut eval = sorted[n_train..].to_vec();
    train.sort();
    eval.sort();
    Ok(BankPartition { train, eval })
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.display().to_string())
}

/// Text form: a `[train]` section and an `[eval]` section, one file name per line.
pub fn save_partition(path: &Path, part: &BankPartition) -> Result<()> {
    let mut s = String::from("[train]\n");
    for p in &part.train {
        let _ = writeln!(s, "{}", file_name(p));
    }
    s.push_str("[eval]\n");
    for p in &part.eval {
        let _ = writeln!(s, "{}", file_name(p));
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Reads a partition file; names are resolved against `dir`.
pub fn load_partition(path: &Path, dir: &Path) -> Result<BankPartition> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut part = BankPartition {
        train: vec![],
        eval: vec![],
    };
    let mut side = None;
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        match line {
            "" => {}
            "[train]" => side = Some(true),
            "[eval]" => side = Some(false),
            name => match side {
                Some(true) => part.train.push(dir.join(name)),
                Some(false) => part.eval.push(dir.join(name)),
                None => {
                    return Err(Error::Manifest {
                        path: path.to_path_buf(),
                        line: i + 1,
                        message: "file name outside a [train]/[eval] section".into(),
                    })
                }
            },
        }
    }
    Ok(part)
}

/// Lists `.wav` files of a directory in name order.
pub fn list_wavs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|x| x.eq_ignore_ascii_case("wav"))
                .unwrap_or(false)
        })
        .collect();
    out.sort();
    Ok(out)
}

fn load_items(files: &[PathBuf]) -> Result<Vec<BankItem>> {
    files
        .iter()
        .map(|p| {
            let clip = resample(&read_wav(p)?, WORKING_RATE)?;
            Ok(BankItem {
                name: file_name(p),
                clip,
            })
        })
        .collect()
}

impl WarpBank {
    pub fn from_partitions(ir: &BankPartition, noise: &BankPartition) -> Result<Self> {
        Ok(Self {
            ir_train: load_items(&ir.train)?,
            ir_eval: load_items(&ir.eval)?,
            noise_train: load_items(&noise.train)?,
            noise_eval: load_items(&noise.eval)?,
        })
    }

    /// Loads a bank from `ir_dir` and `noise_dir`. When a directory holds a
    /// `partition.txt` it is reused; otherwise a fresh partition is drawn from
    /// `seed` and written there.
    pub fn from_dirs(ir_dir: &Path, noise_dir: &Path, seed: u64) -> Result<Self> {
        let ir = partition_for_dir(ir_dir, seed)?;
        let noise = partition_for_dir(noise_dir, seed.wrapping_add(1))?;
        Self::from_partitions(&ir, &noise)
    }

    pub fn is_empty(&self) -> bool {
        self.ir_train.is_empty()
            && self.ir_eval.is_empty()
            && self.noise_train.is_empty()
            && self.noise_eval.is_empty()
    }
}

pub const PARTITION_FILE: &str = "partition.txt";

fn partition_for_dir(dir: &Path, seed: u64) -> Result<BankPartition> {
    let pf = dir.join(PARTITION_FILE);
    if pf.exists() {
        return load_partition(&pf, dir);
    }
    let part = partition_ir_bank(&list_wavs(dir)?, seed)?;
    save_partition(&pf, &part)?;
    Ok(part)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WarpPolicy {
    pub skip_prob: f64,
    pub snr_range_db: (f64, f64),
    pub pitch_range_cents: (f64, f64),
}

impl Default for WarpPolicy {
    fn default() -> Self {
        Self {
            skip_prob: 0.5,
            snr_range_db: (0.0, 15.0),
            pitch_range_cents: (-200.0, 200.0),
        }
    }
}

impl WarpPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.skip_prob) {
            return Err(Error::invalid("skip_prob must lie in [0, 1]"));
        }
        if !(self.snr_range_db.0 <= self.snr_range_db.1) {
            return Err(Error::invalid("snr range must satisfy low <= high"));
        }
        if !(self.pitch_range_cents.0 <= self.pitch_range_cents.1) {
            return Err(Error::invalid("pitch range must satisfy low <= high"));
        }
        Ok(())
    }
}

fn draw(rng: &mut dyn RngCore, range: (f64, f64)) -> f64 {
    if range.1 > range.0 {
        range.0 + (range.1 - range.0) * rng.gen::<f64>()
    } else {
        range.0
    }
}

/// One applied degradation, for the degradation log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpEvent {
    pub method: String,
    pub file: Option<String>,
    pub offset: Option<usize>,
    pub snr_db: Option<f64>,
    pub cents: Option<f64>,
}

impl WarpEvent {
    fn new(method: &str) -> Self {
        Self {
            method: method.into(),
            file: None,
            offset: None,
            snr_db: None,
            cents: None,
        }
    }
}

/// A single degradation drawn from the training half of a bank.
pub trait WarpMethod: Send + Sync {
    fn name(&self) -> &'static str;

    /// Applies the method with parameters drawn from `rng`.
    fn apply(
        &self,
        clip: &AudioClip,
        bank: &WarpBank,
        policy: &WarpPolicy,
        rng: &mut dyn RngCore,
    ) -> Result<(AudioClip, WarpEvent)>;
}

pub struct ImpulseResponseWarp;

impl WarpMethod for ImpulseResponseWarp {
    fn name(&self) -> &'static str {
        "ir"
    }

    fn apply(
        &self,
        clip: &AudioClip,
        bank: &WarpBank,
        _policy: &WarpPolicy,
        rng: &mut dyn RngCore,
    ) -> Result<(AudioClip, WarpEvent)> {
        let item = bank
            .ir_train
            .choose(rng)
            .ok_or_else(|| Error::EmptyBank("no training impulse responses".into()))?;
        let out = convolve_ir(clip, &item.clip)?;
        let mut ev = WarpEvent::new(self.name());
        ev.file = Some(item.name.clone());
        Ok((out, ev))
    }
}

pub struct GaussianNoiseWarp;

impl WarpMethod for GaussianNoiseWarp {
    fn name(&self) -> &'static str {
        "gaussian"
    }

    fn apply(
        &self,
        clip: &AudioClip,
        _bank: &WarpBank,
        policy: &WarpPolicy,
        rng: &mut dyn RngCore,
    ) -> Result<(AudioClip, WarpEvent)> {
        let snr = draw(rng, policy.snr_range_db);
        let noise: Vec<f64> = (0..clip.len()).map(|_| rng.sample(StandardNormal)).collect();
        let out = dsp::add_noise_samples(clip, &noise, snr, 0)?;
        let mut ev = WarpEvent::new(self.name());
        ev.snr_db = Some(snr);
        Ok((out, ev))
    }
}

pub struct EnvironmentNoiseWarp;

impl WarpMethod for EnvironmentNoiseWarp {
    fn name(&self) -> &'static str {
        "environment"
    }

    fn apply(
        &self,
        clip: &AudioClip,
        bank: &WarpBank,
        policy: &WarpPolicy,
        rng: &mut dyn RngCore,
    ) -> Result<(AudioClip, WarpEvent)> {
        let item = bank
            .noise_train
            .choose(rng)
            .ok_or_else(|| Error::EmptyBank("no training noise recordings".into()))?;
        let snr = draw(rng, policy.snr_range_db);
        let span = item.clip.len().saturating_sub(clip.len());
        let offset = rng.gen_range(0..=span);
        let out = add_noise(clip, &item.clip, snr, offset)?;
        let mut ev = WarpEvent::new(self.name());
        ev.file = Some(item.name.clone());
        ev.offset = Some(offset);
        ev.snr_db = Some(snr);
        Ok((out, ev))
    }
}

pub struct PitchShiftWarp;

impl WarpMethod for PitchShiftWarp {
    fn name(&self) -> &'static str {
        "pitch"
    }

    fn apply(
        &self,
        clip: &AudioClip,
        _bank: &WarpBank,
        policy: &WarpPolicy,
        rng: &mut dyn RngCore,
    ) -> Result<(AudioClip, WarpEvent)> {
        let cents = draw(rng, policy.pitch_range_cents);
        let out = pitch_shift(clip, cents)?;
        let mut ev = WarpEvent::new(self.name());
        ev.cents = Some(cents);
        Ok((out, ev))
    }
}

/// Ordered collection of warp methods with an invocation counter.
pub struct WarpRegistry {
    methods: Vec<Box<dyn WarpMethod>>,
    invocations: AtomicU64,
}

impl Default for WarpRegistry {
    fn default() -> Self {
        Self::standard()
    }
}

impl WarpRegistry {
    pub fn empty() -> Self {
        Self {
            methods: Vec::new(),
            invocations: AtomicU64::new(0),
        }
    }

    /// IR convolution, Gaussian noise, environmental noise, pitch shift.
    pub fn standard() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(ImpulseResponseWarp));
        r.register(Box::new(GaussianNoiseWarp));
        r.register(Box::new(EnvironmentNoiseWarp));
        r.register(Box::new(PitchShiftWarp));
        r
    }

    /// Appends a method; a method with the same name is replaced in place.
    pub fn register(&mut self, method: Box<dyn WarpMethod>) {
        match self.methods.iter().position(|m| m.name() == method.name()) {
            Some(i) => self.methods[i] = method,
            None => self.methods.push(method),
        }
    }

    pub fn get(&self, name: &str) -> Option<&dyn WarpMethod> {
        self.methods.iter().find(|m| m.name() == name).map(|m| m.as_ref())
    }

    pub fn names(&self) -> Vec<&'static str> {
        self.methods.iter().map(|m| m.name()).collect()
    }

    /// Number of [`WarpRegistry::apply_random`] calls so far.
    pub fn invocations(&self) -> u64 {
        self.invocations.load(Ordering::Relaxed)
    }

    /// Runs every method in registration order, each skipped with probability
    /// `skip_prob`. One uniform skip draw is consumed per method whether it
    /// fires or not.
    pub fn apply_random(
        &self,
        clip: &AudioClip,
        bank: &WarpBank,
        policy: &WarpPolicy,
        rng: &mut dyn RngCore,
    ) -> Result<(AudioClip, Vec<WarpEvent>)> {
        policy.validate()?;
        self.invocations.fetch_add(1, Ordering::Relaxed);
        let mut cur = clip.clone();
        let mut events = Vec::new();
        for m in &self.methods {
            let u: f64 = rng.gen();
            if u < policy.skip_prob {
                continue;
            }
            let (next, ev) = m.apply(&cur, bank, policy, rng)?;
            cur = next;
            events.push(ev);
        }
        Ok((cur, events))
    }
}

/// Applies the standard warp chain with training-half bank material.
pub fn apply_random_warps(
    clip: &AudioClip,
    bank: &WarpBank,
    policy: &WarpPolicy,
    rng: &mut dyn RngCore,
) -> Result<AudioClip> {
    WarpRegistry::standard()
        .apply_random(clip, bank, policy, rng)
        .map(|(c, _)| c)
}
