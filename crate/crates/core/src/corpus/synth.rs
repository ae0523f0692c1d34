//! Source-filter synthesis of sustained /a/ phonation and of the synthetic
//! corpus, impulse-response and noise banks used for desk-scale runs.
//!
//! A phonation is a Rosenberg glottal-flow pulse train whose cycle lengths and
//! amplitudes are perturbed per cycle (jitter, shimmer), differentiated for lip
//! radiation and shaped by a cascade of formant resonators. Aspiration noise
//! goes through the same resonators and is scaled so that the ratio of
//! harmonic to noise power over the clip is exactly the requested HNR.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::audio::{write_wav, AudioClip};
use super::{save_manifest, Gender, Label, ManifestRecord};
use crate::error::{Error, Result};

/// Formant centre frequencies and bandwidths (Hz) of an adult /a/.
const FORMANTS: [(f64, f64); 5] = [
    (730.0, 90.0),
    (1090.0, 110.0),
    (2440.0, 160.0),
    (3400.0, 250.0),
    (4500.0, 300.0),
];

const OUTPUT_PEAK: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhonationParams {
    pub f0: f64,
    /// Standard deviation of the cycle length relative to the mean cycle.
    pub jitter: f64,
    /// Standard deviation of the cycle amplitude relative to the mean.
    pub shimmer: f64,
    /// Harmonics-to-noise power ratio in dB; `f64::INFINITY` disables noise.
    pub hnr_db: f64,
    pub duration: f64,
    pub seed: u64,
}

impl PhonationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.f0 > 0.0 && self.f0.is_finite()) {
            return Err(Error::invalid("f0 must be positive"));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::invalid("jitter must be non-negative"));
        }
        if !(self.shimmer >= 0.0 && self.shimmer.is_finite()) {
            return Err(Error::invalid("shimmer must be non-negative"));
        }
        if self.hnr_db.is_nan() || self.hnr_db == f64::NEG_INFINITY {
            return Err(Error::invalid("hnr_db must be a number or +inf"));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::invalid("duration must be positive"));
        }
        Ok(())
    }
}

/// Glottal flow of one Rosenberg pulse at phase `tau` (seconds into a cycle
/// of length `period`). The closed phase comes first so that glottal closure,
/// the main excitation, falls exactly on the cycle boundary.
fn rosenberg(tau: f64, period: f64) -> f64 {
    let tp = 0.40 * period;
    let tn = 0.16 * period;
    let tau = tau - (period - tp - tn);
    if tau < 0.0 {
        0.0
    } else if tau < tp {
        0.5 * (1.0 - (std::f64::consts::PI * tau / tp).cos())
    } else if tau < tp + tn {
        (std::f64::consts::PI * (tau - tp) / (2.0 * tn)).cos()
    } else {
        0.0
    }
}

/// Unity-DC-gain two-pole resonator cascade.
fn formant_filter(x: &mut [f64], rate: f64) {
    for &(freq, bw) in FORMANTS.iter() {
        if freq >= rate / 2.0 {
            continue;
        }
        let r = (-std::f64::consts::PI * bw / rate).exp();
        let b1 = 2.0 * r * (2.0 * std::f64::consts::PI * freq / rate).cos();
        let b2 = -r * r;
        let a = 1.0 - b1 - b2;
        let (mut y1, mut y2) = (0.0, 0.0);
        for v in x.iter_mut() {
            let y = a * *v + b1 * y1 + b2 * y2;
            y2 = y1;
            y1 = y;
            *v = y;
        }
    }
}

fn power(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64
}

/// Harmonic and noise components of a phonation before they are summed,
/// at the final output scale. `harmonic + noise` is the synthesized clip.
pub fn synthesize_components(p: &PhonationParams, rate: u32) -> Result<(Vec<f64>, Vec<f64>)> {
    p.validate()?;
    if rate == 0 {
        return Err(Error::invalid("sample rate must be positive"));
    }
    let fs = rate as f64;
    let n = ((p.duration * fs).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let t0 = 1.0 / p.f0;

    // glottal flow, one cycle at a time
    let mut flow = vec![0.0; n + 1];
    let mut start = 0.0f64;
    while start < (n + 1) as f64 / fs {
        let gj: f64 = rng.sample(StandardNormal);
        let gs: f64 = rng.sample(StandardNormal);
        let period = t0 * (1.0 + p.jitter * gj).max(0.5);
        let amp = (1.0 + p.shimmer * gs).max(0.05);
        let first = (start * fs).ceil() as usize;
        let last = (((start + period) * fs).ceil() as usize).min(n + 1);
        for (i, f) in flow.iter_mut().enumerate().take(last).skip(first) {
            *f = amp * rosenberg(i as f64 / fs - start, period);
        }
        start += period;
    }
    // lip radiation
    let mut harmonic: Vec<f64> = flow.windows(2).map(|w| w[1] - w[0]).collect();
    formant_filter(&mut harmonic, fs);

    let mut noise = vec![0.0; n];
    if p.hnr_db.is_finite() {
        for v in noise.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        formant_filter(&mut noise, fs);
        let ph = power(&harmonic);
        let pn = power(&noise);
        let target = ph / 10f64.powf(p.hnr_db / 10.0);
        let g = if pn > 0.0 { (target / pn).sqrt() } else { 0.0 };
        noise.iter_mut().for_each(|v| *v *= g);
    }
    let peak = harmonic
        .iter()
        .zip(&noise)
        .fold(0.0f64, |m, (h, e)| m.max((h + e).abs()));
    if peak > 0.0 {
        let g = OUTPUT_PEAK / peak;
        harmonic.iter_mut().for_each(|v| *v *= g);
        noise.iter_mut().for_each(|v| *v *= g);
    }
    Ok((harmonic, noise))
}

/// Synthesizes a sustained /a/. Deterministic given the parameters.
pub fn synthesize_phonation(p: &PhonationParams, rate: u32) -> Result<AudioClip> {
    let (h, e) = synthesize_components(p, rate)?;
    AudioClip::new(h.iter().zip(&e).map(|(a, b)| a + b).collect(), rate)
}

/// Closed parameter interval.
pub type Range = (f64, f64);

/// Parameter ranges a synthetic class is drawn from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassRanges {
    pub jitter: Range,
    pub shimmer: Range,
    pub hnr_db: Range,
}

impl ClassRanges {
    pub fn healthy() -> Self {
        Self {
            jitter: (0.001, 0.005),
            shimmer: (0.01, 0.03),
            hnr_db: (20.0, 30.0),
        }
    }

    pub fn dysphonic() -> Self {
        Self {
            jitter: (0.015, 0.04),
            shimmer: (0.06, 0.12),
            hnr_db: (4.0, 12.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticCorpusOptions {
    pub n_speakers: usize,
    pub seed: u64,
    pub sample_rate: u32,
    pub duration: f64,
    pub corpus_name: String,
    pub healthy: ClassRanges,
    pub dysphonic: ClassRanges,
    pub female_f0: Range,
    pub male_f0: Range,
}

impl SyntheticCorpusOptions {
    pub fn new(n_speakers: usize, seed: u64) -> Self {
        Self {
            n_speakers,
            seed,
            sample_rate: super::WORKING_RATE,
            duration: 1.0,
            corpus_name: "synthetic".into(),
            healthy: ClassRanges::healthy(),
            dysphonic: ClassRanges::dysphonic(),
            female_f0: (180.0, 240.0),
            male_f0: (90.0, 140.0),
        }
    }

    fn header(&self) -> Vec<String> {
        let fmt = |r: Range| format!("[{}, {}]", r.0, r.1);
        vec![
            format!(
                "synthetic phonation corpus: {} speakers, seed {}, {} Hz, {} s",
                self.n_speakers, self.seed, self.sample_rate, self.duration
            ),
            format!(
                "healthy: jitter {} shimmer {} hnr_db {}",
                fmt(self.healthy.jitter),
                fmt(self.healthy.shimmer),
                fmt(self.healthy.hnr_db)
            ),
            format!(
                "dysphonic: jitter {} shimmer {} hnr_db {}",
                fmt(self.dysphonic.jitter),
                fmt(self.dysphonic.shimmer),
                fmt(self.dysphonic.hnr_db)
            ),
            format!(
                "f0: female {} male {}",
                fmt(self.female_f0),
                fmt(self.male_f0)
            ),
        ]
    }
}

/// Per-recording synthesis parameters, written next to the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisRecord {
    pub speaker_id: String,
    pub params: PhonationParams,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const PARAMS_FILE: &str = "params.jsonl";

/// splitmix64 finalizer, used to derive independent per-item seeds.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(index.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn uniform(rng: &mut ChaCha8Rng, r: Range) -> f64 {
    if r.1 > r.0 {
        rng.gen_range(r.0..=r.1)
    } else {
        r.0
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Builds a synthetic corpus with the default class ranges.
pub fn build_synthetic_corpus(n_speakers: usize, out_dir: &Path, seed: u64) -> Result<Vec<ManifestRecord>> {
    build_synthetic_corpus_with(&SyntheticCorpusOptions::new(n_speakers, seed), out_dir)
}

/// Writes `n_speakers` single-session recordings, balanced over label and
/// gender, plus `manifest.jsonl` and `params.jsonl`. Record paths are
/// relative to `out_dir`.
pub fn build_synthetic_corpus_with(
    opts: &SyntheticCorpusOptions,
    out_dir: &Path,
) -> Result<Vec<ManifestRecord>> {
    if opts.n_speakers < 4 {
        return Err(Error::invalid("synthetic corpus needs at least 4 speakers"));
    }
    ensure_dir(&out_dir.join("audio"))?;
    let mut records = Vec::with_capacity(opts.n_speakers);
    let mut params_lines = String::new();
    for i in 0..opts.n_speakers {
        let label = if i % 2 == 0 { Label::Healthy } else { Label::Dysphonic };
        let gender = if (i / 2) % 2 == 0 { Gender::Female } else { Gender::Male };
        let item_seed = derive_seed(opts.seed, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(item_seed);
        let ranges = match label {
            Label::Healthy => opts.healthy,
            Label::Dysphonic => opts.dysphonic,
        };
        let f0_range = match gender {
            Gender::Female => opts.female_f0,
            Gender::Male => opts.male_f0,
        };
        let params = PhonationParams {
            f0: uniform(&mut rng, f0_range),
            jitter: uniform(&mut rng, ranges.jitter),
            shimmer: uniform(&mut rng, ranges.shimmer),
            hnr_db: uniform(&mut rng, ranges.hnr_db),
            duration: opts.duration,
            seed: rng.gen(),
        };
        let clip = synthesize_phonation(&params, opts.sample_rate)?;
        let speaker_id = format!("syn{i:04}");
        let rel: PathBuf = Path::new("audio").join(format!("{speaker_id}_s1.wav"));
        write_wav(&out_dir.join(&rel), &clip)?;
        records.push(ManifestRecord {
            speaker_id: speaker_id.clone(),
            session_id: "s1".into(),
            label,
            gender,
            corpus: opts.corpus_name.clone(),
            path: rel,
            sample_rate: opts.sample_rate,
            duration: clip.duration(),
        });
        params_lines.push_str(
            &serde_json::to_string(&SynthesisRecord { speaker_id, params }).expect("serializable"),
        );
        params_lines.push('\n');
    }
    save_manifest(&out_dir.join(MANIFEST_FILE), &opts.header(), &records)?;
    let pp = out_dir.join(PARAMS_FILE);
    std::fs::write(&pp, params_lines).map_err(|e| Error::io(&pp, e))?;
    Ok(records)
}

/// Reads `params.jsonl` written by the corpus builder.
pub fn load_synthesis_params(out_dir: &Path) -> Result<Vec<SynthesisRecord>> {
    let p = out_dir.join(PARAMS_FILE);
    let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Manifest {
                path: p.clone(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// A synthetic room/device impulse response: a direct path followed by an
/// exponentially decaying diffuse tail, coloured by a random device resonance.
pub fn synthesize_impulse_response(seed: u64, rate: u32) -> Result<AudioClip> {
    let fs = rate as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rt60: f64 = rng.gen_range(0.08..0.5);
    let n = ((rt60 * fs) as usize).max(16);
    let predelay = rng.gen_range(0..(0.004 * fs) as usize + 1);
    let mut ir = vec![0.0; n + predelay];
    ir[0] = 1.0;
    let tail_gain: f64 = rng.gen_range(0.2..0.8);
    // amplitude decays 60 dB over rt60
    let decay = (-6.907_755_278_982_137 / (rt60 * fs)).exp();
    let mut env = tail_gain;
    for v in ir.iter_mut().skip(predelay + 1) {
        let g: f64 = rng.sample(StandardNormal);
        *v += env * g * 0.3;
        env *= decay;
    }
    // device colouring: one resonance plus a first-order lowpass
    let freq: f64 = rng.gen_range(300.0..4000.0);
    let bw: f64 = rng.gen_range(200.0..1500.0);
    let mix: f64 = rng.gen_range(0.2..0.8);
    let r = (-std::f64::consts::PI * bw / fs).exp();
    let b1 = 2.0 * r * (2.0 * std::f64::consts::PI * freq / fs).cos();
    let b2 = -r * r;
    let a = 1.0 - b1 - b2;
    let lp: f64 = rng.gen_range(0.0..0.7);
    let (mut y1, mut y2, mut l1) = (0.0, 0.0, 0.0);
    for v in ir.iter_mut() {
        let res = a * *v + b1 * y1 + b2 * y2;
        y2 = y1;
        y1 = res;
        let colored = (1.0 - mix) * *v + mix * res;
        l1 = (1.0 - lp) * colored + lp * l1;
        *v = l1;
    }
    AudioClip::new(ir, rate)
}

/// Synthetic environmental noise of one of four textures (hum, pink-ish,
/// brown-ish, modulated band noise). Peak-normalized to 0.5.
pub fn synthesize_environment_noise(seed: u64, rate: u32, duration: f64) -> Result<AudioClip> {
    let fs = rate as f64;
    let n = ((duration * fs) as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kind = rng.gen_range(0..4);
    let mut white: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let out: Vec<f64> = match kind {
        0 => {
            let mains = if rng.gen_bool(0.5) { 50.0 } else { 60.0 };
            (0..n)
                .map(|i| {
                    let t = i as f64 / fs;
                    (1..6)
                        .map(|h| (2.0 * std::f64::consts::PI * mains * h as f64 * t).sin() / h as f64)
                        .sum::<f64>()
                        + 0.2 * white[i]
                })
                .collect()
        }
        1 => {
            // Paul Kellet's economy pink filter
            let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
            white
                .iter()
                .map(|&w| {
                    b0 = 0.99765 * b0 + w * 0.0990460;
                    b1 = 0.96300 * b1 + w * 0.2965164;
                    b2 = 0.57000 * b2 + w * 1.0526913;
                    b0 + b1 + b2 + w * 0.1848
                })
                .collect()
        }
        2 => {
            let mut acc = 0.0;
            white
                .iter()
                .map(|&w| {
                    acc = 0.995 * acc + 0.1 * w;
                    acc
                })
                .collect()
        }
        _ => {
            let freq: f64 = rng.gen_range(400.0..3000.0);
            let rate_hz: f64 = rng.gen_range(2.0..8.0);
            formant_like(&mut white, fs, freq, 600.0);
            white
                .iter()
                .enumerate()
                .map(|(i, &w)| {
                    let t = i as f64 / fs;
                    w * (0.6 + 0.4 * (2.0 * std::f64::consts::PI * rate_hz * t).sin())
                })
                .collect()
        }
    };
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let g = if peak > 0.0 { 0.5 / peak } else { 1.0 };
    AudioClip::new(out.into_iter().map(|v| v * g).collect(), rate)
}

fn formant_like(x: &mut [f64], fs: f64, freq: f64, bw: f64) {
    let r = (-std::f64::consts::PI * bw / fs).exp();
    let b1 = 2.0 * r * (2.0 * std::f64::consts::PI * freq / fs).cos();
    let b2 = -r * r;
    let (mut y1, mut y2) = (0.0, 0.0);
    for v in x.iter_mut() {
        let y = *v + b1 * y1 + b2 * y2;
        y2 = y1;
        y1 = y;
        *v = y;
    }
}

/// Writes `n_ir` impulse responses to `dir/ir` and `n_noise` environmental
/// noise files to `dir/noise`. Returns the two file lists in name order.
pub fn build_synthetic_banks(
    dir: &Path,
    n_ir: usize,
    n_noise: usize,
    noise_duration: f64,
    seed: u64,
) -> Result<(Vec<PathBuf>, Vec<PathBuf>)> {
    let ir_dir = dir.join("ir");
    let noise_dir = dir.join("noise");
    ensure_dir(&ir_dir)?;
    ensure_dir(&noise_dir)?;
    let mut irs = Vec::new();
    for i in 0..n_ir {
        let clip = synthesize_impulse_response(derive_seed(seed, i as u64), super::WORKING_RATE)?;
        let p = ir_dir.join(format!("ir{i:03}.wav"));
        write_wav(&p, &clip)?;
        irs.push(p);
    }
    let mut noises = Vec::new();
    for i in 0..n_noise {
        let clip = synthesize_environment_noise(
            derive_seed(seed ^ 0x6E6F_6973_65, i as u64),
            super::WORKING_RATE,
            noise_duration,
        )?;
        let p = noise_dir.join(format!("noise{i:03}.wav"));
        write_wav(&p, &clip)?;
        noises.push(p);
    }
    Ok((irs, noises))
}
