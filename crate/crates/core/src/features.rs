//! Log-magnitude STFT frontend and fixed-size patch extraction.

use std::io::Write;
use std::path::Path;

use rand::{Rng, RngCore};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::corpus::AudioClip;
use crate::error::{Error, Result};

/// Frames per model input patch.
pub const PATCH_FRAMES: usize = 24;
/// Window hop used when sliding over a whole recording at inference time.
pub const INFERENCE_HOP_FRAMES: usize = 6;
/// Magnitude offset inside the logarithm.
pub const LOG_EPSILON: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrogramConfig {
    pub window_length: usize,
    pub hop: usize,
    pub fft_length: usize,
    pub log_floor: f64,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        Self {
            window_length: 2048,
            hop: 512,
            fft_length: 2048,
            log_floor: LOG_EPSILON.ln(),
        }
    }
}

impl SpectrogramConfig {
    pub fn bins(&self) -> usize {
        self.fft_length / 2 + 1
    }

    pub fn validate(&self) -> Result<()> {
        if self.window_length == 0 || self.hop == 0 {
            return Err(Error::invalid("window length and hop must be positive"));
        }
        if self.fft_length < self.window_length {
            return Err(Error::invalid("fft_length must be >= window_length"));
        }
        if self.hop > self.window_length {
            return Err(Error::invalid("hop must be <= window_length"));
        }
        if !self.log_floor.is_finite() {
            return Err(Error::invalid("log_floor must be finite"));
        }
        Ok(())
    }
}

/// Row-major `frames x bins` log-magnitude values.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrogram {
    values: Vec<f64>,
    frames: usize,
    bins: usize,
}

impl Spectrogram {
    pub fn from_values(values: Vec<f64>, frames: usize, bins: usize) -> Result<Self> {
        if values.len() != frames * bins || frames == 0 {
            return Err(Error::Shape {
                expected: format!("{frames} x {bins}"),
                got: format!("{} values", values.len()),
            });
        }
        Ok(Self {
            values,
            frames,
            bins,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.values[t * self.bins..(t + 1) * self.bins]
    }

    /// `PATCH_FRAMES` consecutive frames from `start`, wrapping cyclically.
    fn patch_at(&self, start: usize) -> SpectrogramPatch {
        let mut values = Vec::with_capacity(PATCH_FRAMES * self.bins);
        for i in 0..PATCH_FRAMES {
            values.extend_from_slice(self.frame((start + i) % self.frames));
        }
        SpectrogramPatch {
            values,
            bins: self.bins,
        }
    }
}

/// Exactly `PATCH_FRAMES x bins` values; the model's input unit.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrogramPatch {
    values: Vec<f64>,
    bins: usize,
}

impl SpectrogramPatch {
    pub fn new(values: Vec<f64>, bins: usize) -> Result<Self> {
        if values.len() != PATCH_FRAMES * bins || bins == 0 {
            return Err(Error::Shape {
                expected: format!("{PATCH_FRAMES} x {bins}"),
                got: format!("{} values", values.len()),
            });
        }
        Ok(Self { values, bins })
    }

    pub fn frames(&self) -> usize {
        PATCH_FRAMES
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Tab-separated dump, one frame per line.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        for row in self.values.chunks(self.bins) {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            writeln!(out, "{}", line.join("\t")).expect("write to vec");
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

/// Log-magnitude spectrogram with a periodic Hann window and no centre
/// padding: `T = 1 + (len - window_length) / hop` frames.
pub fn spectrogram(clip: &AudioClip, cfg: &SpectrogramConfig) -> Result<Spectrogram> {
    cfg.validate()?;
    let x = clip.samples();
    if x.len() < cfg.window_length {
        return Err(Error::Insufficient(format!(
            "clip of {} samples is shorter than one {}-sample window",
            x.len(),
            cfg.window_length
        )));
    }
    let frames = 1 + (x.len() - cfg.window_length) / cfg.hop;
    let bins = cfg.bins();
    let window = hann(cfg.window_length);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(cfg.fft_length);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_length];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut values = Vec::with_capacity(frames * bins);
    for t in 0..frames {
        let start = t * cfg.hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < cfg.window_length {
                Complex::new(x[start + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        values.extend(
            buf[..bins]
                .iter()
                .map(|c| (c.norm() + LOG_EPSILON).ln().max(cfg.log_floor)),
        );
    }
    Ok(Spectrogram {
        values,
        frames,
        bins,
    })
}

/// A random contiguous `PATCH_FRAMES`-frame slice, start uniform over
/// `[0, T - PATCH_FRAMES]`. Shorter spectrograms are tiled cyclically.
pub fn random_crop(spec: &Spectrogram, rng: &mut dyn RngCore) -> SpectrogramPatch {
    if spec.frames <= PATCH_FRAMES {
        return spec.patch_at(0);
    }
    let start = rng.gen_range(0..=spec.frames - PATCH_FRAMES);
    spec.patch_at(start)
}

/// Window starts `0, hop, 2 hop, ...` while a full window fits; spectrograms
/// shorter than one patch give a single tiled window.
pub fn sliding_windows(spec: &Spectrogram, hop_frames: usize) -> Vec<SpectrogramPatch> {
    let hop = hop_frames.max(1);
    if spec.frames < PATCH_FRAMES {
        return vec![spec.patch_at(0)];
    }
    let count = (spec.frames - PATCH_FRAMES) / hop + 1;
    (0..count).map(|i| spec.patch_at(i * hop)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sine(freq: f64, n: usize, amp: f64) -> AudioClip {
        AudioClip::new(
            (0..n)
                .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 25_000.0).sin())
                .collect(),
            25_000,
        )
        .unwrap()
    }

    /// Spectrogram whose frame `t` is filled with the value `t`.
    fn ramp(frames: usize, bins: usize) -> Spectrogram {
        let v = (0..frames).flat_map(|t| std::iter::repeat(t as f64).take(bins)).collect();
        Spectrogram::from_values(v, frames, bins).unwrap()
    }

    #[test]
    fn frame_count_and_bins() {
        let cfg = SpectrogramConfig::default();
        let s = spectrogram(&sine(1000.0, 25_000, 0.5), &cfg).unwrap();
        assert_eq!(s.bins(), 1025);
        assert_eq!(s.frames(), 1 + (25_000 - 2048) / 512);
    }

    #[test]
    fn silence_hits_floor() {
        let cfg = SpectrogramConfig::default();
        let clip = AudioClip::new(vec![0.0; 4096], 25_000).unwrap();
        let s = spectrogram(&clip, &cfg).unwrap();
        assert!(s.values().iter().all(|&v| v == cfg.log_floor));
    }

    #[test]
    fn sine_peak_bin() {
        let s = spectrogram(&sine(1000.0, 12_000, 0.5), &SpectrogramConfig::default()).unwrap();
        for t in 0..s.frames() {
            let f = s.frame(t);
            let k = (0..f.len()).max_by(|&a, &b| f[a].total_cmp(&f[b])).unwrap();
            assert_eq!(k, 82);
        }
    }

    #[test]
    fn too_short_is_error() {
        let clip = AudioClip::new(vec![0.1; 2047], 25_000).unwrap();
        assert!(spectrogram(&clip, &SpectrogramConfig::default()).is_err());
    }

    #[test]
    fn doubling_amplitude_adds_log_two() {
        let cfg = SpectrogramConfig::default();
        let a = spectrogram(&sine(700.0, 6000, 0.25), &cfg).unwrap();
        let b = spectrogram(&sine(700.0, 6000, 0.5), &cfg).unwrap();
        for (x, y) in a.values().iter().zip(b.values()) {
            if *x > -5.0 {
                assert!((y - x - 2f64.ln()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn crop_whole_when_exact() {
        let s = ramp(24, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(random_crop(&s, &mut rng).values(), s.values());
    }

    #[test]
    fn crop_covers_both_endpoints() {
        let s = ramp(100, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut seen_first = false;
        let mut seen_last = false;
        for _ in 0..10_000 {
            let p = random_crop(&s, &mut rng);
            let start = p.values()[0] as usize;
            assert!(start <= 76);
            for i in 0..PATCH_FRAMES {
                assert_eq!(p.values()[i * 2], (start + i) as f64);
            }
            seen_first |= start == 0;
            seen_last |= start == 76;
        }
        assert!(seen_first && seen_last);
    }

    #[test]
    fn short_input_tiles() {
        let s = ramp(10, 2);
        let p = random_crop(&s, &mut ChaCha8Rng::seed_from_u64(2));
        assert_eq!(p.values().len(), 48);
        for i in 0..PATCH_FRAMES {
            assert_eq!(p.values()[i * 2], (i % 10) as f64);
        }
    }

    #[test]
    fn window_counts() {
        assert_eq!(sliding_windows(&ramp(24, 1), 6).len(), 1);
        let w = sliding_windows(&ramp(36, 1), 6);
        let starts: Vec<f64> = w.iter().map(|p| p.values()[0]).collect();
        assert_eq!(starts, [0.0, 6.0, 12.0]);
        let w = sliding_windows(&ramp(23, 1), 6);
        assert_eq!(w.len(), 1);
        assert_eq!(w[0].values()[23], 0.0);
    }

    proptest::proptest! {
        #[test]
        fn patches_always_full_size(frames in 1usize..80, hop in 1usize..10, seed in 0u64..100) {
            let s = ramp(frames, 4);
            for p in sliding_windows(&s, hop) {
                proptest::prop_assert_eq!(p.values().len(), PATCH_FRAMES * 4);
            }
            let p = random_crop(&s, &mut ChaCha8Rng::seed_from_u64(seed));
            proptest::prop_assert_eq!(p.values().len(), PATCH_FRAMES * 4);
        }
    }
}
