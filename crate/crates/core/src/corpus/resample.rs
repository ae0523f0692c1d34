//! Band-limited resampling with a Kaiser-windowed sinc kernel.

use std::sync::OnceLock;

use super::audio::AudioClip;
use crate::error::{Error, Result};

/// Common working rate for every corpus.
pub const WORKING_RATE: u32 = 25_000;

const ZERO_CROSSINGS: usize = 32;
const TABLE_RES: usize = 512;
const KAISER_BETA: f64 = 9.0;
/// Fraction of the output Nyquist band kept; the remainder is the transition band.
const ROLLOFF: f64 = 0.95;

fn bessel_i0(x: f64) -> f64 {
    let mut sum = 1.0;
    let mut term = 1.0;
    let q = x * x / 4.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn kernel_table() -> &'static [f64] {
    static TABLE: OnceLock<Vec<f64>> = OnceLock::new();
    TABLE.get_or_init(|| {
        let n = ZERO_CROSSINGS * TABLE_RES + 2;
        let norm = bessel_i0(KAISER_BETA);
        (0..n)
            .map(|i| {
                let s = i as f64 / TABLE_RES as f64;
                if s >= ZERO_CROSSINGS as f64 {
                    return 0.0;
                }
                let sinc = if s == 0.0 {
                    1.0
                } else {
                    (std::f64::consts::PI * s).sin() / (std::f64::consts::PI * s)
                };
                let u = s / ZERO_CROSSINGS as f64;
                sinc * bessel_i0(KAISER_BETA * (1.0 - u * u).max(0.0).sqrt()) / norm
            })
            .collect()
    })
}

/// Resamples a raw sample sequence by `ratio` (= output rate / input rate).
/// The output has `round(len * ratio)` samples.
pub fn resample_by_ratio(x: &[f64], ratio: f64) -> Vec<f64> {
    let out_len = (x.len() as f64 * ratio).round() as usize;
    // cutoff in cycles per input sample
    let fc = 0.5 * ratio.min(1.0) * ROLLOFF;
    let scale = 2.0 * fc;
    let half_width = ZERO_CROSSINGS as f64 / scale;
    let n_in = x.len() as isize;
    let table = kernel_table();
    let last = table.len() - 2;
    let step = scale * TABLE_RES as f64;
    (0..out_len)
        .map(|m| {
            let t = m as f64 / ratio;
            let lo = ((t - half_width).ceil() as isize).max(0);
            let hi = ((t + half_width).floor() as isize).min(n_in - 1);
            // table position of tap `n`, decreasing by `step` per tap
            let mut pos = (t - lo as f64) * step;
            let mut acc = 0.0;
            for &v in &x[lo as usize..(hi + 1).max(lo) as usize] {
                let a = pos.abs();
                let i = (a as usize).min(last);
                let frac = a - i as f64;
                acc += v * (table[i] + (table[i + 1] - table[i]) * frac);
                pos -= step;
            }
            acc * scale
        })
        .collect()
}

/// Resamples a clip to `target_rate`. A clip already at the target rate is
/// returned unchanged.
pub fn resample(clip: &AudioClip, target_rate: u32) -> Result<AudioClip> {
    if target_rate == 0 {
        return Err(Error::invalid("target sample rate must be positive"));
    }
    if clip.sample_rate() == target_rate {
        return Ok(clip.clone());
    }
    let ratio = target_rate as f64 / clip.sample_rate() as f64;
    let mut out = resample_by_ratio(clip.samples(), ratio);
    if out.is_empty() {
        out.push(0.0);
    }
    AudioClip::new(out, target_rate)
}
