use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::corpus::{resample_by_ratio, rms, AudioClip};
use crate::error::{Error, Result};

fn next_pow2(n: usize) -> usize {
    n.next_power_of_two()
}

/// Full linear convolution via FFT.
pub fn fft_convolve(x: &[f64], h: &[f64]) -> Vec<f64> {
    let out_len = x.len() + h.len() - 1;
    let n = next_pow2(out_len);
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut a: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    a.resize(n, Complex::new(0.0, 0.0));
    let mut b: Vec<Complex<f64>> = h.iter().map(|&v| Complex::new(v, 0.0)).collect();
    b.resize(n, Complex::new(0.0, 0.0));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    let scale = 1.0 / n as f64;
    a[..out_len].iter().map(|c| c.re * scale).collect()
}

fn peak(x: &[f64]) -> f64 {
    x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Convolves `clip` with an impulse response, keeps the first `clip.len()`
/// samples and rescales the result to the dry clip's peak level.
pub fn convolve_ir(clip: &AudioClip, ir: &AudioClip) -> Result<AudioClip> {
    if clip.sample_rate() != ir.sample_rate() {
        return Err(Error::RateMismatch(clip.sample_rate(), ir.sample_rate()));
    }
    let mut wet = fft_convolve(clip.samples(), ir.samples());
    wet.truncate(clip.len());
    let dry_peak = clip.peak();
    let wet_peak = peak(&wet);
    if wet_peak > 0.0 {
        let g = dry_peak / wet_peak;
        wet.iter_mut().for_each(|v| *v *= g);
    }
    AudioClip::new(wet, clip.sample_rate())
}

/// Adds `noise` to `clip` at `snr_db`, where SNR is
/// `20 log10(rms(clip) / rms(scaled noise))` over the whole clip. The noise is
/// read from `offset`, wrapping around when it is shorter than the clip.
pub fn add_noise(clip: &AudioClip, noise: &AudioClip, snr_db: f64, offset: usize) -> Result<AudioClip> {
    if !snr_db.is_finite() {
        return Err(Error::invalid("snr_db must be finite"));
    }
    add_noise_samples(clip, noise.samples(), snr_db, offset)
}

pub(crate) fn add_noise_samples(
    clip: &AudioClip,
    noise: &[f64],
    snr_db: f64,
    offset: usize,
) -> Result<AudioClip> {
    let signal_rms = clip.rms();
    if signal_rms == 0.0 {
        return Err(Error::Undefined("SNR of a silent clip".into()));
    }
    let n = clip.len();
    let segment: Vec<f64> = (0..n).map(|i| noise[(offset + i) % noise.len()]).collect();
    let noise_rms = rms(&segment);
    if noise_rms == 0.0 {
        return Err(Error::Undefined("SNR against silent noise".into()));
    }
    let g = signal_rms / (noise_rms * 10f64.powf(snr_db / 20.0));
    let out = clip
        .samples()
        .iter()
        .zip(&segment)
        .map(|(s, e)| s + g * e)
        .collect();
    AudioClip::new(out, clip.sample_rate())
}

const PV_FRAME: usize = 1024;
const PV_HOP: usize = 256;

fn hann(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
        .collect()
}

fn wrap_phase(p: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    p - two_pi * ((p + std::f64::consts::PI) / two_pi).floor()
}

/// Phase-vocoder time stretch; the output has `round(len * factor)` samples.
pub fn time_stretch(x: &[f64], factor: f64) -> Vec<f64> {
    let n = PV_FRAME;
    let hop = PV_HOP;
    let pad = n / 2;
    let mut padded = vec![0.0; x.len() + 2 * pad];
    padded[pad..pad + x.len()].copy_from_slice(x);
    let window = hann(n);
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let bins = n / 2 + 1;

    let n_frames = 1 + padded.len().saturating_sub(n) / hop;
    // (magnitude, phase) per analysis frame, plus a silent frame at the end
    let mut mags: Vec<Vec<f64>> = Vec::with_capacity(n_frames + 1);
    let mut phases: Vec<Vec<f64>> = Vec::with_capacity(n_frames + 1);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    for f in 0..n_frames {
        let start = f * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(padded.get(start + i).copied().unwrap_or(0.0) * window[i], 0.0);
        }
        fwd.process(&mut buf);
        mags.push(buf[..bins].iter().map(|c| c.norm()).collect());
        phases.push(buf[..bins].iter().map(|c| c.arg()).collect());
    }
    mags.push(vec![0.0; bins]);
    phases.push(vec![0.0; bins]);

    let rate = 1.0 / factor;
    let advance: Vec<f64> = (0..bins)
        .map(|k| 2.0 * std::f64::consts::PI * k as f64 * hop as f64 / n as f64)
        .collect();
    let mut phase: Vec<f64> = phases[0].clone();
    let out_len = (x.len() as f64 * factor).round() as usize;
    let out_frames = out_len / hop + 1 + n / hop;
    let mut out = vec![0.0; (out_frames - 1) * hop + n];
    let mut norm = vec![0.0; out.len()];
    for of in 0..out_frames {
        let t = of as f64 * rate;
        let left = (t.floor() as usize).min(n_frames - 1);
        let alpha = t - t.floor();
        let (ma, mb) = (&mags[left], &mags[left + 1]);
        let (pa, pb) = (&phases[left], &phases[left + 1]);
        let mut spec: Vec<Complex<f64>> = (0..bins)
            .map(|k| Complex::from_polar((1.0 - alpha) * ma[k] + alpha * mb[k], phase[k]))
            .collect();
        for k in 0..bins {
            let d = wrap_phase(pb[k] - pa[k] - advance[k]);
            phase[k] += advance[k] + d;
        }
        // Hermitian completion
        for k in (1..n - bins + 1).rev() {
            let c = spec[k].conj();
            spec.push(c);
        }
        inv.process(&mut spec);
        let start = of * hop;
        for i in 0..n {
            out[start + i] += spec[i].re / n as f64 * window[i];
            norm[start + i] += window[i] * window[i];
        }
    }
    (0..out_len)
        .map(|i| {
            let j = i + pad;
            let w = norm[j];
            if w > 1e-8 {
                out[j] / w
            } else {
                0.0
            }
        })
        .collect()
}

/// Shifts pitch by `cents` keeping the duration: phase-vocoder stretch by the
/// pitch ratio, then band-limited resampling back to the original length.
pub fn pitch_shift(clip: &AudioClip, cents: f64) -> Result<AudioClip> {
    if !(cents.abs() <= 1200.0) {
        return Err(Error::invalid(format!("pitch shift of {cents} cents exceeds one octave")));
    }
    if cents == 0.0 {
        return Ok(clip.clone());
    }
    let ratio = 2f64.powf(cents / 1200.0);
    let stretched = time_stretch(clip.samples(), ratio);
    let mut shifted = resample_by_ratio(&stretched, 1.0 / ratio);
    shifted.resize(clip.len(), 0.0);
    AudioClip::new(shifted, clip.sample_rate())
}
