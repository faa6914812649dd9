//! Seed-driven data augmentation transforms: spectrogram time/frequency
//! masking with optional time warping, additive noise at a target SNR,
//! reverberation by impulse-response convolution, speed perturbation and
//! the speaker-label remap that treats perturbed speech as new speakers.
//!
//! Every transform is a pure function of (input, parameters, seed).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AugmentError {
    #[error("samples must be finite and sample_rate > 0")]
    InvalidWaveform,
    #[error("feature matrix must be non-empty and finite")]
    InvalidFeatureMatrix,
    #[error("mask width {width} exceeds axis length {axis}")]
    MaskWiderThanAxis { width: usize, axis: usize },
    #[error("signal or noise has zero power")]
    ZeroPowerInput,
    #[error("impulse response is empty")]
    EmptyImpulseResponse,
    #[error("sample rates differ: {a} vs {b}")]
    SampleRateMismatch { a: u32, b: u32 },
    #[error("speed factor must be > 0")]
    InvalidSpeedFactor,
    #[error("index out of range: {0}")]
    IndexOutOfRange(String),
}

/// Mono waveform with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self, AugmentError> {
        if sample_rate == 0 || samples.iter().any(|s| !s.is_finite()) {
            return Err(AugmentError::InvalidWaveform);
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }
}

/// T x F feature matrix (frames x mel bins), row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub frames: usize,
    pub bins: usize,
    pub values: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(frames: usize, bins: usize, values: Vec<f64>) -> Result<Self, AugmentError> {
        if frames == 0 || bins == 0 || values.len() != frames * bins
            || values.iter().any(|v| !v.is_finite())
        {
            return Err(AugmentError::InvalidFeatureMatrix);
        }
        Ok(Self {
            frames,
            bins,
            values,
        })
    }

    pub fn get(&self, t: usize, f: usize) -> f64 {
        self.values[t * self.bins + f]
    }

    fn set(&mut self, t: usize, f: usize, v: f64) {
        self.values[t * self.bins + f] = v;
    }
}

/// Time/frequency masking plus optional single-anchor time warping.
///
/// Mask starts and widths (width in `[0, max]`) come from the seeded
/// generator; masked cells are set to the per-utterance mean of the input.
/// When `warp_w > 0` the time axis is remapped piecewise-linearly around
/// one anchor shifted by up to `warp_w` frames (applied before masking).
pub fn specaug(
    feat: &FeatureMatrix,
    n_t_masks: usize,
    max_t: usize,
    n_f_masks: usize,
    max_f: usize,
    warp_w: usize,
    seed: u64,
) -> Result<FeatureMatrix, AugmentError> {
    if max_t > feat.frames {
        return Err(AugmentError::MaskWiderThanAxis {
            width: max_t,
            axis: feat.frames,
        });
    }
    if max_f > feat.bins {
        return Err(AugmentError::MaskWiderThanAxis {
            width: max_f,
            axis: feat.bins,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = if warp_w > 0 {
        time_warp(feat, warp_w, &mut rng)
    } else {
        feat.clone()
    };
    let mean = out.values.iter().sum::<f64>() / out.values.len() as f64;
    for _ in 0..n_t_masks {
        let width = rng.gen_range(0..=max_t);
        let start = rng.gen_range(0..=(out.frames - width));
        for t in start..start + width {
            for f in 0..out.bins {
                out.set(t, f, mean);
            }
        }
    }
    for _ in 0..n_f_masks {
        let width = rng.gen_range(0..=max_f);
        let start = rng.gen_range(0..=(out.bins - width));
        for f in start..start + width {
            for t in 0..out.frames {
                out.set(t, f, mean);
            }
        }
    }
    Ok(out)
}

/// Piecewise-linear time remap through a single shifted anchor, rows
/// interpolated linearly between source frames.
fn time_warp(feat: &FeatureMatrix, warp_w: usize, rng: &mut ChaCha8Rng) -> FeatureMatrix {
    let t_len = feat.frames;
    if t_len < 3 {
        return feat.clone();
    }
    let w = warp_w.min((t_len - 1) / 2);
    let anchor = rng.gen_range(w.max(1)..t_len - w.max(1)) as f64;
    let shift = rng.gen_range(-(w as i64)..=(w as i64)) as f64;
    let target = (anchor + shift).clamp(1.0, (t_len - 2) as f64);
    let last = (t_len - 1) as f64;
    let mut out = feat.clone();
    for t in 0..t_len {
        let td = t as f64;
        // inverse map: output position -> source position
        let src = if td <= target {
            td * anchor / target
        } else {
            anchor + (td - target) * (last - anchor) / (last - target)
        };
        let lo = src.floor() as usize;
        let hi = src.ceil() as usize;
        let frac = src - lo as f64;
        for f in 0..feat.bins {
            let v = feat.get(lo, f) * (1.0 - frac) + feat.get(hi.min(t_len - 1), f) * frac;
            out.set(t, f, v);
        }
    }
    out
}

fn mean_square(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64
}

/// Adds noise scaled so the mean-square power ratio hits `snr_db`.
/// Noise shorter than the signal is tiled; longer is truncated from 0.
pub fn mix_at_snr(signal: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform, AugmentError> {
    if signal.sample_rate != noise.sample_rate {
        return Err(AugmentError::SampleRateMismatch {
            a: signal.sample_rate,
            b: noise.sample_rate,
        });
    }
    if noise.samples.is_empty() {
        return Err(AugmentError::ZeroPowerInput);
    }
    let n = signal.samples.len();
    let tiled: Vec<f64> = (0..n).map(|i| noise.samples[i % noise.samples.len()]).collect();
    let p_signal = mean_square(&signal.samples);
    let p_noise = mean_square(&tiled);
    if p_signal == 0.0 || p_noise == 0.0 {
        return Err(AugmentError::ZeroPowerInput);
    }
    let gain = (p_signal / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt();
    let samples = signal
        .samples
        .iter()
        .zip(&tiled)
        .map(|(s, x)| s + gain * x)
        .collect();
    Ok(Waveform {
        samples,
        sample_rate: signal.sample_rate,
    })
}

/// Full linear convolution with the impulse response, truncated to the
/// signal length and peak-normalized to the input's peak amplitude.
pub fn reverberate(signal: &Waveform, rir: &Waveform) -> Result<Waveform, AugmentError> {
    if signal.sample_rate != rir.sample_rate {
        return Err(AugmentError::SampleRateMismatch {
            a: signal.sample_rate,
            b: rir.sample_rate,
        });
    }
    if rir.samples.is_empty() {
        return Err(AugmentError::EmptyImpulseResponse);
    }
    let n = signal.samples.len();
    let mut out = vec![0.0f64; n];
    for (i, o) in out.iter_mut().enumerate() {
        let kmax = i.min(rir.samples.len() - 1);
        let mut acc = 0.0;
        for k in 0..=kmax {
            acc += rir.samples[k] * signal.samples[i - k];
        }
        *o = acc;
    }
    let in_peak = signal.samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    let out_peak = out.iter().fold(0.0f64, |m, s| m.max(s.abs()));
    if out_peak > 0.0 && in_peak > 0.0 {
        let scale = in_peak / out_peak;
        for o in &mut out {
            *o *= scale;
        }
    }
    Ok(Waveform {
        samples: out,
        sample_rate: signal.sample_rate,
    })
}

/// Linear-interpolation resampling onto length `round(L / factor)`; the
/// sample rate is unchanged, so the duration change encodes the speed
/// change.
pub fn speed_perturb(signal: &Waveform, factor: f64) -> Result<Waveform, AugmentError> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(AugmentError::InvalidSpeedFactor);
    }
    let l = signal.samples.len();
    if l == 0 {
        return Ok(signal.clone());
    }
    let out_len = (l as f64 / factor).round() as usize;
    let mut samples = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let pos = (i as f64 * factor).min((l - 1) as f64);
        let lo = pos.floor() as usize;
        let hi = (lo + 1).min(l - 1);
        let frac = pos - lo as f64;
        samples.push(signal.samples[lo] * (1.0 - frac) + signal.samples[hi] * frac);
    }
    Ok(Waveform {
        samples,
        sample_rate: signal.sample_rate,
    })
}

/// Speed-perturbed copies count as new speakers: label space becomes 3N,
/// with `new = spk_index + factor_index * n_speakers`.
pub fn remap_speaker_label(
    spk_index: usize,
    factor_index: usize,
    n_speakers: usize,
) -> Result<usize, AugmentError> {
    if spk_index >= n_speakers {
        return Err(AugmentError::IndexOutOfRange(format!(
            "speaker {spk_index} >= {n_speakers}"
        )));
    }
    if factor_index > 2 {
        return Err(AugmentError::IndexOutOfRange(format!(
            "factor index {factor_index} > 2"
        )));
    }
    Ok(spk_index + factor_index * n_speakers)
}
