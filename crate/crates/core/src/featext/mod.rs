//! Audio front end: framing, Hamming window, FFT, mel filterbank, DCT and
//! per-utterance normalisation.
//!
//! The pipeline converts 16 kHz mono PCM into T x 40 MFCC matrices: 400
//! sample windows advanced by 160 samples, 512-point magnitude spectra, 40
//! triangular mel filters spanning 0 to 8000 Hz, natural log with a floor,
//! a DCT-II keeping all 40 coefficients, then cepstral mean and variance
//! normalisation per utterance. No pre-emphasis and no delta features.

pub mod didf;
pub mod fft;
pub mod wav;

use crate::error::{DidError, Result};
use crate::nnet::tensor::Tensor2;

/// Required input sampling rate in Hz.
pub const SAMPLE_RATE: u32 = 16_000;
/// Analysis window length in samples (25 ms at 16 kHz).
pub const FRAME_LEN: usize = 400;
/// Window advance in samples (10 ms at 16 kHz).
pub const FRAME_HOP: usize = 160;
/// FFT size: next power of two above the window length.
pub const FFT_SIZE: usize = 512;
/// Number of mel filters and retained cepstral coefficients.
pub const NUM_COEFFS: usize = 40;
/// Upper edge of the filterbank in Hz.
pub const MEL_HIGH_HZ: f64 = 8_000.0;
/// Floor applied to filterbank energies before the logarithm.
pub const LOG_FLOOR: f64 = 1e-10;
/// Smallest standard deviation used as a CMVN divisor.
pub const CMVN_SIGMA_FLOOR: f64 = 1e-8;

/// A mono 16 kHz PCM clip.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    samples: Vec<i16>,
    sample_rate: u32,
}

impl AudioClip {
    /// Wraps samples, rejecting any rate other than 16 kHz.
    pub fn new(samples: Vec<i16>, sample_rate: u32) -> Result<Self> {
        if sample_rate != SAMPLE_RATE {
            return Err(DidError::Config(format!(
                "sample rate {sample_rate} Hz unsupported, expected {SAMPLE_RATE}"
            )));
        }
        Ok(AudioClip {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[i16] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// An utterance's feature matrix: T frames x 40 coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub utt_id: String,
    frames: Tensor2,
}

impl FeatureMatrix {
    /// Validates the 40-column shape and finiteness.
    pub fn new(utt_id: impl Into<String>, frames: Tensor2) -> Result<Self> {
        let utt_id = utt_id.into();
        if frames.cols() != NUM_COEFFS {
            return Err(DidError::Shape(format!(
                "utterance '{utt_id}': {} feature columns, expected {NUM_COEFFS}",
                frames.cols()
            )));
        }
        if !frames.all_finite() {
            return Err(DidError::Shape(format!(
                "utterance '{utt_id}': non-finite feature value"
            )));
        }
        Ok(FeatureMatrix { utt_id, frames })
    }

    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn frames(&self) -> &Tensor2 {
        &self.frames
    }

    pub fn into_frames(self) -> Tensor2 {
        self.frames
    }
}

/// Number of analysis frames a clip of `n` samples yields, if any.
pub fn frame_count(n: usize) -> Option<usize> {
    if n < FRAME_LEN {
        None
    } else {
        Some((n - FRAME_LEN) / FRAME_HOP + 1)
    }
}

/// Cuts a clip into overlapping 400-sample frames scaled to [-1, 1).
/// No padding: trailing samples that do not fill a window are dropped.
pub fn frame_signal(clip: &AudioClip, utt_id: &str) -> Result<Vec<Vec<f64>>> {
    let t = frame_count(clip.len()).ok_or_else(|| DidError::ClipTooShort {
        utt_id: utt_id.to_string(),
        got: clip.len(),
        min: FRAME_LEN,
    })?;
    let scale = 1.0 / 32768.0;
    Ok((0..t)
        .map(|i| {
            clip.samples[i * FRAME_HOP..i * FRAME_HOP + FRAME_LEN]
                .iter()
                .map(|&s| f64::from(s) * scale)
                .collect()
        })
        .collect())
}

/// Hamming window of length `n`.
pub fn hamming(n: usize) -> Vec<f64> {
    let denom = (n - 1) as f64;
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / denom).cos())
        .collect()
}

/// Converts frequency in Hz to the mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

/// Inverse of [`hz_to_mel`].
pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// A triangular mel filterbank evaluated at FFT bin frequencies.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    /// One weight vector per filter over the `FFT_SIZE/2 + 1` bins.
    filters: Vec<Vec<f64>>,
    /// Filter centre frequencies in Hz.
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    /// The pipeline's 40-filter bank over 0 to 8000 Hz.
    pub fn speech_default() -> Self {
        MelFilterbank::build(NUM_COEFFS, FFT_SIZE, SAMPLE_RATE as f64, 0.0, MEL_HIGH_HZ)
    }

    fn build(n_filters: usize, n_fft: usize, sample_rate: f64, low_hz: f64, high_hz: f64) -> Self {
        // n_filters triangles need n_filters + 2 edge points, equally
        // spaced on the mel scale.
        let low_mel = hz_to_mel(low_hz);
        let high_mel = hz_to_mel(high_hz);
        let edges_hz: Vec<f64> = (0..n_filters + 2)
            .map(|j| {
                mel_to_hz(low_mel + (high_mel - low_mel) * j as f64 / (n_filters + 1) as f64)
            })
            .collect();

        let n_bins = n_fft / 2 + 1;
        let bin_hz = sample_rate / n_fft as f64;
        let mut filters = Vec::with_capacity(n_filters);
        for j in 1..=n_filters {
            let (lo, mid, hi) = (edges_hz[j - 1], edges_hz[j], edges_hz[j + 1]);
            let weights: Vec<f64> = (0..n_bins)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    if f <= lo || f >= hi {
                        0.0
                    } else if f <= mid {
                        (f - lo) / (mid - lo)
                    } else {
                        (hi - f) / (hi - mid)
                    }
                })
                .collect();
            filters.push(weights);
        }
        MelFilterbank {
            filters,
            centers_hz: edges_hz[1..=n_filters].to_vec(),
        }
    }

    pub fn n_filters(&self) -> usize {
        self.filters.len()
    }

    pub fn filters(&self) -> &[Vec<f64>] {
        &self.filters
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    /// Filterbank energies for one magnitude spectrum.
    pub fn apply(&self, magnitude: &[f64]) -> Vec<f64> {
        self.filters
            .iter()
            .map(|f| f.iter().zip(magnitude).map(|(w, m)| w * m).sum())
            .collect()
    }
}

/// Unnormalised DCT-II: `out[k] = sum_n x[n] * cos(pi * k * (n + 0.5) / N)`.
pub fn dct_ii(x: &[f64]) -> Vec<f64> {
    let n = x.len();
    (0..n)
        .map(|k| {
            x.iter()
                .enumerate()
                .map(|(i, &v)| {
                    v * (std::f64::consts::PI * k as f64 * (i as f64 + 0.5) / n as f64).cos()
                })
                .sum()
        })
        .collect()
}

/// MFCC of pre-cut frames; output is not yet normalised.
pub fn mfcc(frames: &[Vec<f64>], utt_id: &str) -> Result<FeatureMatrix> {
    if frames.is_empty() {
        return Err(DidError::ClipTooShort {
            utt_id: utt_id.to_string(),
            got: 0,
            min: FRAME_LEN,
        });
    }
    let window = hamming(FRAME_LEN);
    let bank = MelFilterbank::speech_default();
    let mut rows = Vec::with_capacity(frames.len());
    for frame in frames {
        if frame.len() != FRAME_LEN {
            return Err(DidError::Shape(format!(
                "utterance '{utt_id}': frame of {} samples, expected {FRAME_LEN}",
                frame.len()
            )));
        }
        let windowed: Vec<f64> = frame.iter().zip(&window).map(|(s, w)| s * w).collect();
        let magnitude = fft::magnitude_spectrum(&windowed, FFT_SIZE);
        let energies = bank.apply(&magnitude);
        let logs: Vec<f64> = energies.iter().map(|e| e.max(LOG_FLOOR).ln()).collect();
        rows.push(dct_ii(&logs));
    }
    FeatureMatrix::new(utt_id, Tensor2::from_rows(&rows)?)
}

/// Per-utterance, per-coefficient mean and variance normalisation.
/// Columns end up zero-mean and unit-variance; a constant column becomes
/// all zeros through the sigma floor.
pub fn cmvn(features: &mut FeatureMatrix) {
    let t = features.frames.rows();
    let c = features.frames.cols();
    let tf = t as f64;
    for j in 0..c {
        let mut mean = 0.0;
        for i in 0..t {
            mean += features.frames.get(i, j);
        }
        mean /= tf;
        let mut var = 0.0;
        for i in 0..t {
            let d = features.frames.get(i, j) - mean;
            var += d * d;
        }
        var /= tf;
        let sigma = var.sqrt().max(CMVN_SIGMA_FLOOR);
        for i in 0..t {
            let v = (features.frames.get(i, j) - mean) / sigma;
            features.frames.set(i, j, v);
        }
    }
}

/// Full pipeline: framing, MFCC, CMVN.
pub fn extract(clip: &AudioClip, utt_id: &str) -> Result<FeatureMatrix> {
    let frames = frame_signal(clip, utt_id)?;
    let mut features = mfcc(&frames, utt_id)?;
    cmvn(&mut features);
    Ok(features)
}
