//! Audio front end: short-time framing, MFCC extraction, delta trajectories
//! and the 75-dimensional per-utterance statistics vector.
//!
//! The per-utterance vector stacks, in order: the mean of the 25 cepstral
//! coefficients over time (entries 0-24), their standard deviation (25-49)
//! and the standard deviation of the second-order delta trajectory (50-74).
//! Standard deviations are population standard deviations so two-frame
//! utterances are well defined.
//!
//! Pipeline conventions (all exposed through [`MfccConfig`]): HTK mel scale
//! `m = 2595 log10(1 + f/700)` spanning 0 Hz to Nyquist, pre-emphasis 0.97
//! applied within each frame, Hamming window, magnitude spectrum of a
//! zero-padded DFT, log with a small floor, orthonormal DCT-II keeping
//! coefficients 0..=24 (c0 included).

use crate::error::{Error, Result};
use std::f64::consts::PI;

/// Number of entries in the per-utterance feature vector.
pub const AUDIO_FEATURE_DIM: usize = 75;

/// Mono waveform with samples in [-1, 1].
#[derive(Debug, Clone)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("waveform has no samples".into()));
        }
        if sample_rate == 0 {
            return Err(Error::InvalidInput("sample rate must be positive".into()));
        }
        if !samples.iter().all(|s| s.is_finite() && s.abs() <= 1.0) {
            return Err(Error::InvalidInput(
                "waveform samples must be finite and within [-1, 1]".into(),
            ));
        }
        Ok(Waveform {
            samples,
            sample_rate,
        })
    }

    pub fn samples(&self) -> &[f64] {
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

/// MFCC front-end configuration.
#[derive(Debug, Clone)]
pub struct MfccConfig {
    /// Analysis window length in milliseconds.
    pub window_ms: f64,
    /// Frame shift in milliseconds.
    pub shift_ms: f64,
    /// Cepstral coefficients kept per frame (c0 included).
    pub n_coeffs: usize,
    /// Triangular mel filters.
    pub n_mel_filters: usize,
    /// DFT length; window is zero-padded up to this.
    pub fft_size: usize,
    /// Within-frame pre-emphasis coefficient.
    pub pre_emphasis: f64,
    /// Floor applied before the log of filterbank energies.
    pub log_floor: f64,
    /// Half-width of the delta regression window.
    pub delta_window: usize,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            window_ms: 20.0,
            shift_ms: 10.0,
            n_coeffs: 25,
            n_mel_filters: 40,
            fft_size: 512,
            pre_emphasis: 0.97,
            log_floor: 1e-10,
            delta_window: 2,
        }
    }
}

impl MfccConfig {
    pub fn window_samples(&self, sample_rate: u32) -> usize {
        (self.window_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    pub fn shift_samples(&self, sample_rate: u32) -> usize {
        (self.shift_ms * sample_rate as f64 / 1000.0).round() as usize
    }

    fn validate(&self, sample_rate: u32) -> Result<()> {
        let w = self.window_samples(sample_rate);
        let s = self.shift_samples(sample_rate);
        if w == 0 || s == 0 {
            return Err(Error::InvalidInput(
                "window and shift must be at least one sample".into(),
            ));
        }
        if w > self.fft_size {
            return Err(Error::InvalidInput(format!(
                "window of {w} samples exceeds fft_size {}",
                self.fft_size
            )));
        }
        if self.n_coeffs > self.n_mel_filters {
            return Err(Error::InvalidInput(format!(
                "n_coeffs {} exceeds n_mel_filters {}",
                self.n_coeffs, self.n_mel_filters
            )));
        }
        if self.n_coeffs == 0 || self.n_mel_filters == 0 {
            return Err(Error::InvalidInput("coefficient counts must be positive".into()));
        }
        if !self.fft_size.is_power_of_two() {
            return Err(Error::InvalidInput(format!(
                "fft_size {} must be a power of two",
                self.fft_size
            )));
        }
        if self.log_floor <= 0.0 {
            return Err(Error::InvalidInput("log floor must be positive".into()));
        }
        Ok(())
    }
}

/// 75-dimensional per-utterance feature vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatureVector {
    values: [f64; AUDIO_FEATURE_DIM],
}

impl AudioFeatureVector {
    pub fn new(values: [f64; AUDIO_FEATURE_DIM]) -> Result<Self> {
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::Numerical("audio feature vector not finite".into()));
        }
        if values[25..].iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidInput(
                "standard-deviation entries must be non-negative".into(),
            ));
        }
        Ok(AudioFeatureVector { values })
    }

    pub fn values(&self) -> &[f64; AUDIO_FEATURE_DIM] {
        &self.values
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// Slices a waveform into overlapping frames. Frame `i` starts at sample
/// `i * shift`; only complete windows are emitted, so the frame count is
/// `floor((len - window) / shift) + 1`.
pub fn frame_signal(w: &Waveform, cfg: &MfccConfig) -> Result<Vec<Vec<f64>>> {
    cfg.validate(w.sample_rate())?;
    let window = cfg.window_samples(w.sample_rate());
    let shift = cfg.shift_samples(w.sample_rate());
    if w.len() < window {
        return Err(Error::InvalidInput(format!(
            "waveform of {} samples is shorter than one {window}-sample window",
            w.len()
        )));
    }
    let n_frames = (w.len() - window) / shift + 1;
    let mut frames = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let start = i * shift;
        frames.push(w.samples()[start..start + window].to_vec());
    }
    Ok(frames)
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Weight of a triangular filter with the given corner frequencies, evaluated
/// at frequency `f`. Peaks at exactly 1 at the center.
pub fn triangle_weight(f: f64, left: f64, center: f64, right: f64) -> f64 {
    if f <= left || f >= right {
        0.0
    } else if f <= center {
        (f - left) / (center - left)
    } else {
        (right - f) / (right - center)
    }
}

/// Triangular mel filterbank over the non-negative DFT bins.
///
/// Filters are spaced uniformly on the mel scale from 0 Hz to Nyquist and
/// evaluated at each bin's exact frequency, so every row is non-negative with
/// values in [0, 1].
pub fn mel_filterbank(cfg: &MfccConfig, sample_rate: u32) -> Vec<Vec<f64>> {
    let n_bins = cfg.fft_size / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let mel_max = hz_to_mel(nyquist);
    let n = cfg.n_mel_filters;
    let edges: Vec<f64> = (0..n + 2)
        .map(|i| mel_to_hz(mel_max * i as f64 / (n + 1) as f64))
        .collect();
    let mut bank = Vec::with_capacity(n);
    for m in 0..n {
        let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
        let row: Vec<f64> = (0..n_bins)
            .map(|k| {
                let f = k as f64 * sample_rate as f64 / cfg.fft_size as f64;
                triangle_weight(f, left, center, right)
            })
            .collect();
        bank.push(row);
    }
    bank
}

/// Twiddle factors for a direct DFT: `k * n` wraps modulo the transform
/// length, so one table of `fft_size` angles serves every (bin, sample) pair.
struct Twiddles {
    cos: Vec<f64>,
    sin: Vec<f64>,
}

impl Twiddles {
    fn new(fft_size: usize) -> Self {
        let step = 2.0 * PI / fft_size as f64;
        Twiddles {
            cos: (0..fft_size).map(|j| (step * j as f64).cos()).collect(),
            sin: (0..fft_size).map(|j| (step * j as f64).sin()).collect(),
        }
    }
}

/// Magnitude spectrum of the zero-padded real input over the non-negative
/// frequency bins. Direct table-driven DFT; window lengths here are a few
/// hundred samples, so O(N^2) with cached twiddles is plenty.
fn magnitude_spectrum(frame: &[f64], fft_size: usize, tw: &Twiddles) -> Vec<f64> {
    let n_bins = fft_size / 2 + 1;
    let mask = fft_size - 1;
    let mut mags = Vec::with_capacity(n_bins);
    for k in 0..n_bins {
        let mut re = 0.0;
        let mut im = 0.0;
        let mut j = 0usize;
        for &x in frame {
            re += x * tw.cos[j];
            im -= x * tw.sin[j];
            j = (j + k) & mask;
        }
        mags.push((re * re + im * im).sqrt());
    }
    mags
}

/// Orthonormal DCT-II, returning the first `n_out` coefficients.
fn dct_ii_orthonormal(input: &[f64], n_out: usize) -> Vec<f64> {
    let n = input.len();
    let mut out = Vec::with_capacity(n_out);
    for k in 0..n_out {
        let mut sum = 0.0;
        for (i, &x) in input.iter().enumerate() {
            sum += x * (PI * (i as f64 + 0.5) * k as f64 / n as f64).cos();
        }
        let scale = if k == 0 {
            (1.0 / n as f64).sqrt()
        } else {
            (2.0 / n as f64).sqrt()
        };
        out.push(scale * sum);
    }
    out
}

fn hamming(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

/// Pre-emphasis confined to the frame: `y[0] = x[0]`, `y[n] = x[n] - a x[n-1]`.
/// Keeping it within the frame makes identical frames produce identical rows.
fn pre_emphasize(frame: &[f64], a: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(frame.len());
    out.push(frame[0]);
    for i in 1..frame.len() {
        out.push(frame[i] - a * frame[i - 1]);
    }
    out
}

/// MFCC trajectory of a waveform, one row of `cfg.n_coeffs` coefficients per
/// frame.
pub fn mfcc_frames(w: &Waveform, cfg: &MfccConfig) -> Result<Vec<Vec<f64>>> {
    let frames = frame_signal(w, cfg)?;
    let bank = mel_filterbank(cfg, w.sample_rate());
    let window = hamming(frames[0].len());
    let twiddles = Twiddles::new(cfg.fft_size);
    let mut rows = Vec::with_capacity(frames.len());
    for frame in &frames {
        let mut x = pre_emphasize(frame, cfg.pre_emphasis);
        for (v, w) in x.iter_mut().zip(&window) {
            *v *= w;
        }
        let mags = magnitude_spectrum(&x, cfg.fft_size, &twiddles);
        let log_energies: Vec<f64> = bank
            .iter()
            .map(|row| {
                let e: f64 = row.iter().zip(&mags).map(|(w, m)| w * m).sum();
                e.max(cfg.log_floor).ln()
            })
            .collect();
        rows.push(dct_ii_orthonormal(&log_energies, cfg.n_coeffs));
    }
    Ok(rows)
}

/// Regression deltas over a coefficient trajectory:
/// `d_t = sum_k k (c_{t+k} - c_{t-k}) / (2 sum_k k^2)` with out-of-range
/// frames replicated from the edges.
pub fn delta_features(coeffs: &[Vec<f64>], half_width: usize) -> Vec<Vec<f64>> {
    let t_max = coeffs.len();
    if t_max == 0 {
        return Vec::new();
    }
    let dim = coeffs[0].len();
    let denom: f64 = 2.0 * (1..=half_width).map(|k| (k * k) as f64).sum::<f64>();
    let clamp = |t: isize| -> usize { t.clamp(0, t_max as isize - 1) as usize };
    let mut out = Vec::with_capacity(t_max);
    for t in 0..t_max as isize {
        let mut row = vec![0.0; dim];
        for k in 1..=half_width as isize {
            let ahead = &coeffs[clamp(t + k)];
            let behind = &coeffs[clamp(t - k)];
            for ((r, a), b) in row.iter_mut().zip(ahead).zip(behind) {
                *r += k as f64 * (a - b);
            }
        }
        for r in &mut row {
            *r /= denom;
        }
        out.push(row);
    }
    out
}

/// Collapses a coefficient trajectory into the 75-dimensional utterance
/// vector: mean, standard deviation, and standard deviation of the
/// second-order deltas. Needs at least two frames.
pub fn summarize_utterance(coeffs: &[Vec<f64>], cfg: &MfccConfig) -> Result<AudioFeatureVector> {
    if coeffs.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "need at least 2 frames to summarize an utterance, got {}",
            coeffs.len()
        )));
    }
    let dim = coeffs[0].len();
    if dim != cfg.n_coeffs {
        return Err(Error::InvalidInput(format!(
            "coefficient rows have {dim} entries, config expects {}",
            cfg.n_coeffs
        )));
    }
    if 3 * dim != AUDIO_FEATURE_DIM {
        return Err(Error::InvalidInput(format!(
            "utterance summary needs {} coefficients per frame to reach {AUDIO_FEATURE_DIM} features",
            AUDIO_FEATURE_DIM / 3
        )));
    }
    let delta2 = delta_features(&delta_features(coeffs, cfg.delta_window), cfg.delta_window);
    let (mean, std) = column_mean_std(coeffs);
    let (_, std_d2) = column_mean_std(&delta2);
    let mut values = [0.0; AUDIO_FEATURE_DIM];
    values[..25].copy_from_slice(&mean);
    values[25..50].copy_from_slice(&std);
    values[50..].copy_from_slice(&std_d2);
    AudioFeatureVector::new(values)
}

/// Per-column mean and population standard deviation.
fn column_mean_std(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = rows.len() as f64;
    let dim = rows[0].len();
    let mut mean = vec![0.0; dim];
    for row in rows {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![0.0; dim];
    for row in rows {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    let std = var.iter().map(|s| (s / n).sqrt()).collect();
    (mean, std)
}

/// Full front end: waveform in, 75-dimensional utterance vector out.
pub fn utterance_features(w: &Waveform, cfg: &MfccConfig) -> Result<AudioFeatureVector> {
    let coeffs = mfcc_frames(w, cfg)?;
    summarize_utterance(&coeffs, cfg)
}
