//! MFCC features: 25 ms Hann frames every 10 ms, 512-point magnitude
//! spectrum, 26 triangular mel filters over 0-8 kHz (HTK mel scale), natural
//! log with a 1e-10 floor, orthonormal DCT-II, coefficients 0..13.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::RewardError;
use super::SAMPLE_RATE_HZ;

pub const N_MFCC: usize = 13;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MfccConfig {
    pub sample_rate_hz: u32,
    pub window: usize,
    pub hop: usize,
    pub n_fft: usize,
    pub n_mels: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub n_coeffs: usize,
    pub log_floor: f64,
}

impl Default for MfccConfig {
    fn default() -> Self {
        MfccConfig {
            sample_rate_hz: SAMPLE_RATE_HZ,
            window: 400,
            hop: 160,
            n_fft: 512,
            n_mels: 26,
            f_min: 0.0,
            f_max: 8000.0,
            n_coeffs: N_MFCC,
            log_floor: 1e-10,
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AudioFeatures {
    /// One row of `n_coeffs` coefficients per frame.
    pub mfcc: Vec<Vec<f64>>,
    pub sample_rate_hz: u32,
}

impl AudioFeatures {
    pub fn frames(&self) -> usize {
        self.mfcc.len()
    }

    /// Row-major flattening, zero-padded to `frames` rows.
    pub fn flatten_padded(&self, frames: usize) -> Vec<f64> {
        let width = self.mfcc.first().map_or(N_MFCC, |r| r.len());
        let mut out: Vec<f64> = self.mfcc.iter().flatten().copied().collect();
        out.resize(frames * width, 0.0);
        out
    }

    /// Whitespace-separated matrix, one frame per line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for row in &self.mfcc {
            let line: Vec<String> = row.iter().map(|v| format!("{v:.9e}")).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }
}

/// Reusable MFCC pipeline with precomputed window, filterbank and DCT.
pub struct MfccExtractor {
    config: MfccConfig,
    window: Vec<f64>,
    /// `n_mels x (n_fft/2 + 1)` filter weights.
    filterbank: Vec<Vec<f64>>,
    /// `n_coeffs x n_mels` DCT-II basis.
    dct: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

impl MfccExtractor {
    pub fn new(config: MfccConfig) -> Self {
        let n = config.window;
        // Periodic Hann.
        let window = (0..n).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos()).collect();

        let n_bins = config.n_fft / 2 + 1;
        let mel_lo = hz_to_mel(config.f_min);
        let mel_hi = hz_to_mel(config.f_max);
        let edges: Vec<f64> = (0..config.n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (config.n_mels + 1) as f64))
            .collect();
        let bin_hz = config.sample_rate_hz as f64 / config.n_fft as f64;
        let filterbank = (0..config.n_mels)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..n_bins)
                    .map(|b| {
                        let f = b as f64 * bin_hz;
                        let up = (f - lo) / (mid - lo);
                        let down = (hi - f) / (hi - mid);
                        up.min(down).max(0.0)
                    })
                    .collect()
            })
            .collect();

        let nm = config.n_mels as f64;
        let dct = (0..config.n_coeffs)
            .map(|k| {
                let scale = if k == 0 { (1.0 / nm).sqrt() } else { (2.0 / nm).sqrt() };
                (0..config.n_mels)
                    .map(|j| scale * (PI * k as f64 * (2.0 * j as f64 + 1.0) / (2.0 * nm)).cos())
                    .collect()
            })
            .collect();

        let fft = FftPlanner::new().plan_fft_forward(config.n_fft);
        MfccExtractor {
            config,
            window,
            filterbank,
            dct,
            fft,
        }
    }

    pub fn config(&self) -> &MfccConfig {
        &self.config
    }

    /// Frame count for a waveform of `samples` samples.
    pub fn frame_count(&self, samples: usize) -> usize {
        if samples < self.config.window {
            0
        } else {
            1 + (samples - self.config.window) / self.config.hop
        }
    }

    pub fn extract(&self, waveform: &[f64]) -> Result<AudioFeatures, RewardError> {
        let c = &self.config;
        if waveform.len() < c.window {
            return Err(RewardError::TooShort { got: waveform.len(), need: c.window });
        }
        let n_bins = c.n_fft / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); c.n_fft];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut mags = vec![0.0; n_bins];
        let mut logmel = vec![0.0; c.n_mels];
        let mut rows = Vec::with_capacity(self.frame_count(waveform.len()));
        for f in 0..self.frame_count(waveform.len()) {
            let start = f * c.hop;
            for (i, slot) in buf.iter_mut().enumerate() {
                let v = if i < c.window { waveform[start + i] * self.window[i] } else { 0.0 };
                *slot = Complex::new(v, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (m, b) in mags.iter_mut().zip(&buf) {
                *m = b.norm();
            }
            for (out, filt) in logmel.iter_mut().zip(&self.filterbank) {
                let e: f64 = filt.iter().zip(&mags).map(|(w, m)| w * m).sum();
                *out = e.max(c.log_floor).ln();
            }
            rows.push(
                self.dct
                    .iter()
                    .map(|basis| basis.iter().zip(&logmel).map(|(a, b)| a * b).sum())
                    .collect(),
            );
        }
        Ok(AudioFeatures {
            mfcc: rows,
            sample_rate_hz: c.sample_rate_hz,
        })
    }
}

/// MFCCs with the default configuration.
pub fn extract_mfcc(waveform: &[f64]) -> Result<AudioFeatures, RewardError> {
    MfccExtractor::new(MfccConfig::default()).extract(waveform)
}
