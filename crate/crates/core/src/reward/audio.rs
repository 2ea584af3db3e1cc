//! Additive sine synthesis of key-state frames and WAV export.

use std::f64::consts::PI;
use std::path::Path;

use crate::keys::{pitch_for_key, KeyFrame, NUM_KEYS};

pub const SAMPLE_RATE_HZ: u32 = 16_000;
/// Linear fade applied at every key on and off, in seconds.
const FADE_S: f64 = 0.005;

fn key_frequency(key: usize) -> f64 {
    440.0 * 2f64.powf((pitch_for_key(key) as f64 - 69.0) / 12.0)
}

/// Renders key-state frames at `control_rate_hz` into a 16 kHz waveform.
///
/// Every active key contributes a phase-continuous sine at its equal-tempered
/// frequency, scaled by `1 / max(1, keys active in the frame)` and faded in
/// and out over 5 ms at the edges of each contiguous run.
pub fn synthesize_audio(frames: &[KeyFrame], control_rate_hz: f64) -> Vec<f64> {
    let sr = SAMPLE_RATE_HZ as f64;
    let spf = (sr / control_rate_hz).round() as usize;
    let fade = (FADE_S * sr).round();
    let mut out = vec![0.0; frames.len() * spf];
    for key in 0..NUM_KEYS {
        let omega = 2.0 * PI * key_frequency(key) / sr;
        let mut i = 0;
        while i < frames.len() {
            if !frames[i].is_set(key) {
                i += 1;
                continue;
            }
            let start_frame = i;
            while i < frames.len() && frames[i].is_set(key) {
                i += 1;
            }
            let (s, e) = (start_frame * spf, i * spf);
            for n in s..e {
                let ramp = ((n - s) as f64 / fade).min((e - n) as f64 / fade).min(1.0);
                let amp = 1.0 / frames[n / spf].count().max(1) as f64;
                out[n] += amp * ramp * (omega * n as f64).sin();
            }
        }
    }
    out
}

/// Writes a mono 16-bit PCM WAV file.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<(), hound::Error> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in samples {
        writer.write_sample((s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16)?;
    }
    writer.finalize()
}
