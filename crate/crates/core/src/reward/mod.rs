//! Composite reward: task accuracy, audio similarity, fingertip style and
//! the per-hand oracle terms, combined as
//! `R = alpha*R_task + beta*R_audio + gamma*R_style + delta*(R_left + R_right)`.

mod audio;
mod mfcc;

pub use audio::{synthesize_audio, write_wav, SAMPLE_RATE_HZ};
pub use mfcc::{extract_mfcc, AudioFeatures, MfccConfig, MfccExtractor, N_MFCC};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keys::KeyFrame;
use crate::kinematics::Vec3;

#[derive(Debug, Error, PartialEq)]
pub enum RewardError {
    #[error("waveform has {got} samples, need at least {need}")]
    TooShort { got: usize, need: usize },
    #[error("trajectory length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("non-finite reward input: {0}")]
    NonFiniteInput(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub w_press: f64,
    pub w_fp: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        RewardWeights {
            alpha: 1.0,
            beta: 0.5,
            gamma: 0.25,
            delta: 0.5,
            w_press: 1.0,
            w_fp: 0.5,
        }
    }
}

impl RewardWeights {
    pub fn validate(&self) -> Result<(), RewardError> {
        let all = [self.alpha, self.beta, self.gamma, self.delta, self.w_press, self.w_fp];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(RewardError::NonFiniteInput("weights must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_task: f64,
    pub r_audio: f64,
    pub r_style: f64,
    pub r_llm_left: f64,
    pub r_llm_right: f64,
    pub r_total: f64,
}

impl RewardBreakdown {
    pub fn task_only(r_task: f64, weights: &RewardWeights) -> Self {
        RewardBreakdown {
            r_task,
            r_total: weights.alpha * r_task,
            ..Default::default()
        }
    }
}

/// Missed fraction of goal keys and false-press count for one frame.
pub fn press_errors(goal: KeyFrame, pressed: KeyFrame) -> (f64, usize) {
    let missed = goal.difference(pressed).count() as f64;
    let error = missed / goal.count().max(1) as f64;
    (error, pressed.difference(goal).count())
}

/// `w_press * (1 - error) - w_fp * FP` for one frame.
pub fn task_reward(goal: KeyFrame, pressed: KeyFrame, w_press: f64, w_fp: f64) -> f64 {
    let (error, fp) = press_errors(goal, pressed);
    w_press * (1.0 - error) - w_fp * fp as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AudioRewardMode {
    #[default]
    Cosine,
    NegL2,
}

impl std::str::FromStr for AudioRewardMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "cosine" => Ok(AudioRewardMode::Cosine),
            "neg_l2" => Ok(AudioRewardMode::NegL2),
            other => Err(format!("unknown audio reward mode `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AudioScore {
    pub value: f64,
    /// Frames of zero padding appended to the shorter feature matrix.
    pub padded_frames: usize,
    /// Set when cosine similarity was undefined (a zero vector) and 0 was returned.
    pub degenerate: bool,
}

/// Similarity of two MFCC matrices, each flattened to a single vector.
pub fn audio_reward(target: &AudioFeatures, robot: &AudioFeatures, mode: AudioRewardMode) -> AudioScore {
    let n = target.frames().max(robot.frames());
    let padded_frames = n - target.frames().min(robot.frames());
    let a = target.flatten_padded(n);
    let b = robot.flatten_padded(n);
    match mode {
        AudioRewardMode::Cosine => {
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                AudioScore { value: 0.0, padded_frames, degenerate: true }
            } else {
                AudioScore {
                    value: (dot / (na * nb)).clamp(-1.0, 1.0),
                    padded_frames,
                    degenerate: false,
                }
            }
        }
        AudioRewardMode::NegL2 => AudioScore {
            value: -a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>(),
            padded_frames,
            degenerate: false,
        },
    }
}

/// Negative summed squared distance between two fingertip trajectories.
pub fn style_reward(robot: &[Vec<Vec3>], human: &[Vec<Vec3>]) -> Result<f64, RewardError> {
    if robot.len() != human.len() {
        return Err(RewardError::LengthMismatch(robot.len(), human.len()));
    }
    let mut total = 0.0;
    for (r, h) in robot.iter().zip(human) {
        if r.len() != h.len() {
            return Err(RewardError::LengthMismatch(r.len(), h.len()));
        }
        total += r.iter().zip(h).map(|(a, b)| (a - b).norm_squared()).sum::<f64>();
    }
    Ok(-total)
}

/// Episode-level reward terms other than the oracle.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardParts {
    pub task: f64,
    pub audio: f64,
    pub style: f64,
}

pub fn composite_reward(
    parts: RewardParts,
    weights: &RewardWeights,
    oracle: (f64, f64),
) -> Result<RewardBreakdown, RewardError> {
    let named = [
        (parts.task, "task"),
        (parts.audio, "audio"),
        (parts.style, "style"),
        (oracle.0, "oracle left"),
        (oracle.1, "oracle right"),
    ];
    if let Some((_, name)) = named.iter().find(|(v, _)| !v.is_finite()) {
        return Err(RewardError::NonFiniteInput(name));
    }
    let r_total = weights.alpha * parts.task
        + weights.beta * parts.audio
        + weights.gamma * parts.style
        + weights.delta * (oracle.0 + oracle.1);
    Ok(RewardBreakdown {
        r_task: parts.task,
        r_audio: parts.audio,
        r_style: parts.style,
        r_llm_left: oracle.0,
        r_llm_right: oracle.1,
        r_total,
    })
}
