//! Frame-level press metrics and onset-timing statistics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keys::KeyFrame;

/// Largest onset offset, in frames, still matched to a goal onset.
pub const ONSET_MATCH_WINDOW: usize = 5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("frame count mismatch: {goal} goal vs {pressed} pressed")]
    LengthMismatch { goal: usize, pressed: usize },
}

/// Micro-averaged precision, recall and F1 over (frame, key) pairs.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Prf {
    /// Scores from confusion counts; every `0/0` is taken as 0.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        Prf {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
        }
    }
}

pub fn frame_prf(goal: &[KeyFrame], pressed: &[KeyFrame]) -> Result<Prf, MetricsError> {
    if goal.len() != pressed.len() {
        return Err(MetricsError::LengthMismatch {
            goal: goal.len(),
            pressed: pressed.len(),
        });
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&g, &p) in goal.iter().zip(pressed) {
        tp += g.intersection(p).count();
        fp += p.difference(g).count();
        fn_ += g.difference(p).count();
    }
    Ok(Prf::from_counts(tp, fp, fn_))
}

/// `(frame, key)` for every key that is down in a frame but not in the one before.
pub fn onsets(frames: &[KeyFrame]) -> Vec<(usize, usize)> {
    let mut prev = KeyFrame::EMPTY;
    let mut out = Vec::new();
    for (f, &frame) in frames.iter().enumerate() {
        out.extend(frame.difference(prev).keys().map(|k| (f, k)));
        prev = frame;
    }
    out
}

/// Goal onsets paired with the nearest played onset of the same key within
/// [`ONSET_MATCH_WINDOW`] frames, as `(goal_frame, played_frame)`.
pub fn matched_onsets(goal: &[KeyFrame], pressed: &[KeyFrame]) -> Vec<(usize, usize)> {
    let played = onsets(pressed);
    onsets(goal)
        .into_iter()
        .filter_map(|(gf, k)| {
            played
                .iter()
                .filter(|&&(_, pk)| pk == k)
                .map(|&(pf, _)| pf)
                .filter(|&pf| pf.abs_diff(gf) <= ONSET_MATCH_WINDOW)
                .min_by_key(|&pf| (pf.abs_diff(gf), pf))
                .map(|pf| (gf, pf))
        })
        .collect()
}

/// Mean absolute onset offset of matched onsets, in seconds; 0 when none match.
pub fn onset_jitter_s(goal: &[KeyFrame], pressed: &[KeyFrame], control_rate_hz: f64) -> f64 {
    let m = matched_onsets(goal, pressed);
    if m.is_empty() {
        return 0.0;
    }
    m.iter().map(|&(g, p)| g.abs_diff(p) as f64).sum::<f64>() / m.len() as f64 / control_rate_hz
}

/// `|played span / goal span - 1|` between the first and last matched onsets;
/// 0 when fewer than two distinct goal onset frames match.
pub fn tempo_deviation(goal: &[KeyFrame], pressed: &[KeyFrame]) -> f64 {
    let m = matched_onsets(goal, pressed);
    let (Some(first), Some(last)) = (m.iter().min_by_key(|p| p.0), m.iter().max_by_key(|p| p.0)) else {
        return 0.0;
    };
    let goal_span = (last.0 - first.0) as f64;
    if goal_span == 0.0 {
        return 0.0;
    }
    let played_span = last.1 as f64 - first.1 as f64;
    (played_span / goal_span - 1.0).abs()
}
