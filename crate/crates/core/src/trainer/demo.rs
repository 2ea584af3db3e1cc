//! Synthetic demonstrations: key-to-finger assignment, fingertip targets
//! with minimum-jerk hand transitions, per-frame IK and expert residuals.

use thiserror::Error;

use crate::env::KeyboardGeometry;
use crate::keys::KeyFrame;
use crate::kinematics::{
    forward_kinematics, ik_solve, ChainSpec, IkOptions, KinematicsError, Vec3, FINGERS_PER_HAND, NUM_FINGERTIPS,
    NUM_JOINTS,
};
use crate::midi::GoalTrajectory;

/// Keys below this index go to the left hand.
pub const HAND_SPLIT_KEY: usize = 44;
/// Fingertip height while pressing (the key surface is at 0).
pub const PRESS_Z_M: f64 = -0.008;
/// Fingertip height one frame before a press and one frame after a release (the key surface).
pub const READY_Z_M: f64 = 0.0;
/// Height gained per frame when moving between [`READY_Z_M`] and [`HOVER_Z_M`].
pub const LIFT_STEP_M: f64 = 0.007;
/// Fingertip height of idle fingers.
pub const HOVER_Z_M: f64 = 0.02;
/// Smoothing factor of the expert residual low-pass filter.
pub const RESIDUAL_SMOOTHING: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum DemoError {
    #[error("frame {frame} has {keys} active keys, at most {max} can be played")]
    TooManyKeys { frame: usize, keys: usize, max: usize },
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

/// Expert data for one song.
#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    pub goal: GoalTrajectory,
    /// Per frame, ten fingertip targets (left hand first).
    pub fingertip_targets: Vec<Vec<Vec3>>,
    /// Per frame, the key each finger is assigned to press.
    pub assignments: Vec<[Option<usize>; NUM_FINGERTIPS]>,
    /// Per frame, the IK solution for the fingertip targets.
    pub q_nominal: Vec<Vec<f64>>,
    /// Per frame, the low-pass filtered joint change to the next frame.
    pub expert_residuals: Vec<Vec<f64>>,
    /// Per frame, the IK residual norm in metres.
    pub ik_residuals_m: Vec<f64>,
}

impl Demonstration {
    pub fn len(&self) -> usize {
        self.goal.len()
    }

    pub fn is_empty(&self) -> bool {
        self.goal.is_empty()
    }
}

/// Minimum-jerk profile `10s^3 - 15s^4 + 6s^5` on `[0, 1]`.
pub fn min_jerk(s: f64) -> f64 {
    let s = s.clamp(0.0, 1.0);
    s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)
}

/// Splits the keys of a frame between the hands, moving keys nearest the
/// split to the other hand when one hand has more than five.
fn split_hands(frame: KeyFrame, index: usize) -> Result<[Vec<usize>; 2], DemoError> {
    let keys: Vec<usize> = frame.keys().collect();
    if keys.len() > NUM_FINGERTIPS {
        return Err(DemoError::TooManyKeys {
            frame: index,
            keys: keys.len(),
            max: NUM_FINGERTIPS,
        });
    }
    let n_left = keys.iter().filter(|&&k| k < HAND_SPLIT_KEY).count();
    let n_left = n_left.clamp(keys.len().saturating_sub(FINGERS_PER_HAND), FINGERS_PER_HAND.min(keys.len()));
    Ok([keys[..n_left].to_vec(), keys[n_left..].to_vec()])
}

/// Hand placement (key under finger 0) and finger for each of `keys`
/// (sorted), preferring exact alignment, then the smallest hand move.
fn place_hand(keys: &[usize], prev: f64) -> (f64, Vec<usize>) {
    let lo = keys[0] as i64 - (FINGERS_PER_HAND as i64 - 1);
    let hi = keys[keys.len() - 1] as i64;
    let mut best: Option<((usize, f64), i64, Vec<usize>)> = None;
    for p in lo..=hi {
        let mut fingers = Vec::with_capacity(keys.len());
        let mut next_free = 0i64;
        let mut worst = 0usize;
        for (i, &k) in keys.iter().enumerate() {
            let remaining = (keys.len() - i - 1) as i64;
            let ideal = k as i64 - p;
            let f = ideal.clamp(next_free, FINGERS_PER_HAND as i64 - 1 - remaining);
            worst = worst.max(ideal.abs_diff(f) as usize);
            fingers.push(f as usize);
            next_free = f + 1;
        }
        let cost = (worst, (p as f64 - prev).abs());
        let better = match &best {
            None => true,
            Some((c, _, _)) => cost.0 < c.0 || (cost.0 == c.0 && cost.1 < c.1),
        };
        if better {
            best = Some((cost, p, fingers));
        }
    }
    let (_, p, fingers) = best.expect("non-empty key list");
    (p as f64, fingers)
}

/// Key under finger 0 of each hand in the default chain.
fn rest_placement(spec: &ChainSpec, geometry: &KeyboardGeometry) -> [f64; 2] {
    let w = geometry.key_width_m;
    let at = |h: usize| (spec.hands[h].origin[0] - geometry.left_edge()) / w - 0.5 - 2.0;
    [at(0), at(1)]
}

/// Height of a finger `d` frames away from its nearest press.
fn approach_height(d: usize) -> f64 {
    (READY_Z_M + (d.max(1) - 1) as f64 * LIFT_STEP_M).min(HOVER_Z_M)
}

fn slot_x(p: f64, finger: usize, geometry: &KeyboardGeometry) -> f64 {
    geometry.left_edge() + (p + finger as f64 + 0.5) * geometry.key_width_m
}

/// Builds the demonstration for a goal trajectory.
///
/// Each frame's keys are split between the hands (left below key 44), and
/// each hand is placed so its fingers sit over its keys, assigning keys to
/// the nearest free fingers in order. Between frames where a hand plays,
/// its placement follows a minimum-jerk path. Pressing fingers target
/// [`PRESS_Z_M`] at the key centre. Around each press the finger descends
/// from [`HOVER_Z_M`] to [`READY_Z_M`] over the key, and lifts back the same
/// way after release; otherwise idle fingers hover over their slot.
pub fn synthesize_demo(
    traj: &GoalTrajectory,
    spec: &ChainSpec,
    geometry: &KeyboardGeometry,
    ik: &IkOptions,
) -> Result<Demonstration, DemoError> {
    let n = traj.len();
    let mut assignments = vec![[None; NUM_FINGERTIPS]; n];
    // Hand placement at frames where the hand plays.
    let mut anchors: [Vec<(usize, f64)>; 2] = [Vec::new(), Vec::new()];
    let mut prev = rest_placement(spec, geometry);
    for (t, frame) in traj.frames.iter().enumerate() {
        let hands = split_hands(*frame, t)?;
        for (h, keys) in hands.iter().enumerate() {
            if keys.is_empty() {
                continue;
            }
            let (p, fingers) = place_hand(keys, prev[h]);
            for (&k, &f) in keys.iter().zip(&fingers) {
                assignments[t][h * FINGERS_PER_HAND + f] = Some(k);
            }
            anchors[h].push((t, p));
            prev[h] = p;
        }
    }

    let rest = rest_placement(spec, geometry);
    let placement = |h: usize, t: usize| -> f64 {
        let a = &anchors[h];
        match a.binary_search_by_key(&t, |&(f, _)| f) {
            Ok(i) => a[i].1,
            Err(i) => {
                let (t0, p0) = if i == 0 { (0, rest[h]) } else { a[i - 1] };
                match a.get(i) {
                    Some(&(t1, p1)) if t1 > t0 => p0 + (p1 - p0) * min_jerk((t - t0) as f64 / (t1 - t0) as f64),
                    Some(&(_, p1)) => p1,
                    None => p0,
                }
            }
        }
    };

    let mut fingertip_targets = Vec::with_capacity(n);
    for t in 0..n {
        let mut tips = Vec::with_capacity(NUM_FINGERTIPS);
        for h in 0..2 {
            let p = placement(h, t);
            let hand = &spec.hands[h];
            for f in 0..FINGERS_PER_HAND {
                let j = h * FINGERS_PER_HAND + f;
                let y = hand.origin[1] + hand.fingers[f].base_offset[1];
                let (x, z) = match assignments[t][j] {
                    Some(k) => (geometry.key_center_x(k), PRESS_Z_M),
                    None => {
                        let next = (t + 1..n).find_map(|u| assignments[u][j].map(|k| (u - t, k)));
                        let prev = (0..t).rev().find_map(|u| assignments[u][j].map(|k| (t - u, k)));
                        let z_next = next.map_or(HOVER_Z_M, |(d, _)| approach_height(d));
                        let z_prev = prev.map_or(HOVER_Z_M, |(d, _)| approach_height(d));
                        match (next, prev) {
                            (Some((_, k)), _) if z_next < HOVER_Z_M && z_next <= z_prev => (geometry.key_center_x(k), z_next),
                            (_, Some((_, k))) if z_prev < HOVER_Z_M => (geometry.key_center_x(k), z_prev),
                            _ => (slot_x(p, f, geometry), HOVER_Z_M),
                        }
                    }
                };
                tips.push(Vec3::new(x, y, z));
            }
        }
        fingertip_targets.push(tips);
    }

    let mut q = spec.rest_pose();
    let mut q_nominal = Vec::with_capacity(n);
    let mut ik_residuals_m = Vec::with_capacity(n);
    for targets in &fingertip_targets {
        let sol = ik_solve(targets, &q, spec, ik)?;
        q = sol.q_nominal;
        ik_residuals_m.push(sol.residual_norm_m);
        q_nominal.push(q.clone());
    }
    let expert_residuals = expert_residuals(&q_nominal);
    Ok(Demonstration {
        goal: traj.clone(),
        fingertip_targets,
        assignments,
        q_nominal,
        expert_residuals,
        ik_residuals_m,
    })
}

/// `r_t = a * r_{t-1} + (1 - a) * (q_{t+1} - q_t)`, with zero change after the last frame.
pub fn expert_residuals(q: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(q.len());
    let mut r = vec![0.0; NUM_JOINTS];
    for t in 0..q.len() {
        for (j, rj) in r.iter_mut().enumerate() {
            let d = q.get(t + 1).map_or(0.0, |next| next[j] - q[t][j]);
            *rj = RESIDUAL_SMOOTHING * *rj + (1.0 - RESIDUAL_SMOOTHING) * d;
        }
        out.push(r.clone());
    }
    out
}

/// Fingertip positions of the rest pose.
pub fn rest_fingertips(spec: &ChainSpec) -> Vec<Vec3> {
    forward_kinematics(&spec.rest_pose(), spec).expect("rest pose has the right length")
}
