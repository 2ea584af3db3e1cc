//! Kinematic piano environment: 88 uniformly spaced keys, two hands and a
//! geometric contact model.
//!
//! The key surface lies at `z = 0`. Key `k` occupies the half-open cell
//! `(left_edge + k*w, left_edge + (k+1)*w]` along x, so a fingertip sitting
//! exactly on a boundary belongs to the lower key. A key counts as pressed
//! when a fingertip inside its cell penetrates at least
//! `press_threshold * key_press_depth` below the surface.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keys::{KeyFrame, NUM_KEYS};
use crate::kinematics::{forward_kinematics, ChainSpec, KinematicsError, Vec3, JOINTS_PER_HAND, NUM_JOINTS};
use crate::midi::{goal_window, GoalObservation, GoalTrajectory, DEFAULT_CONTROL_RATE_HZ, DEFAULT_LOOKAHEAD};
use crate::reward::{task_reward, RewardBreakdown, RewardWeights};

pub const DEFAULT_KEY_WIDTH_M: f64 = 0.0235;
pub const DEFAULT_KEY_DEPTH_M: f64 = 0.01;
pub const DEFAULT_PRESS_THRESHOLD: f64 = 0.5;
/// Maximum joint change per control frame (rad, or m for the base joints).
pub const DEFAULT_RATE_LIMIT: f64 = 0.3;

#[derive(Debug, Error, PartialEq)]
pub enum EnvError {
    #[error("goal trajectory has no frames")]
    EmptySong,
    #[error("action has {got} entries, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("episode is over after {0} frames")]
    EpisodeOver(usize),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KeyboardGeometry {
    pub key_width_m: f64,
    pub key_press_depth_m: f64,
    /// Fraction of the press depth a fingertip must reach to register.
    pub press_threshold: f64,
}

impl Default for KeyboardGeometry {
    fn default() -> Self {
        KeyboardGeometry {
            key_width_m: DEFAULT_KEY_WIDTH_M,
            key_press_depth_m: DEFAULT_KEY_DEPTH_M,
            press_threshold: DEFAULT_PRESS_THRESHOLD,
        }
    }
}

impl KeyboardGeometry {
    pub fn left_edge(&self) -> f64 {
        -(NUM_KEYS as f64) * self.key_width_m / 2.0
    }

    pub fn key_center_x(&self, k: usize) -> f64 {
        self.left_edge() + (k as f64 + 0.5) * self.key_width_m
    }

    /// Key whose half-open cell contains `x`.
    pub fn key_at(&self, x: f64) -> Option<usize> {
        let u = (x - self.left_edge()) / self.key_width_m;
        let r = u.round();
        let upper = if (u - r).abs() < 1e-9 { r } else { u.ceil() };
        let k = upper - 1.0;
        (k >= 0.0 && k < NUM_KEYS as f64).then_some(k as usize)
    }

    /// Penetration below the key surface, clamped to the key travel.
    pub fn penetration(&self, z: f64) -> f64 {
        (-z).clamp(0.0, self.key_press_depth_m)
    }
}

/// Keys pressed by the given fingertips; at most one key per fingertip.
pub fn detect_presses(fingertips: &[Vec3], geometry: &KeyboardGeometry) -> KeyFrame {
    let threshold = geometry.press_threshold * geometry.key_press_depth_m;
    let mut pressed = KeyFrame::EMPTY;
    for tip in fingertips {
        if -tip.z >= threshold {
            if let Some(k) = geometry.key_at(tip.x) {
                pressed.set(k);
            }
        }
    }
    pressed
}

/// Per-key press depth: deepest fingertip penetration inside each key cell.
pub fn press_depths(fingertips: &[Vec3], geometry: &KeyboardGeometry) -> Vec<f64> {
    let mut depths = vec![0.0; NUM_KEYS];
    for tip in fingertips {
        if let Some(k) = geometry.key_at(tip.x) {
            depths[k] = f64::max(depths[k], geometry.penetration(tip.z));
        }
    }
    depths
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnvConfig {
    pub geometry: KeyboardGeometry,
    pub chain: ChainSpec,
    pub rate_limit: f64,
    pub control_rate_hz: f64,
    pub lookahead: usize,
    pub reward_weights: RewardWeights,
}

impl Default for EnvConfig {
    fn default() -> Self {
        let geometry = KeyboardGeometry::default();
        EnvConfig {
            chain: ChainSpec::for_key_width(geometry.key_width_m),
            geometry,
            rate_limit: DEFAULT_RATE_LIMIT,
            control_rate_hz: DEFAULT_CONTROL_RATE_HZ,
            lookahead: DEFAULT_LOOKAHEAD,
            reward_weights: RewardWeights::default(),
        }
    }
}

/// Proprioceptive state of both hands.
#[derive(Debug, Clone, PartialEq)]
pub struct HandState {
    pub joint_angles: Vec<f64>,
    pub fingertips: Vec<Vec3>,
    pub press_depths: Vec<f64>,
}

impl HandState {
    fn at(q: Vec<f64>, config: &EnvConfig) -> Result<Self, EnvError> {
        let fingertips = forward_kinematics(&q, &config.chain)?;
        let press_depths = press_depths(&fingertips, &config.geometry);
        Ok(HandState {
            joint_angles: q,
            fingertips,
            press_depths,
        })
    }

    pub fn hand_joints(&self, hand: usize) -> &[f64] {
        &self.joint_angles[hand * JOINTS_PER_HAND..(hand + 1) * JOINTS_PER_HAND]
    }

    /// Joint angles followed by flattened fingertip coordinates.
    pub fn proprio_vector(&self) -> Vec<f64> {
        let mut v = self.joint_angles.clone();
        for t in &self.fingertips {
            v.extend_from_slice(&[t.x, t.y, t.z]);
        }
        v
    }
}

/// Length of [`HandState::proprio_vector`].
pub const PROPRIO_DIM: usize = NUM_JOINTS + 3 * crate::kinematics::NUM_FINGERTIPS;

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub hand_state: HandState,
    pub goal: GoalObservation,
    pub frame_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepInfo {
    pub frame_index: usize,
    pub goal_keys: KeyFrame,
    pub pressed_keys: KeyFrame,
    pub false_presses: usize,
    /// Per-frame reward; only the task term is available at frame granularity.
    pub reward: RewardBreakdown,
}

/// One episode over a goal trajectory.
#[derive(Debug, Clone)]
pub struct PianoEnv {
    config: EnvConfig,
    traj: GoalTrajectory,
    state: HandState,
    frame_index: usize,
}

impl PianoEnv {
    /// Starts an episode with both hands at the rest pose.
    pub fn reset(traj: GoalTrajectory, config: EnvConfig) -> Result<(Self, Observation), EnvError> {
        if traj.is_empty() {
            return Err(EnvError::EmptySong);
        }
        let state = HandState::at(config.chain.rest_pose(), &config)?;
        let env = PianoEnv {
            config,
            traj,
            state,
            frame_index: 0,
        };
        let obs = env.observation();
        Ok((env, obs))
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn trajectory(&self) -> &GoalTrajectory {
        &self.traj
    }

    pub fn state(&self) -> &HandState {
        &self.state
    }

    pub fn frame_index(&self) -> usize {
        self.frame_index
    }

    pub fn is_done(&self) -> bool {
        self.frame_index >= self.traj.len()
    }

    pub fn observation(&self) -> Observation {
        Observation {
            hand_state: self.state.clone(),
            goal: goal_window(&self.traj, self.frame_index, self.config.lookahead),
            frame_index: self.frame_index,
        }
    }

    /// Moves joints toward `action` under the rate limit and scores the
    /// resulting key presses against the current goal frame.
    pub fn step(&mut self, action: &[f64]) -> Result<(Observation, StepInfo), EnvError> {
        if action.len() != NUM_JOINTS {
            return Err(EnvError::DimensionMismatch {
                expected: NUM_JOINTS,
                got: action.len(),
            });
        }
        if self.is_done() {
            return Err(EnvError::EpisodeOver(self.traj.len()));
        }
        let limit = self.config.rate_limit;
        let mut q: Vec<f64> = self
            .state
            .joint_angles
            .iter()
            .zip(action)
            .map(|(cur, target)| cur + (target - cur).clamp(-limit, limit))
            .collect();
        self.config.chain.clamp(&mut q);
        self.state = HandState::at(q, &self.config)?;

        let goal = self.traj.frames[self.frame_index];
        let pressed = detect_presses(&self.state.fingertips, &self.config.geometry);
        let w = &self.config.reward_weights;
        let r_task = task_reward(goal, pressed, w.w_press, w.w_fp);
        let info = StepInfo {
            frame_index: self.frame_index,
            goal_keys: goal,
            pressed_keys: pressed,
            false_presses: pressed.difference(goal).count(),
            reward: RewardBreakdown::task_only(r_task, w),
        };
        self.frame_index += 1;
        Ok((self.observation(), info))
    }
}
