//! Closed-loop rollout of a residual (or absolute) diffusion policy.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{read_checkpoint, write_checkpoint, CheckpointError, ParamStore};
use crate::denoiser::{DenoiserConfig, DenoiserModel, UNet1d};
use crate::diffusion::{
    cosine_schedule, evenly_spaced_steps, ddim_sample_from, DiffusionError, NoiseSchedule, DEFAULT_COSINE_OFFSET,
    DEFAULT_INFERENCE_STEPS,
};
use crate::env::{EnvConfig, PianoEnv};
use crate::keys::KeyFrame;
use crate::kinematics::{ik_solve, residual_combine, IkOptions, Vec3, FINGERS_PER_HAND, NUM_JOINTS};
use crate::metrics::{frame_prf, Prf};
use crate::oracle::{hand_rewards, Oracle, OracleOutcome, PerformanceSummary};
use crate::reward::{
    audio_reward, composite_reward, extract_mfcc, style_reward, synthesize_audio, AudioRewardMode, RewardBreakdown,
    RewardError, RewardParts, RewardWeights,
};
use crate::rng::{self, Rng};

use super::{condition_vector, CondNormalizer, Demonstration, Normalizer, TrainError, TrainOutcome};

/// Default clip of the predicted clean sample, in normalized units.
pub const DEFAULT_SAMPLE_CLIP: f64 = 1.0;

/// How the predicted chunk becomes a joint command.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionMode {
    /// `q_ik + scale * x0`.
    #[default]
    Residual,
    /// `q_rest + x0`, without IK.
    Absolute,
}

/// Produces a time-major `[horizon, 22]` action chunk for a raw condition.
pub trait ResidualSource {
    fn chunk(&mut self, cond: &[f64]) -> Result<Vec<f64>, DiffusionError>;
}

/// Always returns zeros, so residual rollouts reduce to pure IK tracking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZeroStub {
    pub horizon: usize,
}

impl ResidualSource for ZeroStub {
    fn chunk(&mut self, _cond: &[f64]) -> Result<Vec<f64>, DiffusionError> {
        Ok(vec![0.0; self.horizon * NUM_JOINTS])
    }
}

/// DDIM sampling from a trained denoiser with input and output normalization.
#[derive(Debug, Clone)]
pub struct DiffusionPolicy {
    pub model: DenoiserModel,
    pub sched: NoiseSchedule,
    pub action_norm: Normalizer,
    pub cond_norm: CondNormalizer,
    pub clip: Option<f64>,
    rng: Rng,
}

impl DiffusionPolicy {
    pub fn new(
        model: DenoiserModel,
        sched: NoiseSchedule,
        action_norm: Normalizer,
        cond_norm: CondNormalizer,
        seed: u64,
    ) -> Self {
        DiffusionPolicy {
            model,
            sched,
            action_norm,
            cond_norm,
            clip: Some(DEFAULT_SAMPLE_CLIP),
            rng: rng::stream(seed, rng::ids::SAMPLER),
        }
    }

    /// Policy over `params` (typically the EMA weights) of a training run.
    pub fn from_outcome(
        outcome: &TrainOutcome,
        params: ParamStore,
        diffusion_steps: usize,
        inference_steps: usize,
        seed: u64,
    ) -> Result<Self, TrainError> {
        let sched = inference_schedule(diffusion_steps, inference_steps)?;
        Ok(Self::new(
            DenoiserModel::new(outcome.net.clone(), params),
            sched,
            outcome.action_norm.clone(),
            outcome.cond_norm.clone(),
            seed,
        ))
    }
}

/// Cosine schedule with `inference_steps` evenly spaced sampling steps.
pub fn inference_schedule(diffusion_steps: usize, inference_steps: usize) -> Result<NoiseSchedule, DiffusionError> {
    cosine_schedule(diffusion_steps, DEFAULT_COSINE_OFFSET)?.with_steps(evenly_spaced_steps(diffusion_steps, inference_steps)?)
}

impl ResidualSource for DiffusionPolicy {
    fn chunk(&mut self, cond: &[f64]) -> Result<Vec<f64>, DiffusionError> {
        use rand_distr::{Distribution, StandardNormal};
        let mut c = cond.to_vec();
        self.cond_norm.apply(&mut c);
        let len = self.model.net.config().chunk_len();
        let x_start: Vec<f64> = (0..len).map(|_| StandardNormal.sample(&mut self.rng)).collect();
        let mut x0 = ddim_sample_from(&self.model, &c, x_start, &self.sched, self.clip)?;
        self.action_norm.denormalize(&mut x0);
        Ok(x0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutOptions {
    pub mode: ActionMode,
    pub residual_scale: f64,
    pub ik: IkOptions,
    pub song: String,
    pub audio_mode: AudioRewardMode,
}

impl Default for RolloutOptions {
    fn default() -> Self {
        RolloutOptions {
            mode: ActionMode::Residual,
            residual_scale: crate::kinematics::DEFAULT_RESIDUAL_SCALE,
            ik: IkOptions::default(),
            song: "song".into(),
            audio_mode: AudioRewardMode::Cosine,
        }
    }
}

/// One line of an episode trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub frame: usize,
    pub joints: Vec<f64>,
    pub fingertips: Vec<[f64; 3]>,
    pub pressed: Vec<usize>,
    pub goal: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct RolloutResult {
    pub song: String,
    pub trace: Vec<TraceRecord>,
    pub goal: Vec<KeyFrame>,
    pub pressed: Vec<KeyFrame>,
    pub prf: Prf,
    /// Episode-level task, audio and style terms.
    pub parts: RewardParts,
    pub reward: RewardBreakdown,
    pub summary: PerformanceSummary,
    /// `None` when the oracle term is disabled.
    pub oracle: Option<OracleOutcome>,
    pub ik_calls: usize,
}

impl RolloutResult {
    /// Composite reward under `weights`, consulting the oracle only when one
    /// is given and `weights.delta > 0`.
    pub fn score(
        &self,
        weights: &RewardWeights,
        oracle: Option<&dyn Oracle>,
    ) -> Result<(RewardBreakdown, Option<OracleOutcome>), TrainError> {
        let outcome = match oracle {
            Some(o) if weights.delta > 0.0 => Some(o.evaluate(&self.summary)),
            _ => None,
        };
        let hands = outcome.as_ref().map_or((0.0, 0.0), |o| hand_rewards(&o.scores));
        let reward = composite_reward(self.parts, weights, hands).map_err(RolloutError::from)?;
        Ok((reward, outcome))
    }

    /// Newline-delimited JSON trace.
    pub fn trace_ndjson(&self) -> String {
        let mut out = String::new();
        for r in &self.trace {
            out.push_str(&serde_json::to_string(r).expect("trace records serialize"));
            out.push('\n');
        }
        out
    }

    pub fn fingertip_trajectory(&self) -> Vec<Vec<Vec3>> {
        self.trace
            .iter()
            .map(|r| r.fingertips.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect())
            .collect()
    }
}

/// Mean fingertip distance to the demonstration targets, per hand.
fn per_hand_deviation(robot: &[Vec<Vec3>], human: &[Vec<Vec3>]) -> [f64; 2] {
    let mut sums = [0.0; 2];
    let mut count = 0usize;
    for (r, h) in robot.iter().zip(human) {
        for (i, (a, b)) in r.iter().zip(h).enumerate() {
            sums[i / FINGERS_PER_HAND] += (a - b).norm();
        }
        count += FINGERS_PER_HAND;
    }
    let n = count.max(1) as f64;
    [sums[0] / n, sums[1] / n]
}

/// Episode-level task, audio and style terms.
fn episode_parts(
    infos_task: &[f64],
    goal: &[KeyFrame],
    pressed: &[KeyFrame],
    robot: &[Vec<Vec3>],
    demo: &Demonstration,
    rate: f64,
    mode: AudioRewardMode,
) -> Result<RewardParts, RewardError> {
    let task = infos_task.iter().sum::<f64>() / infos_task.len().max(1) as f64;
    let target = extract_mfcc(&synthesize_audio(goal, rate))?;
    let played = extract_mfcc(&synthesize_audio(pressed, rate))?;
    let audio = audio_reward(&target, &played, mode).value;
    let style = style_reward(robot, &demo.fingertip_targets)?;
    Ok(RewardParts { task, audio, style })
}

/// Runs one closed-loop episode over the demonstration's song.
///
/// Each frame the policy samples a chunk from the current observation and
/// executes its first frame. Residual mode adds it (scaled) to the IK
/// solution for the demonstration's fingertip targets; absolute mode adds it
/// to the rest pose. The oracle is consulted once at episode end, and only
/// when one is given and the oracle weight is positive.
pub fn rollout(
    source: &mut dyn ResidualSource,
    demo: &Demonstration,
    env_cfg: &EnvConfig,
    opts: &RolloutOptions,
    oracle: Option<&dyn Oracle>,
) -> Result<RolloutResult, TrainError> {
    let (mut env, mut obs) = PianoEnv::reset(demo.goal.clone(), env_cfg.clone())?;
    let rest = env_cfg.chain.rest_pose();
    let mut q_ik = rest.clone();
    let mut ik_calls = 0usize;
    let mut trace = Vec::with_capacity(demo.len());
    let mut goal = Vec::with_capacity(demo.len());
    let mut pressed = Vec::with_capacity(demo.len());
    let mut task = Vec::with_capacity(demo.len());
    for t in 0..demo.len() {
        let chunk = source.chunk(&condition_vector(&obs))?;
        let x0 = &chunk[..NUM_JOINTS];
        let action = match opts.mode {
            ActionMode::Residual => {
                let sol = ik_solve(&demo.fingertip_targets[t], &q_ik, &env_cfg.chain, &opts.ik)?;
                ik_calls += 1;
                q_ik = sol.q_nominal;
                residual_combine(&q_ik, x0, opts.residual_scale, &env_cfg.chain)?
            }
            ActionMode::Absolute => {
                let mut a: Vec<f64> = rest.iter().zip(x0).map(|(r, x)| r + x).collect();
                env_cfg.chain.clamp(&mut a);
                a
            }
        };
        let (next, info) = env.step(&action)?;
        obs = next;
        let state = env.state();
        trace.push(TraceRecord {
            frame: info.frame_index,
            joints: state.joint_angles.clone(),
            fingertips: state.fingertips.iter().map(|p| [p.x, p.y, p.z]).collect(),
            pressed: info.pressed_keys.keys().collect(),
            goal: info.goal_keys.keys().collect(),
        });
        goal.push(info.goal_keys);
        pressed.push(info.pressed_keys);
        task.push(info.reward.r_task);
    }

    let robot: Vec<Vec<Vec3>> = trace
        .iter()
        .map(|r| r.fingertips.iter().map(|p| Vec3::new(p[0], p[1], p[2])).collect())
        .collect();
    let rate = env_cfg.control_rate_hz;
    let parts = episode_parts(&task, &goal, &pressed, &robot, demo, rate, opts.audio_mode).map_err(RolloutError::from)?;
    let deviation = per_hand_deviation(&robot, &demo.fingertip_targets);
    let summary = PerformanceSummary::from_episode(opts.song.clone(), &goal, &pressed, rate, deviation)
        .map_err(RolloutError::from)?;
    let prf = frame_prf(&goal, &pressed).map_err(RolloutError::from)?;
    let mut result = RolloutResult {
        song: opts.song.clone(),
        trace,
        goal,
        pressed,
        prf,
        parts,
        reward: RewardBreakdown::default(),
        summary,
        oracle: None,
        ik_calls,
    };
    let (reward, outcome) = result.score(&env_cfg.reward_weights, oracle)?;
    result.reward = reward;
    result.oracle = outcome;
    Ok(result)
}

/// Errors raised while scoring an episode.
#[derive(Debug, thiserror::Error)]
pub enum RolloutError {
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
}

/// Everything needed to rebuild a [`DiffusionPolicy`] from disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCheckpoint {
    pub denoiser: DenoiserConfig,
    pub mode: ActionMode,
    pub residual_scale: f64,
    pub diffusion_steps: usize,
    pub inference_steps: usize,
    pub action_norm: Normalizer,
    pub cond_norm: CondNormalizer,
    /// Set for the all-zero stand-in policy.
    #[serde(default)]
    pub zero_stub: bool,
}

impl PolicyCheckpoint {
    pub fn from_outcome(outcome: &TrainOutcome, mode: ActionMode, residual_scale: f64, diffusion_steps: usize) -> Self {
        PolicyCheckpoint {
            denoiser: outcome.net.config().clone(),
            mode,
            residual_scale,
            diffusion_steps,
            inference_steps: DEFAULT_INFERENCE_STEPS,
            action_norm: outcome.action_norm.clone(),
            cond_norm: outcome.cond_norm.clone(),
            zero_stub: false,
        }
    }

    pub fn write(&self, path: &Path, params: &ParamStore) -> Result<(), CheckpointError> {
        let meta = serde_json::to_value(self)?;
        write_checkpoint(path, params, &meta)
    }

    pub fn read(path: &Path) -> Result<(Self, ParamStore), CheckpointError> {
        let (params, meta) = read_checkpoint(path)?;
        let ckpt: PolicyCheckpoint = serde_json::from_value(meta)?;
        Ok((ckpt, params))
    }

    /// The sampling policy, or a [`ZeroStub`] for stub checkpoints.
    pub fn policy(&self, params: ParamStore, seed: u64) -> Result<Box<dyn ResidualSource>, TrainError> {
        if self.zero_stub {
            return Ok(Box::new(ZeroStub {
                horizon: self.denoiser.horizon,
            }));
        }
        let net = UNet1d::new(self.denoiser.clone())?;
        let sched = inference_schedule(self.diffusion_steps, self.inference_steps)?;
        Ok(Box::new(DiffusionPolicy::new(
            DenoiserModel::new(net, params),
            sched,
            self.action_norm.clone(),
            self.cond_norm.clone(),
            seed,
        )))
    }
}
