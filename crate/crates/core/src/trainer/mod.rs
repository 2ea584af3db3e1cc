//! Behavior-cloning training of the diffusion denoiser, rollout evaluation
//! and the ablation grid.

pub mod ablation;
pub mod demo;
pub mod eval;
pub mod policy;
pub mod toy;

use std::f64::consts::PI;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Array, ParamStore, Tape};
use crate::denoiser::{chunk_to_channels, DenoiserConfig, DenoiserError, UNet1d};
use crate::diffusion::{cosine_schedule, forward_noise, DiffusionError, EmaState, NoiseSchedule, DEFAULT_COSINE_OFFSET};
use crate::env::{EnvConfig, EnvError, PianoEnv, PROPRIO_DIM};
use crate::kinematics::{residual_combine, KinematicsError, DEFAULT_RESIDUAL_SCALE, NUM_JOINTS};
use crate::rng::{self, Rng};

pub use demo::{synthesize_demo, DemoError, Demonstration};
pub use ablation::{ablation_run, AblationConfig, AblationResult, AblationRow, GridCell};
pub use eval::{ConfigF1, EvalReport, SongRow};
pub use policy::{rollout, ActionMode, DiffusionPolicy, PolicyCheckpoint, ResidualSource, RolloutOptions, RolloutResult, ZeroStub};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Smallest per-dimension range used by [`Normalizer`].
pub const NORMALIZER_RANGE_FLOOR: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("value {value} out of range: {what}")]
    OutOfRange { what: &'static str, value: f64 },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("empty batch or dataset")]
    EmptyBatch,
    #[error("non-finite loss {loss} at step {step}; last finite loss {last_finite:?}, grad norm {grad_norm}")]
    NonFiniteLoss {
        step: usize,
        loss: f64,
        last_finite: Option<f64>,
        grad_norm: f64,
    },
    #[error(transparent)]
    Demo(#[from] DemoError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Kinematics(#[from] KinematicsError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Denoiser(#[from] DenoiserError),
    #[error(transparent)]
    Autodiff(#[from] AdError),
    #[error(transparent)]
    Rollout(#[from] policy::RolloutError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    pub diffusion_steps: usize,
    pub ema_decay: f64,
    /// Ramp the EMA decay as `min(decay, (1 + n) / (10 + n))`.
    pub ema_warmup: bool,
    pub seed: u64,
    pub residual_scale: f64,
    /// Keep an EMA snapshot every this many steps (0 keeps only the final one).
    pub snapshot_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            steps_per_epoch: 20,
            batch: 64,
            lr_max: 1e-4,
            lr_min: 1e-6,
            diffusion_steps: 100,
            ema_decay: 0.9999,
            ema_warmup: true,
            seed: 0,
            residual_scale: DEFAULT_RESIDUAL_SCALE,
            snapshot_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr_max > self.lr_min && self.lr_min > 0.0) {
            return Err(TrainError::InvalidConfig(format!(
                "need lr_max > lr_min > 0, got {} and {}",
                self.lr_max, self.lr_min
            )));
        }
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch == 0 || self.diffusion_steps == 0 {
            return Err(TrainError::InvalidConfig("epochs, steps, batch and T must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(TrainError::InvalidConfig(format!("EMA decay {} outside [0, 1]", self.ema_decay)));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.epochs * self.steps_per_epoch
    }
}

/// `lr_min + 0.5 * (lr_max - lr_min) * (1 + cos(pi * epoch / epochs))`.
pub fn cosine_lr(epoch: usize, cfg: &TrainConfig) -> Result<f64, TrainError> {
    if epoch > cfg.epochs {
        return Err(TrainError::OutOfRange {
            what: "epoch beyond the schedule",
            value: epoch as f64,
        });
    }
    if epoch == 0 {
        return Ok(cfg.lr_max);
    }
    if epoch == cfg.epochs {
        return Ok(cfg.lr_min);
    }
    let c = (PI * epoch as f64 / cfg.epochs as f64).cos();
    Ok(cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + c))
}

/// Adam optimizer state.
#[derive(Debug, Clone)]
pub struct Adam {
    m: ParamStore,
    v: ParamStore,
    pub step: u64,
}

impl Adam {
    pub fn new(params: &ParamStore) -> Self {
        let zeros = |p: &ParamStore| {
            let mut z = ParamStore::new();
            for (k, v) in p.iter() {
                z.insert(k, Array::zeros(v.shape()));
            }
            z
        };
        Adam {
            m: zeros(params),
            v: zeros(params),
            step: 0,
        }
    }

    /// One bias-corrected update of `params` along `grads`.
    pub fn update(&mut self, params: &mut ParamStore, grads: &ParamStore, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (((_, p), (_, g)), ((_, m), (_, v))) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pi, gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
            {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * gi;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * gi * gi;
                *pi -= lr * (*mi / c1) / ((*vi / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Per-dimension affine map of each value range onto `[-1, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Normalizer {
    /// Ranges over the rows of `rows`; every row has the same length.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>, dim: usize) -> Self {
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for row in rows {
            for (j, &v) in row.iter().enumerate() {
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
        }
        for j in 0..dim {
            if !lo[j].is_finite() {
                lo[j] = 0.0;
                hi[j] = 0.0;
            }
        }
        Normalizer { lo, hi }
    }

    /// Identity-like normalizer on `[-1, 1]`.
    pub fn unit(dim: usize) -> Self {
        Normalizer {
            lo: vec![-1.0; dim],
            hi: vec![1.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    fn center_half(&self, j: usize) -> (f64, f64) {
        let half = 0.5 * (self.hi[j] - self.lo[j]).max(NORMALIZER_RANGE_FLOOR);
        (0.5 * (self.hi[j] + self.lo[j]), half)
    }

    /// Normalizes a row-major `[rows, dim]` buffer in place.
    pub fn normalize(&self, data: &mut [f64]) {
        let d = self.dim();
        for (i, v) in data.iter_mut().enumerate() {
            let (c, h) = self.center_half(i % d);
            *v = (*v - c) / h;
        }
    }

    pub fn denormalize(&self, data: &mut [f64]) {
        let d = self.dim();
        for (i, v) in data.iter_mut().enumerate() {
            let (c, h) = self.center_half(i % d);
            *v = *v * h + c;
        }
    }
}

/// Per-dimension standardization of the proprioceptive part of the condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CondNormalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl CondNormalizer {
    pub const STD_FLOOR: f64 = 1e-3;

    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut n = 0usize;
        let mut sum = vec![0.0; PROPRIO_DIM];
        let mut sq = vec![0.0; PROPRIO_DIM];
        for row in rows {
            n += 1;
            for j in 0..PROPRIO_DIM {
                sum[j] += row[j];
                sq[j] += row[j] * row[j];
            }
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(Self::STD_FLOOR))
            .collect();
        CondNormalizer { mean, std }
    }

    pub fn identity() -> Self {
        CondNormalizer {
            mean: vec![0.0; PROPRIO_DIM],
            std: vec![1.0; PROPRIO_DIM],
        }
    }

    /// Standardizes the leading proprioceptive entries; the goal window is left as is.
    pub fn apply(&self, cond: &mut [f64]) {
        for j in 0..PROPRIO_DIM.min(cond.len()) {
            cond[j] = (cond[j] - self.mean[j]) / self.std[j];
        }
    }
}

/// One training pair: raw condition and time-major `[horizon, 22]` target chunk.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub cond: Vec<f64>,
    pub x0: Vec<f64>,
}

/// Condition vector: proprioception followed by the flattened goal window.
pub fn condition_vector(obs: &crate::env::Observation) -> Vec<f64> {
    let mut c = obs.hand_state.proprio_vector();
    c.extend(obs.goal.flatten());
    c
}

/// Replays the demonstration through the environment and records
/// (condition, target chunk) pairs.
///
/// In [`ActionMode::Residual`] the target is the expert residual chunk and
/// the replayed action is `q + scale * r`; in [`ActionMode::Absolute`] the
/// target is `q - q_rest` and the replayed action is `q`.
pub fn build_dataset(
    demo: &Demonstration,
    env_cfg: &EnvConfig,
    mode: ActionMode,
    horizon: usize,
    residual_scale: f64,
) -> Result<Vec<Sample>, TrainError> {
    let n = demo.len();
    let rest = env_cfg.chain.rest_pose();
    let target = |t: usize| -> Vec<f64> {
        match mode {
            ActionMode::Residual => demo.expert_residuals[t].clone(),
            ActionMode::Absolute => demo.q_nominal[t].iter().zip(&rest).map(|(q, r)| q - r).collect(),
        }
    };
    let (mut env, mut obs) = PianoEnv::reset(demo.goal.clone(), env_cfg.clone())?;
    let mut out = Vec::with_capacity(n);
    for t in 0..n {
        let mut x0 = Vec::with_capacity(horizon * NUM_JOINTS);
        for h in 0..horizon {
            x0.extend(target((t + h).min(n - 1)));
        }
        out.push(Sample {
            cond: condition_vector(&obs),
            x0,
        });
        let action = match mode {
            ActionMode::Residual => residual_combine(&demo.q_nominal[t], &demo.expert_residuals[t], residual_scale, &env_cfg.chain)?,
            ActionMode::Absolute => demo.q_nominal[t].clone(),
        };
        obs = env.step(&action)?.0;
    }
    Ok(out)
}

/// Normalized training set with the normalizers that produced it.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub action_norm: Normalizer,
    pub cond_norm: CondNormalizer,
}

impl Dataset {
    pub fn new(raw: Vec<Sample>) -> Result<Self, TrainError> {
        if raw.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let action_norm = Normalizer::fit(raw.iter().flat_map(|s| s.x0.chunks(NUM_JOINTS)), NUM_JOINTS);
        let cond_norm = CondNormalizer::fit(raw.iter().map(|s| s.cond.as_slice()));
        let samples = raw
            .into_iter()
            .map(|mut s| {
                action_norm.normalize(&mut s.x0);
                cond_norm.apply(&mut s.cond);
                s
            })
            .collect();
        Ok(Dataset {
            samples,
            action_norm,
            cond_norm,
        })
    }
}

/// Mutable state of a training run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub net: UNet1d,
    pub params: ParamStore,
    pub adam: Adam,
    pub ema: EmaState,
    pub sched: NoiseSchedule,
    pub step: usize,
    pub last_finite_loss: Option<f64>,
    noise_rng: Rng,
    step_rng: Rng,
}

impl TrainState {
    pub fn new(denoiser: DenoiserConfig, cfg: &TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let net = UNet1d::new(denoiser)?;
        let params = net.init_params(cfg.seed);
        Ok(TrainState {
            adam: Adam::new(&params),
            ema: EmaState::new(&params, cfg.ema_decay)?,
            sched: cosine_schedule(cfg.diffusion_steps, DEFAULT_COSINE_OFFSET)?,
            net,
            params,
            step: 0,
            last_finite_loss: None,
            noise_rng: rng::stream(cfg.seed, rng::ids::NOISE),
            step_rng: rng::stream(cfg.seed, rng::ids::TIMESTEP),
        })
    }
}

/// Diffusion steps and noise drawn for one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub steps: Vec<usize>,
    /// Time-major noise chunks, one per sample.
    pub eps: Vec<Vec<f64>>,
}

impl TrainState {
    /// Draws `t ~ U[1, T]` and `eps ~ N(0, I)` for `n` samples.
    pub fn draw_noise(&mut self, n: usize) -> NoiseDraw {
        let len = self.net.config().chunk_len();
        let t_max = self.sched.t_max();
        let steps = (0..n).map(|_| self.step_rng.random_range(1..=t_max)).collect();
        let eps = (0..n)
            .map(|_| (0..len).map(|_| StandardNormal.sample(&mut self.noise_rng)).collect())
            .collect();
        NoiseDraw { steps, eps }
    }
}

/// Noise-prediction loss of one batch under a given draw, without updating anything.
pub fn batch_loss(state: &TrainState, batch: &[&Sample], draw: &NoiseDraw) -> Result<f64, TrainError> {
    let (tape, loss, _) = record_batch(state, batch, draw)?;
    Ok(tape.value(loss).item())
}

fn record_batch(
    state: &TrainState,
    batch: &[&Sample],
    draw: &NoiseDraw,
) -> Result<(Tape, crate::autodiff::Var, crate::autodiff::ParamVars), TrainError> {
    if batch.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    if draw.steps.len() != batch.len() || draw.eps.len() != batch.len() {
        return Err(TrainError::InvalidConfig(format!(
            "noise draw for {} samples, batch has {}",
            draw.steps.len(),
            batch.len()
        )));
    }
    let cfg = state.net.config();
    let (h, a) = (cfg.horizon, cfg.action_dim);
    let b = batch.len();
    let mut xs = Vec::with_capacity(b * h * a);
    let mut eps_all = Vec::with_capacity(b * h * a);
    let mut conds = Vec::with_capacity(b * cfg.cond_input_dim);
    for ((s, &t), eps) in batch.iter().zip(&draw.steps).zip(&draw.eps) {
        let x_t = forward_noise(&s.x0, t, eps, &state.sched)?;
        xs.extend(chunk_to_channels(&x_t, h, a));
        eps_all.extend(chunk_to_channels(eps, h, a));
        conds.extend_from_slice(&s.cond);
    }
    let mut tape = Tape::new();
    let vars = state.params.bind(&mut tape);
    let x = tape.constant(Array::new(vec![b, a, h], xs)?);
    let c = tape.constant(Array::new(vec![b, cfg.cond_input_dim], conds)?);
    let target = tape.constant(Array::new(vec![b, a, h], eps_all)?);
    let pred = state.net.forward(&mut tape, &vars, x, &draw.steps, c)?;
    let loss = tape.mse_loss(pred, target)?;
    Ok((tape, loss, vars))
}

/// One behavior-cloning step: noise each sample at a uniform random step,
/// regress the noise, apply Adam at `lr`, then update the EMA shadow.
pub fn bc_train_step(state: &mut TrainState, batch: &[&Sample], lr: f64, cfg: &TrainConfig) -> Result<f64, TrainError> {
    let draw = state.draw_noise(batch.len());
    bc_train_step_with(state, batch, &draw, lr, cfg)
}

/// [`bc_train_step`] under a given noise draw.
pub fn bc_train_step_with(
    state: &mut TrainState,
    batch: &[&Sample],
    draw: &NoiseDraw,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<f64, TrainError> {
    let (tape, loss_var, vars) = record_batch(state, batch, draw)?;
    let loss = tape.value(loss_var).item();
    let grads = state.params.gradients(&vars, &tape.backward(loss_var)?);
    if !loss.is_finite() || !grads.is_finite() {
        let grad_norm = grads.iter().map(|(_, g)| g.norm().powi(2)).sum::<f64>().sqrt();
        return Err(TrainError::NonFiniteLoss {
            step: state.step,
            loss,
            last_finite: state.last_finite_loss,
            grad_norm,
        });
    }
    state.adam.update(&mut state.params, &grads, lr);
    let decay = if cfg.ema_warmup {
        state.ema.warmup_decay()
    } else {
        state.ema.decay
    };
    state.ema.update_with_decay(&state.params, decay)?;
    state.step += 1;
    state.last_finite_loss = Some(loss);
    Ok(loss)
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub net: UNet1d,
    pub params: ParamStore,
    pub ema_params: ParamStore,
    pub losses: Vec<f64>,
    /// `(step, EMA parameters)` snapshots, always ending with the final step.
    pub snapshots: Vec<(usize, ParamStore)>,
    pub action_norm: Normalizer,
    pub cond_norm: CondNormalizer,
}

/// Runs `epochs * steps_per_epoch` steps on batches drawn with replacement.
pub fn train(denoiser: DenoiserConfig, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let mut state = TrainState::new(denoiser, cfg)?;
    let mut batch_rng = rng::stream(cfg.seed, rng::ids::BATCH);
    let total = cfg.total_steps();
    let mut losses = Vec::with_capacity(total);
    let mut snapshots = Vec::new();
    for step in 0..total {
        let lr = cosine_lr(step / cfg.steps_per_epoch, cfg)?;
        let batch: Vec<&Sample> = (0..cfg.batch)
            .map(|_| &data.samples[batch_rng.random_range(0..data.samples.len())])
            .collect();
        losses.push(bc_train_step(&mut state, &batch, lr, cfg)?);
        let done = step + 1;
        if cfg.snapshot_every > 0 && done % cfg.snapshot_every == 0 && done < total {
            snapshots.push((done, state.ema.shadow.clone()));
        }
    }
    snapshots.push((total, state.ema.shadow.clone()));
    Ok(TrainOutcome {
        net: state.net,
        params: state.params,
        ema_params: state.ema.shadow,
        losses,
        snapshots,
        action_norm: data.action_norm.clone(),
        cond_norm: data.cond_norm.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_endpoints() {
        let cfg = TrainConfig::default();
        assert_eq!(cosine_lr(0, &cfg).unwrap(), 1e-4);
        assert_eq!(cosine_lr(100, &cfg).unwrap(), 1e-6);
        assert!((cosine_lr(50, &cfg).unwrap() - 5.05e-5).abs() < 1e-12);
        assert!(cosine_lr(101, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.lr_min = 1e-3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn normalizer_round_trip() {
        let rows = [vec![0.0, 5.0], vec![2.0, 5.0]];
        let n = Normalizer::fit(rows.iter().map(|r| r.as_slice()), 2);
        let mut v = vec![0.0, 5.0, 2.0, 5.0, 1.0, 5.0];
        n.normalize(&mut v);
        assert_eq!(&v[..4], &[-1.0, 0.0, 1.0, 0.0]);
        assert_eq!(v[4], 0.0);
        n.denormalize(&mut v);
        assert_eq!(v, vec![0.0, 5.0, 2.0, 5.0, 1.0, 5.0]);
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut p = ParamStore::new();
        p.insert("w", Array::from_vec(vec![1.0, -1.0]));
        let mut g = ParamStore::new();
        g.insert("w", Array::from_vec(vec![0.5, -2.0]));
        let mut adam = Adam::new(&p);
        adam.update(&mut p, &g, 0.1);
        let w = p.get("w").unwrap().data();
        assert!((w[0] - 0.9).abs() < 1e-6 && (w[1] + 0.9).abs() < 1e-6);
    }
}
