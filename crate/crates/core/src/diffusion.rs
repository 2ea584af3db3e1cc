//! Cosine noise schedule, forward noising, deterministic DDIM sampling and
//! exponential moving averages of parameters.
//!
//! Action chunks are handled as flat row-major slices; the denoiser decides
//! how to interpret them.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::autodiff::{AdError, ParamStore};
use crate::rng;

pub const DEFAULT_DIFFUSION_STEPS: usize = 100;
pub const DEFAULT_COSINE_OFFSET: f64 = 0.008;
pub const DEFAULT_INFERENCE_STEPS: usize = 10;
pub const DEFAULT_EMA_DECAY: f64 = 0.9999;
/// Lower bound on every per-step `alpha_t`.
pub const MIN_STEP_ALPHA: f64 = 0.001;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffusionError {
    #[error("invalid parameter: {0}")]
    InvalidParam(String),
    #[error("diffusion step {t} outside 1..={t_max}")]
    InvalidT { t: usize, t_max: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced at step {0}")]
    NonFinite(usize),
    #[error(transparent)]
    Model(#[from] AdError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    t_max: usize,
    alpha_bar: Vec<f64>,
    step_subsequence: Vec<usize>,
}

fn cosine_f(t: usize, t_max: usize, s: f64) -> f64 {
    let u = (t as f64 / t_max as f64 + s) / (1.0 + s);
    (u * PI / 2.0).cos().powi(2)
}

/// `alpha_bar[t] = f(t) / f(0)` with `f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2)`,
/// rebuilt as a cumulative product after clipping each per-step ratio to at
/// least [`MIN_STEP_ALPHA`]. The step subsequence defaults to
/// [`DEFAULT_INFERENCE_STEPS`] evenly spaced steps ending at `T`.
pub fn cosine_schedule(t_max: usize, offset_s: f64) -> Result<NoiseSchedule, DiffusionError> {
    if t_max == 0 {
        return Err(DiffusionError::InvalidParam("T must be at least 1".into()));
    }
    if !(offset_s > 0.0 && offset_s.is_finite()) {
        return Err(DiffusionError::InvalidParam(format!("offset s = {offset_s} must be positive")));
    }
    let f0 = cosine_f(0, t_max, offset_s);
    let raw: Vec<f64> = (0..=t_max).map(|t| (cosine_f(t, t_max, offset_s) / f0).min(1.0)).collect();
    let mut alpha_bar = Vec::with_capacity(t_max + 1);
    alpha_bar.push(raw[0]);
    for t in 1..=t_max {
        let step = (raw[t] / raw[t - 1]).max(MIN_STEP_ALPHA);
        alpha_bar.push(alpha_bar[t - 1] * step);
    }
    let steps = evenly_spaced_steps(t_max, DEFAULT_INFERENCE_STEPS.min(t_max))?;
    Ok(NoiseSchedule {
        t_max,
        alpha_bar,
        step_subsequence: steps,
    })
}

/// `n` evenly spaced steps in `1..=T`, always ending at `T`.
pub fn evenly_spaced_steps(t_max: usize, n: usize) -> Result<Vec<usize>, DiffusionError> {
    if n == 0 || n > t_max {
        return Err(DiffusionError::InvalidParam(format!("{n} inference steps for T = {t_max}")));
    }
    let mut steps: Vec<usize> = (1..=n).map(|i| (i * t_max + n / 2) / n).collect();
    steps.dedup();
    Ok(steps)
}

impl NoiseSchedule {
    pub fn t_max(&self) -> usize {
        self.t_max
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Per-step `alpha_t = alpha_bar[t] / alpha_bar[t-1]`.
    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha_bar[t] / self.alpha_bar[t - 1]
    }

    pub fn step_subsequence(&self) -> &[usize] {
        &self.step_subsequence
    }

    /// Replaces the inference subsequence; it must be increasing within `1..=T`.
    pub fn with_steps(mut self, steps: Vec<usize>) -> Result<Self, DiffusionError> {
        if steps.is_empty() || steps.windows(2).any(|w| w[0] >= w[1]) || steps[0] == 0 || steps[steps.len() - 1] > self.t_max {
            return Err(DiffusionError::InvalidParam(format!(
                "step subsequence {steps:?} must increase within 1..={}",
                self.t_max
            )));
        }
        self.step_subsequence = steps;
        Ok(self)
    }

    /// Uses every step `1..=T`.
    pub fn with_all_steps(self) -> Self {
        let all = (1..=self.t_max).collect();
        NoiseSchedule {
            step_subsequence: all,
            ..self
        }
    }

    /// Plain-text table of `t alpha_bar[t]`, one row per step.
    pub fn to_text(&self) -> String {
        let mut s = String::from("t\talpha_bar\n");
        for (t, a) in self.alpha_bar.iter().enumerate() {
            let _ = writeln!(s, "{t}\t{a:.17e}");
        }
        s
    }

    fn check_t(&self, t: usize) -> Result<(), DiffusionError> {
        if t == 0 || t > self.t_max {
            return Err(DiffusionError::InvalidT { t, t_max: self.t_max });
        }
        Ok(())
    }
}

fn check_len(a: usize, b: usize, what: &str) -> Result<(), DiffusionError> {
    if a != b {
        return Err(DiffusionError::ShapeMismatch(format!("{what}: {a} vs {b} entries")));
    }
    Ok(())
}

/// `x_t = sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps`.
pub fn forward_noise(x0: &[f64], t: usize, eps: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>, DiffusionError> {
    sched.check_t(t)?;
    check_len(x0.len(), eps.len(), "x0 vs eps")?;
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps).map(|(x, e)| a * x + b * e).collect())
}

/// Clean-sample estimate `(x_t - sqrt(1 - alpha_bar[t]) * eps) / sqrt(alpha_bar[t])`.
pub fn predict_x0(x_t: &[f64], t: usize, eps_pred: &[f64], sched: &NoiseSchedule) -> Result<Vec<f64>, DiffusionError> {
    check_len(x_t.len(), eps_pred.len(), "x_t vs eps_pred")?;
    if t > sched.t_max {
        return Err(DiffusionError::InvalidT { t, t_max: sched.t_max });
    }
    let ab = sched.alpha_bar(t);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x_t.iter().zip(eps_pred).map(|(x, e)| (x - b * e) / a).collect())
}

/// Deterministic DDIM update from step `t` to `t_prev`.
pub fn ddim_step(
    x_t: &[f64],
    t: usize,
    t_prev: usize,
    eps_pred: &[f64],
    sched: &NoiseSchedule,
) -> Result<Vec<f64>, DiffusionError> {
    ddim_step_clipped(x_t, t, t_prev, eps_pred, sched, None)
}

/// [`ddim_step`] with the clean-sample estimate optionally clamped to
/// `[-clip, clip]` before re-noising.
pub fn ddim_step_clipped(
    x_t: &[f64],
    t: usize,
    t_prev: usize,
    eps_pred: &[f64],
    sched: &NoiseSchedule,
    clip: Option<f64>,
) -> Result<Vec<f64>, DiffusionError> {
    sched.check_t(t)?;
    if t_prev >= t {
        return Err(DiffusionError::InvalidParam(format!("t_prev {t_prev} must be below t {t}")));
    }
    let mut x0 = predict_x0(x_t, t, eps_pred, sched)?;
    if let Some(c) = clip {
        for v in &mut x0 {
            *v = v.clamp(-c, c);
        }
    }
    let ab = sched.alpha_bar(t_prev);
    let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
    Ok(x0.iter().zip(eps_pred).map(|(x, e)| a * x + b * e).collect())
}

/// Noise predictor `eps_theta(x_t, t | cond)` over flat action chunks.
pub trait Denoiser {
    fn predict_noise(&self, x_t: &[f64], t: usize, cond: &[f64]) -> Result<Vec<f64>, DiffusionError>;
}

impl<D: Denoiser + ?Sized> Denoiser for &D {
    fn predict_noise(&self, x_t: &[f64], t: usize, cond: &[f64]) -> Result<Vec<f64>, DiffusionError> {
        (**self).predict_noise(x_t, t, cond)
    }
}

/// Draws `len` standard normal values from the sampler stream of `seed`.
pub fn initial_noise(len: usize, seed: u64) -> Vec<f64> {
    let mut rng = rng::stream(seed, rng::ids::SAMPLER);
    (0..len).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Runs the reverse process from `x_T ~ N(0, I)` over the schedule's step
/// subsequence (descending, finishing at step 0).
pub fn ddim_sample<D: Denoiser>(
    denoiser: &D,
    cond: &[f64],
    len: usize,
    sched: &NoiseSchedule,
    seed: u64,
    clip: Option<f64>,
) -> Result<Vec<f64>, DiffusionError> {
    ddim_sample_from(denoiser, cond, initial_noise(len, seed), sched, clip)
}

/// [`ddim_sample`] starting from a given `x_T`.
pub fn ddim_sample_from<D: Denoiser>(
    denoiser: &D,
    cond: &[f64],
    x_start: Vec<f64>,
    sched: &NoiseSchedule,
    clip: Option<f64>,
) -> Result<Vec<f64>, DiffusionError> {
    let steps = sched.step_subsequence();
    let mut x = x_start;
    for i in (0..steps.len()).rev() {
        let t = steps[i];
        let t_prev = if i == 0 { 0 } else { steps[i - 1] };
        let eps = denoiser.predict_noise(&x, t, cond)?;
        check_len(eps.len(), x.len(), "denoiser output")?;
        x = ddim_step_clipped(&x, t, t_prev, &eps, sched, clip)?;
        if x.iter().any(|v| !v.is_finite()) {
            return Err(DiffusionError::NonFinite(t));
        }
    }
    Ok(x)
}

/// Shadow copy of a parameter set tracked by exponential moving average.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    pub shadow: ParamStore,
    pub decay: f64,
    pub update_count: u64,
}

impl EmaState {
    pub fn new(live: &ParamStore, decay: f64) -> Result<Self, DiffusionError> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(DiffusionError::InvalidParam(format!("EMA decay {decay} outside [0, 1]")));
        }
        Ok(EmaState {
            shadow: live.clone(),
            decay,
            update_count: 0,
        })
    }

    /// `shadow <- decay * shadow + (1 - decay) * live`.
    pub fn update(&mut self, live: &ParamStore) -> Result<(), DiffusionError> {
        self.update_with_decay(live, self.decay)
    }

    /// Update with an explicit decay for this step.
    pub fn update_with_decay(&mut self, live: &ParamStore, decay: f64) -> Result<(), DiffusionError> {
        if !self.shadow.same_layout(live) {
            return Err(DiffusionError::ShapeMismatch("EMA shadow and live parameters differ".into()));
        }
        for ((_, s), (_, l)) in self.shadow.iter_mut().zip(live.iter()) {
            for (sv, lv) in s.data_mut().iter_mut().zip(l.data()) {
                *sv = decay * *sv + (1.0 - decay) * lv;
            }
        }
        self.update_count += 1;
        Ok(())
    }

    /// Decay ramp `min(decay, (1 + n) / (10 + n))` after `n` previous updates.
    pub fn warmup_decay(&self) -> f64 {
        let n = self.update_count as f64;
        self.decay.min((1.0 + n) / (10.0 + n))
    }
}

/// Functional form of [`EmaState::update`].
pub fn ema_update(mut ema: EmaState, live: &ParamStore) -> Result<EmaState, DiffusionError> {
    ema.update(live)?;
    Ok(ema)
}
