//! FiLM-conditioned 1-D U-Net noise predictor over action chunks.
//!
//! The network sees a chunk as `[batch, action_dim, horizon]` (channels by
//! time). The horizon is right-padded by edge replication to a multiple of
//! 16 so that four stride-2 downsamplings divide it exactly, and the output
//! is cropped back. Every residual block is modulated per channel by a
//! `(gamma, beta)` pair computed from the sinusoidal timestep embedding
//! concatenated with a linear projection of the raw condition vector.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Array, ParamStore, ParamVars, Tape, Var, GROUP_NORM_EPS};
use crate::diffusion::{Denoiser, DiffusionError};
use crate::env::PROPRIO_DIM;
use crate::keys::NUM_KEYS;
use crate::kinematics::NUM_JOINTS;
use crate::midi::DEFAULT_LOOKAHEAD;
use crate::rng;

pub const DEFAULT_HORIZON: usize = 8;
pub const DESK_WIDTHS: [usize; 4] = [8, 16, 32, 64];
pub const FULL_WIDTHS: [usize; 4] = [64, 128, 256, 512];
/// Horizon granularity required by four stride-2 downsamplings.
pub const HORIZON_MULTIPLE: usize = 16;
/// Scale applied to the initial output projection.
const OUTPUT_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DenoiserError {
    #[error("embedding dimension {0} must be even")]
    OddDim(usize),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid denoiser config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Autodiff(#[from] AdError),
}

impl From<DenoiserError> for DiffusionError {
    fn from(e: DenoiserError) -> Self {
        match e {
            DenoiserError::ShapeMismatch(m) => DiffusionError::ShapeMismatch(m),
            DenoiserError::Autodiff(a) => DiffusionError::Model(a),
            other => DiffusionError::InvalidParam(other.to_string()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub channel_widths: [usize; 4],
    /// Width of the projected condition vector.
    pub cond_dim: usize,
    pub timestep_embed_dim: usize,
    pub groups: usize,
    pub action_dim: usize,
    pub horizon: usize,
    /// Length of the raw condition: proprioception plus flattened goal window.
    pub cond_input_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig::desk()
    }
}

impl DenoiserConfig {
    pub fn desk() -> Self {
        DenoiserConfig {
            channel_widths: DESK_WIDTHS,
            cond_dim: 64,
            timestep_embed_dim: 32,
            groups: 4,
            action_dim: NUM_JOINTS,
            horizon: DEFAULT_HORIZON,
            cond_input_dim: PROPRIO_DIM + DEFAULT_LOOKAHEAD * NUM_KEYS,
        }
    }

    pub fn full() -> Self {
        DenoiserConfig {
            channel_widths: FULL_WIDTHS,
            cond_dim: 256,
            timestep_embed_dim: 128,
            ..DenoiserConfig::desk()
        }
    }

    /// Looks up a named preset: `desk` or `full`.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "desk" => Some(DenoiserConfig::desk()),
            "full" => Some(DenoiserConfig::full()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<(), DenoiserError> {
        let w = self.channel_widths;
        if w[0] == 0 || w.windows(2).any(|p| p[0] >= p[1]) {
            return Err(DenoiserError::InvalidConfig(format!("widths {w:?} must be positive and strictly increasing")));
        }
        if self.groups == 0 || w.iter().any(|c| c % self.groups != 0) {
            return Err(DenoiserError::InvalidConfig(format!(
                "group count {} must divide every width {w:?}",
                self.groups
            )));
        }
        if self.timestep_embed_dim % 2 != 0 {
            return Err(DenoiserError::OddDim(self.timestep_embed_dim));
        }
        if [self.cond_dim, self.timestep_embed_dim, self.action_dim, self.horizon, self.cond_input_dim].contains(&0) {
            return Err(DenoiserError::InvalidConfig("dimensions must be positive".into()));
        }
        Ok(())
    }

    /// Horizon after edge padding.
    pub fn padded_horizon(&self) -> usize {
        self.horizon.div_ceil(HORIZON_MULTIPLE) * HORIZON_MULTIPLE
    }

    /// Flat length of one action chunk.
    pub fn chunk_len(&self) -> usize {
        self.horizon * self.action_dim
    }

    fn film_input_dim(&self) -> usize {
        self.timestep_embed_dim + self.cond_dim
    }
}

/// Sinusoidal embedding `[sin(t w_0), cos(t w_0), sin(t w_1), ...]` with
/// `w_k = 10000^(-2k/dim)`.
pub fn timestep_embedding(t: usize, dim: usize) -> Result<Vec<f64>, DenoiserError> {
    if dim % 2 != 0 {
        return Err(DenoiserError::OddDim(dim));
    }
    let mut out = Vec::with_capacity(dim);
    for k in 0..dim / 2 {
        let w = 10000f64.powf(-2.0 * k as f64 / dim as f64);
        let a = t as f64 * w;
        out.push(a.sin());
        out.push(a.cos());
    }
    Ok(out)
}

/// `out[c, i] = gamma[c] * features[c, i] + beta[c]` on a `[channels, len]` map.
pub fn film_modulate(features: &Array, gamma: &[f64], beta: &[f64]) -> Result<Array, DenoiserError> {
    if features.ndim() != 2 || gamma.len() != features.shape()[0] || beta.len() != features.shape()[0] {
        return Err(DenoiserError::ShapeMismatch(format!(
            "features {:?} with gamma {} and beta {}",
            features.shape(),
            gamma.len(),
            beta.len()
        )));
    }
    let n = features.shape()[1];
    let data = features
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| gamma[i / n] * v + beta[i / n])
        .collect();
    Ok(Array::new(features.shape().to_vec(), data)?)
}

/// Converts time-major `[horizon, dim]` chunks into channel-major `[dim, horizon]`.
pub fn chunk_to_channels(chunk: &[f64], horizon: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; horizon * dim];
    for h in 0..horizon {
        for d in 0..dim {
            out[d * horizon + h] = chunk[h * dim + d];
        }
    }
    out
}

/// Inverse of [`chunk_to_channels`].
pub fn channels_to_chunk(channels: &[f64], horizon: usize, dim: usize) -> Vec<f64> {
    let mut out = vec![0.0; horizon * dim];
    for d in 0..dim {
        for h in 0..horizon {
            out[h * dim + d] = channels[d * horizon + h];
        }
    }
    out
}

/// Network definition; parameters are held separately in a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct UNet1d {
    config: DenoiserConfig,
}

struct Ctx<'a> {
    vars: &'a ParamVars,
    /// `Mish(timestep embedding ++ projected condition)`, shape `[batch, film_input_dim]`.
    film_in: Var,
    groups: usize,
}

impl UNet1d {
    pub fn new(config: DenoiserConfig) -> Result<Self, DenoiserError> {
        config.validate()?;
        Ok(UNet1d { config })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// `(name, cin, cout)` of every residual block, in evaluation order.
    fn blocks(&self) -> Vec<(String, usize, usize)> {
        let w = self.config.channel_widths;
        let mut blocks = Vec::new();
        let mut cin = self.config.action_dim;
        for (i, &c) in w.iter().enumerate() {
            blocks.push((format!("down{i}.res"), cin, c));
            cin = c;
        }
        blocks.push(("mid.res".to_string(), w[3], w[3]));
        for i in (0..4).rev() {
            let cout = if i == 0 { w[0] } else { w[i - 1] };
            let cur = if i == 3 { w[3] } else { w[i] };
            blocks.push((format!("up{i}.res"), cur + w[i], cout));
        }
        blocks
    }

    /// Fresh parameters with fan-in scaled uniform weights, unit group-norm
    /// scales, and zero FiLM projections so that `gamma = 1` and `beta = 0`.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let cfg = &self.config;
        let mut rng = rng::stream(seed, rng::ids::INIT);
        let mut p = ParamStore::new();
        let mut uniform = |p: &mut ParamStore, name: String, shape: &[usize], fan_in: usize, scale: f64| {
            let bound = scale / (fan_in as f64).sqrt();
            p.insert(name, Array::uniform(shape, bound, &mut rng));
        };
        uniform(&mut p, "cond_proj.w".into(), &[cfg.cond_input_dim, cfg.cond_dim], cfg.cond_input_dim, 1.0);
        uniform(&mut p, "cond_proj.b".into(), &[1, cfg.cond_dim], cfg.cond_input_dim, 1.0);
        let fd = cfg.film_input_dim();
        for (name, cin, cout) in self.blocks() {
            uniform(&mut p, format!("{name}.conv1.w"), &[cout, cin, 3], cin * 3, 1.0);
            uniform(&mut p, format!("{name}.conv1.b"), &[cout], cin * 3, 1.0);
            p.insert(format!("{name}.gn1.w"), Array::full(&[cout], 1.0));
            p.insert(format!("{name}.gn1.b"), Array::zeros(&[cout]));
            p.insert(format!("{name}.film.w"), Array::zeros(&[fd, 2 * cout]));
            p.insert(format!("{name}.film.b"), Array::zeros(&[1, 2 * cout]));
            uniform(&mut p, format!("{name}.conv2.w"), &[cout, cout, 3], cout * 3, 1.0);
            uniform(&mut p, format!("{name}.conv2.b"), &[cout], cout * 3, 1.0);
            p.insert(format!("{name}.gn2.w"), Array::full(&[cout], 1.0));
            p.insert(format!("{name}.gn2.b"), Array::zeros(&[cout]));
            if cin != cout {
                uniform(&mut p, format!("{name}.skip.w"), &[cout, cin, 1], cin, 1.0);
                uniform(&mut p, format!("{name}.skip.b"), &[cout], cin, 1.0);
            }
        }
        for (i, &c) in cfg.channel_widths.iter().enumerate() {
            uniform(&mut p, format!("down{i}.sample.w"), &[c, c, 3], c * 3, 1.0);
            uniform(&mut p, format!("down{i}.sample.b"), &[c], c * 3, 1.0);
        }
        for i in (0..4).rev() {
            let c = if i == 3 { cfg.channel_widths[3] } else { cfg.channel_widths[i] };
            uniform(&mut p, format!("up{i}.sample.w"), &[c, c, 4], c * 4, 1.0);
            uniform(&mut p, format!("up{i}.sample.b"), &[c], c * 4, 1.0);
        }
        let w0 = cfg.channel_widths[0];
        uniform(&mut p, "out.w".into(), &[cfg.action_dim, w0, 1], w0, OUTPUT_INIT_SCALE);
        uniform(&mut p, "out.b".into(), &[cfg.action_dim], w0, OUTPUT_INIT_SCALE);
        p
    }

    fn res_block(&self, tape: &mut Tape, ctx: &Ctx, name: &str, x: Var, cin: usize, cout: usize) -> Result<Var, AdError> {
        let v = |s: &str| ctx.vars.get(&format!("{name}.{s}"));
        let h = tape.conv1d(x, v("conv1.w")?, Some(v("conv1.b")?), 1, 1)?;
        let h = tape.group_norm(h, v("gn1.w")?, v("gn1.b")?, ctx.groups, GROUP_NORM_EPS)?;
        let h = tape.mish(h);

        let film = tape.matmul(ctx.film_in, v("film.w")?)?;
        let film = tape.add(film, v("film.b")?)?;
        let batch = tape.shape(film)[0];
        let gamma = tape.slice(film, 1, 0, cout)?;
        let gamma = tape.add_scalar(gamma, 1.0);
        let gamma = tape.reshape(gamma, &[batch, cout, 1])?;
        let beta = tape.slice(film, 1, cout, 2 * cout)?;
        let beta = tape.reshape(beta, &[batch, cout, 1])?;
        let h = tape.mul(h, gamma)?;
        let h = tape.add(h, beta)?;

        let h = tape.conv1d(h, v("conv2.w")?, Some(v("conv2.b")?), 1, 1)?;
        let h = tape.group_norm(h, v("gn2.w")?, v("gn2.b")?, ctx.groups, GROUP_NORM_EPS)?;
        let h = tape.mish(h);
        let skip = if cin != cout {
            tape.conv1d(x, v("skip.w")?, Some(v("skip.b")?), 1, 0)?
        } else {
            x
        };
        tape.add(h, skip)
    }

    /// Records the forward pass.
    ///
    /// `x`: `[batch, action_dim, horizon]`; `t`: one diffusion step per batch
    /// row; `cond`: `[batch, cond_input_dim]`. Returns `[batch, action_dim, horizon]`.
    pub fn forward(&self, tape: &mut Tape, vars: &ParamVars, x: Var, t: &[usize], cond: Var) -> Result<Var, DenoiserError> {
        let cfg = &self.config;
        let xs = tape.shape(x).to_vec();
        if xs.len() != 3 || xs[1] != cfg.action_dim || xs[2] != cfg.horizon || t.len() != xs[0] {
            return Err(DenoiserError::ShapeMismatch(format!(
                "x {xs:?} with {} steps, expected [{}, {}, {}]",
                t.len(),
                t.len(),
                cfg.action_dim,
                cfg.horizon
            )));
        }
        let batch = xs[0];
        if tape.shape(cond) != [batch, cfg.cond_input_dim] {
            return Err(DenoiserError::ShapeMismatch(format!(
                "condition {:?}, expected [{batch}, {}]",
                tape.shape(cond),
                cfg.cond_input_dim
            )));
        }

        let mut temb = Vec::with_capacity(batch * cfg.timestep_embed_dim);
        for &ti in t {
            temb.extend(timestep_embedding(ti, cfg.timestep_embed_dim)?);
        }
        let temb = tape.constant(Array::new(vec![batch, cfg.timestep_embed_dim], temb)?);
        let c = tape.matmul(cond, vars.get("cond_proj.w")?)?;
        let c = tape.add(c, vars.get("cond_proj.b")?)?;
        let c = tape.concat(&[temb, c], 1)?;
        let film_in = tape.mish(c);
        let ctx = Ctx {
            vars,
            film_in,
            groups: cfg.groups,
        };

        let hp = cfg.padded_horizon();
        let mut h = if hp != cfg.horizon {
            let idx: Vec<usize> = (0..hp).map(|i| i.min(cfg.horizon - 1)).collect();
            tape.gather(x, 2, &idx)?
        } else {
            x
        };

        let blocks = self.blocks();
        let mut skips = Vec::with_capacity(4);
        for (i, (name, cin, cout)) in blocks[..4].iter().enumerate() {
            h = self.res_block(tape, &ctx, name, h, *cin, *cout)?;
            skips.push(h);
            let w = vars.get(&format!("down{i}.sample.w"))?;
            let b = vars.get(&format!("down{i}.sample.b"))?;
            h = tape.conv1d(h, w, Some(b), 2, 1)?;
        }
        let (name, cin, cout) = &blocks[4];
        h = self.res_block(tape, &ctx, name, h, *cin, *cout)?;
        for (j, (name, cin, cout)) in blocks[5..].iter().enumerate() {
            let i = 3 - j;
            let w = vars.get(&format!("up{i}.sample.w"))?;
            let b = vars.get(&format!("up{i}.sample.b"))?;
            h = tape.conv_transpose1d(h, w, Some(b), 2, 1)?;
            h = tape.concat(&[h, skips[i]], 1)?;
            h = self.res_block(tape, &ctx, name, h, *cin, *cout)?;
        }
        let out = tape.conv1d(h, vars.get("out.w")?, Some(vars.get("out.b")?), 1, 0)?;
        let out = if hp != cfg.horizon {
            tape.slice(out, 2, 0, cfg.horizon)?
        } else {
            out
        };
        Ok(out)
    }

    /// Forward pass on plain arrays. `x_t` is `[batch, action_dim, horizon]`.
    pub fn predict(&self, params: &ParamStore, x_t: Array, t: &[usize], cond: Array) -> Result<Array, DenoiserError> {
        let mut tape = Tape::new();
        let vars = params.bind_frozen(&mut tape);
        let x = tape.constant(x_t);
        let c = tape.constant(cond);
        let out = self.forward(&mut tape, &vars, x, t, c)?;
        Ok(tape.value(out).clone())
    }
}

/// A network together with a parameter set, usable as a [`Denoiser`] on
/// time-major flat chunks.
#[derive(Debug, Clone)]
pub struct DenoiserModel {
    pub net: UNet1d,
    pub params: ParamStore,
}

impl DenoiserModel {
    pub fn new(net: UNet1d, params: ParamStore) -> Self {
        DenoiserModel { net, params }
    }
}

impl Denoiser for DenoiserModel {
    fn predict_noise(&self, x_t: &[f64], t: usize, cond: &[f64]) -> Result<Vec<f64>, DiffusionError> {
        let cfg = self.net.config();
        if x_t.len() != cfg.chunk_len() || cond.len() != cfg.cond_input_dim {
            return Err(DiffusionError::ShapeMismatch(format!(
                "chunk {} / condition {}, expected {} / {}",
                x_t.len(),
                cond.len(),
                cfg.chunk_len(),
                cfg.cond_input_dim
            )));
        }
        let x = Array::new(
            vec![1, cfg.action_dim, cfg.horizon],
            chunk_to_channels(x_t, cfg.horizon, cfg.action_dim),
        )?;
        let c = Array::new(vec![1, cfg.cond_input_dim], cond.to_vec())?;
        let out = self.net.predict(&self.params, x, &[t], c)?;
        Ok(channels_to_chunk(out.data(), cfg.horizon, cfg.action_dim))
    }
}
