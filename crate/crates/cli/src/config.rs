//! Run configuration: TOML file, environment variables and command-line
//! flags merged with precedence flags > environment > file > defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pianist_core::denoiser::DenoiserConfig;
use pianist_core::diffusion::DEFAULT_INFERENCE_STEPS;
use pianist_core::env::EnvConfig;
use pianist_core::kinematics::{IkOptions, DEFAULT_RESIDUAL_SCALE};
use pianist_core::oracle::{HttpOracleConfig, ENV_ORACLE_AUTH, ENV_ORACLE_TIMEOUT_S, ENV_ORACLE_URL};
use pianist_core::reward::AudioRewardMode;
use pianist_core::trainer::{AblationConfig, ActionMode, TrainConfig};

use crate::error::CliError;

pub const ENV_SEED: &str = "PIANIST_SEED";
pub const ENV_OUT_DIR: &str = "PIANIST_OUT_DIR";
pub const ENV_ORACLE: &str = "PIANIST_ORACLE";
pub const ENV_AUDIO_REWARD: &str = "PIANIST_AUDIO_REWARD";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum OracleChoice {
    #[default]
    Scripted,
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HttpSection {
    pub url: Option<String>,
    pub auth_header: Option<String>,
    pub timeout_s: f64,
    pub retries: u32,
}

impl Default for HttpSection {
    fn default() -> Self {
        let base = HttpOracleConfig::new("");
        HttpSection {
            url: None,
            auth_header: None,
            timeout_s: base.timeout_s,
            retries: base.retries,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSection {
    pub seeds: usize,
    pub train: TrainConfig,
}

impl Default for AblationSection {
    fn default() -> Self {
        let base = AblationConfig::default();
        AblationSection {
            seeds: base.seeds.len(),
            train: base.train,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub oracle: OracleChoice,
    pub audio_reward: AudioRewardMode,
    pub mode: ActionMode,
    pub residual_scale: f64,
    pub inference_steps: usize,
    /// MIDI files used by `train` and `ablate`; empty selects the built-in toy songs.
    pub songs: Vec<PathBuf>,
    pub env: EnvConfig,
    pub ik: IkOptions,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub ablation: AblationSection,
    pub http: HttpSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            out_dir: PathBuf::from("out"),
            oracle: OracleChoice::Scripted,
            audio_reward: AudioRewardMode::Cosine,
            mode: ActionMode::Residual,
            residual_scale: DEFAULT_RESIDUAL_SCALE,
            inference_steps: DEFAULT_INFERENCE_STEPS,
            songs: Vec::new(),
            env: EnvConfig::default(),
            ik: IkOptions::default(),
            denoiser: DenoiserConfig::desk(),
            train: TrainConfig::default(),
            ablation: AblationSection::default(),
            http: HttpSection::default(),
        }
    }
}

/// Values given on the command line; `None` defers to lower layers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub oracle: Option<OracleChoice>,
    pub audio_reward: Option<AudioRewardMode>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Parse(format!("config: {e}")))
    }

    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::BadArgs(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_toml(&text)
            }
        }
    }

    /// Applies environment variables (read through `get`), then flags.
    pub fn merge(mut self, get: impl Fn(&str) -> Option<String>, flags: &Overrides) -> Result<Self, CliError> {
        let bad = |name: &str, v: &str| CliError::BadArgs(format!("{name}={v} is invalid"));
        if let Some(v) = get(ENV_SEED) {
            self.seed = v.parse().map_err(|_| bad(ENV_SEED, &v))?;
        }
        if let Some(v) = get(ENV_OUT_DIR) {
            self.out_dir = PathBuf::from(v);
        }
        if let Some(v) = get(ENV_ORACLE) {
            self.oracle = match v.as_str() {
                "scripted" => OracleChoice::Scripted,
                "http" => OracleChoice::Http,
                _ => return Err(bad(ENV_ORACLE, &v)),
            };
        }
        if let Some(v) = get(ENV_AUDIO_REWARD) {
            self.audio_reward = v.parse().map_err(|_| bad(ENV_AUDIO_REWARD, &v))?;
        }
        if let Some(v) = get(ENV_ORACLE_URL) {
            self.http.url = Some(v);
        }
        if let Some(v) = get(ENV_ORACLE_AUTH) {
            self.http.auth_header = Some(v);
        }
        if let Some(v) = get(ENV_ORACLE_TIMEOUT_S) {
            self.http.timeout_s = v.parse().ok().filter(|t: &f64| *t > 0.0).ok_or_else(|| bad(ENV_ORACLE_TIMEOUT_S, &v))?;
        }
        if let Some(v) = flags.seed {
            self.seed = v;
        }
        if let Some(v) = &flags.out_dir {
            self.out_dir = v.clone();
        }
        if let Some(v) = flags.oracle {
            self.oracle = v;
        }
        if let Some(v) = flags.audio_reward {
            self.audio_reward = v;
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.train.validate().map_err(|e| CliError::BadArgs(e.to_string()))?;
        self.ablation.train.validate().map_err(|e| CliError::BadArgs(e.to_string()))?;
        self.denoiser.validate().map_err(|e| CliError::BadArgs(e.to_string()))?;
        self.env.reward_weights.validate().map_err(|e| CliError::BadArgs(e.to_string()))?;
        if !(self.residual_scale.is_finite() && self.residual_scale >= 0.0) {
            return Err(CliError::BadArgs(format!("residual_scale {} must be non-negative", self.residual_scale)));
        }
        if self.inference_steps == 0 || self.inference_steps > self.train.diffusion_steps {
            return Err(CliError::BadArgs(format!(
                "inference_steps {} must be in 1..={}",
                self.inference_steps, self.train.diffusion_steps
            )));
        }
        if self.oracle == OracleChoice::Http && self.http.url.is_none() {
            return Err(CliError::BadArgs(format!("--oracle http needs {ENV_ORACLE_URL} or [http] url")));
        }
        Ok(())
    }

    pub fn http_oracle(&self) -> Option<HttpOracleConfig> {
        self.http.url.as_ref().map(|url| HttpOracleConfig {
            url: url.clone(),
            auth_header: self.http.auth_header.clone(),
            timeout_s: self.http.timeout_s,
            retries: self.http.retries,
        })
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            residual_scale: self.residual_scale,
            ..self.train.clone()
        }
    }

    pub fn ablation_config(&self, seeds: Option<usize>) -> AblationConfig {
        let n = seeds.unwrap_or(self.ablation.seeds) as u64;
        AblationConfig {
            seeds: (self.seed..self.seed + n).collect(),
            train: self.ablation.train.clone(),
            denoiser: self.denoiser.clone(),
            residual_scale: self.residual_scale,
            inference_steps: self.inference_steps,
            audio_mode: self.audio_reward,
            ik: self.ik,
        }
    }
}
