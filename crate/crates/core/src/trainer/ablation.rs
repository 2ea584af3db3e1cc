//! The 2x2 ablation grid: oracle term on/off crossed with the residual path
//! on/off, over several seeds and songs.
//!
//! Each (action mode, seed) pair is trained once, keeping EMA snapshots.
//! Every snapshot is rolled out on every song, and each oracle setting picks
//! the snapshot with the highest mean composite reward under its own weights
//! (the oracle setting with `delta = 0` never calls the oracle). The reported
//! F1 of a configuration is the mean over songs of the selected snapshot.

use serde::{Deserialize, Serialize};

use crate::denoiser::DenoiserConfig;
use crate::diffusion::DEFAULT_INFERENCE_STEPS;
use crate::env::EnvConfig;
use crate::kinematics::{IkOptions, DEFAULT_RESIDUAL_SCALE};
use crate::midi::GoalTrajectory;
use crate::oracle::Oracle;
use crate::reward::{AudioRewardMode, RewardBreakdown};

use super::eval::{ConfigF1, EvalReport, SongRow};
use super::policy::{rollout, ActionMode, DiffusionPolicy, RolloutOptions, RolloutResult};
use super::{build_dataset, synthesize_demo, train, Dataset, Demonstration, TrainConfig, TrainError};

/// One cell of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCell {
    pub oracle: bool,
    pub residual: bool,
}

impl GridCell {
    /// Cells in reporting order.
    pub const ALL: [GridCell; 4] = [
        GridCell { oracle: true, residual: true },
        GridCell { oracle: false, residual: true },
        GridCell { oracle: true, residual: false },
        GridCell { oracle: false, residual: false },
    ];

    pub fn label(&self) -> &'static str {
        match (self.oracle, self.residual) {
            (true, true) => "oracle+residual",
            (false, true) => "no_oracle+residual",
            (true, false) => "oracle+no_residual",
            (false, false) => "no_oracle+no_residual",
        }
    }

    pub fn mode(&self) -> ActionMode {
        if self.residual {
            ActionMode::Residual
        } else {
            ActionMode::Absolute
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub denoiser: DenoiserConfig,
    pub residual_scale: f64,
    pub inference_steps: usize,
    pub audio_mode: AudioRewardMode,
    pub ik: IkOptions,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            seeds: (0..5).collect(),
            train: TrainConfig {
                epochs: 50,
                steps_per_epoch: 20,
                batch: 32,
                lr_max: 1e-3,
                snapshot_every: 250,
                ..TrainConfig::default()
            },
            denoiser: DenoiserConfig::desk(),
            residual_scale: DEFAULT_RESIDUAL_SCALE,
            inference_steps: DEFAULT_INFERENCE_STEPS,
            audio_mode: AudioRewardMode::Cosine,
            ik: IkOptions::default(),
        }
    }
}

/// Result of one grid cell for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub config: String,
    pub oracle: bool,
    pub residual: bool,
    /// Training step of the selected EMA snapshot.
    pub selected_step: usize,
    pub mean_f1: f64,
    pub songs: Vec<SongRow>,
    /// Composite reward averaged over songs for the selected snapshot.
    pub reward: RewardBreakdown,
    pub ik_calls: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub rows: Vec<AblationRow>,
}

impl AblationResult {
    /// Per-configuration F1 over seeds, in [`GridCell::ALL`] order.
    pub fn summary(&self) -> Vec<ConfigF1> {
        GridCell::ALL
            .iter()
            .filter_map(|cell| {
                let f1: Vec<f64> = self
                    .rows
                    .iter()
                    .filter(|r| r.oracle == cell.oracle && r.residual == cell.residual)
                    .map(|r| r.mean_f1)
                    .collect();
                (!f1.is_empty()).then(|| ConfigF1 {
                    config: cell.label().to_string(),
                    mean_f1: f1.iter().sum::<f64>() / f1.len() as f64,
                    f1_per_seed: f1,
                })
            })
            .collect()
    }

    /// Mean F1 of a cell over seeds.
    pub fn mean_f1(&self, cell: GridCell) -> Option<f64> {
        self.summary().into_iter().find(|c| c.config == cell.label()).map(|c| c.mean_f1)
    }

    /// `oracle+residual >= no_oracle+residual > both no_residual cells`, and
    /// `no_oracle+no_residual <= oracle+no_residual`.
    pub fn ordering_holds(&self) -> bool {
        let [a, b, c, d] = GridCell::ALL.map(|cell| self.mean_f1(cell));
        match (a, b, c, d) {
            (Some(a), Some(b), Some(c), Some(d)) => a >= b && b > c && b > d && d <= c,
            _ => false,
        }
    }

    pub fn report(&self) -> EvalReport {
        EvalReport {
            ablation: self.summary(),
            ..Default::default()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("ablation result serializes")
    }
}

/// Rollouts of one snapshot on every song.
struct SnapshotRun {
    step: usize,
    results: Vec<RolloutResult>,
}

fn mean_breakdown(items: &[RewardBreakdown]) -> RewardBreakdown {
    let n = items.len().max(1) as f64;
    let sum = |f: fn(&RewardBreakdown) -> f64| items.iter().map(f).sum::<f64>() / n;
    RewardBreakdown {
        r_task: sum(|r| r.r_task),
        r_audio: sum(|r| r.r_audio),
        r_style: sum(|r| r.r_style),
        r_llm_left: sum(|r| r.r_llm_left),
        r_llm_right: sum(|r| r.r_llm_right),
        r_total: sum(|r| r.r_total),
    }
}

fn train_mode(
    demos: &[(String, Demonstration)],
    env_cfg: &EnvConfig,
    cfg: &AblationConfig,
    mode: ActionMode,
    seed: u64,
) -> Result<Vec<SnapshotRun>, TrainError> {
    let mut raw = Vec::new();
    for (_, demo) in demos {
        raw.extend(build_dataset(demo, env_cfg, mode, cfg.denoiser.horizon, cfg.residual_scale)?);
    }
    let data = Dataset::new(raw)?;
    let train_cfg = TrainConfig {
        seed,
        ..cfg.train.clone()
    };
    let outcome = train(cfg.denoiser.clone(), &data, &train_cfg)?;
    let opts = |song: &str| RolloutOptions {
        mode,
        residual_scale: cfg.residual_scale,
        ik: cfg.ik,
        song: song.to_string(),
        audio_mode: cfg.audio_mode,
    };
    let mut runs = Vec::with_capacity(outcome.snapshots.len());
    for (step, params) in &outcome.snapshots {
        let mut results = Vec::with_capacity(demos.len());
        for (name, demo) in demos {
            let mut policy = DiffusionPolicy::from_outcome(
                &outcome,
                params.clone(),
                train_cfg.diffusion_steps,
                cfg.inference_steps,
                seed,
            )?;
            results.push(rollout(&mut policy, demo, env_cfg, &opts(name), None)?);
        }
        runs.push(SnapshotRun { step: *step, results });
    }
    Ok(runs)
}

fn select(
    runs: &[SnapshotRun],
    cell: GridCell,
    seed: u64,
    env_cfg: &EnvConfig,
    oracle: &dyn Oracle,
) -> Result<AblationRow, TrainError> {
    let mut weights = env_cfg.reward_weights;
    if !cell.oracle {
        weights.delta = 0.0;
    }
    let mut best: Option<(f64, AblationRow)> = None;
    for run in runs {
        let mut rewards = Vec::with_capacity(run.results.len());
        for r in &run.results {
            rewards.push(r.score(&weights, Some(oracle))?.0);
        }
        let reward = mean_breakdown(&rewards);
        if best.as_ref().is_some_and(|(b, _)| reward.r_total <= *b) {
            continue;
        }
        let songs: Vec<SongRow> = run.results.iter().map(|r| SongRow::new(r.song.clone(), &r.prf)).collect();
        let mean_f1 = songs.iter().map(|s| s.f1).sum::<f64>() / songs.len().max(1) as f64;
        best = Some((
            reward.r_total,
            AblationRow {
                seed,
                config: cell.label().to_string(),
                oracle: cell.oracle,
                residual: cell.residual,
                selected_step: run.step,
                mean_f1,
                songs,
                reward,
                ik_calls: run.results.iter().map(|r| r.ik_calls).sum(),
            },
        ));
    }
    best.map(|(_, row)| row)
        .ok_or_else(|| TrainError::InvalidConfig("training produced no snapshots".into()))
}

/// Runs the grid on `songs`, returning four rows per seed ordered by seed
/// and then by [`GridCell::ALL`].
pub fn ablation_run(
    songs: &[(String, GoalTrajectory)],
    env_cfg: &EnvConfig,
    cfg: &AblationConfig,
    oracle: &dyn Oracle,
) -> Result<AblationResult, TrainError> {
    if songs.is_empty() || cfg.seeds.is_empty() {
        return Err(TrainError::InvalidConfig("ablation needs at least one song and one seed".into()));
    }
    let mut demos = Vec::with_capacity(songs.len());
    for (name, traj) in songs {
        demos.push((name.clone(), synthesize_demo(traj, &env_cfg.chain, &env_cfg.geometry, &cfg.ik)?));
    }
    let mut rows = Vec::with_capacity(4 * cfg.seeds.len());
    for &seed in &cfg.seeds {
        let residual = train_mode(&demos, env_cfg, cfg, ActionMode::Residual, seed)?;
        let absolute = train_mode(&demos, env_cfg, cfg, ActionMode::Absolute, seed)?;
        for cell in GridCell::ALL {
            let runs = if cell.residual { &residual } else { &absolute };
            let row = select(runs, cell, seed, env_cfg, oracle)?;
            log::info!("seed {seed} {}: F1 {:.3} (step {})", row.config, row.mean_f1, row.selected_step);
            rows.push(row);
        }
    }
    Ok(AblationResult { rows })
}
