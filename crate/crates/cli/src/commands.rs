//! Subcommand implementations. Each writes its machine-readable output as
//! JSON into the output directory and prints a human-readable summary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use pianist_core::autodiff::ParamStore;
use pianist_core::kinematics::NUM_FINGERTIPS;
use pianist_core::midi::{parse_smf, to_goal_trajectory, GoalTrajectory};
use pianist_core::oracle::{HttpOracle, OracleKind, OracleOutcome, ScriptedOracle};
use pianist_core::reward::{synthesize_audio, write_wav, RewardBreakdown, SAMPLE_RATE_HZ};
use pianist_core::trainer::policy::TraceRecord;
use pianist_core::trainer::{
    ablation_run, build_dataset, rollout, synthesize_demo, toy, train, ActionMode, CondNormalizer, Dataset,
    Demonstration, EvalReport, Normalizer, PolicyCheckpoint, RolloutOptions, RolloutResult, SongRow, ZeroStub,
};

use crate::config::{OracleChoice, RunConfig};
use crate::error::CliError;

/// Prefix selecting a built-in song instead of a MIDI file.
pub const TOY_PREFIX: &str = "toy:";

pub const CHECKPOINT_FILE: &str = "policy.ckpt";

/// Loads a song from a MIDI file or a `toy:NAME` reference.
pub fn load_song(path: &Path, rate_hz: f64) -> Result<(String, GoalTrajectory), CliError> {
    let text = path.to_string_lossy();
    if let Some(name) = text.strip_prefix(TOY_PREFIX) {
        return toy::toy_suite()
            .into_iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| CliError::BadArgs(format!("unknown toy song `{name}`")));
    }
    let bytes = std::fs::read(path).map_err(|e| missing_input(path, e))?;
    let song = parse_smf(&bytes)?;
    let name = path.file_stem().map_or_else(|| text.to_string(), |s| s.to_string_lossy().into_owned());
    Ok((name, to_goal_trajectory(&song, rate_hz)))
}

fn missing_input(path: &Path, e: std::io::Error) -> CliError {
    CliError::BadArgs(format!("cannot read {}: {e}", path.display()))
}

fn load_songs(cfg: &RunConfig) -> Result<Vec<(String, GoalTrajectory)>, CliError> {
    if cfg.songs.is_empty() {
        return Ok(toy::toy_suite());
    }
    cfg.songs.iter().map(|p| load_song(p, cfg.env.control_rate_hz)).collect()
}

fn demo_for(cfg: &RunConfig, traj: &GoalTrajectory) -> Result<Demonstration, CliError> {
    Ok(synthesize_demo(traj, &cfg.env.chain, &cfg.env.geometry, &cfg.ik)?)
}

fn oracle(cfg: &RunConfig) -> Result<OracleKind, CliError> {
    match cfg.oracle {
        OracleChoice::Scripted => Ok(OracleKind::Scripted(ScriptedOracle)),
        OracleChoice::Http => cfg
            .http_oracle()
            .map(|c| OracleKind::Http(HttpOracle::new(c)))
            .ok_or_else(|| CliError::BadArgs("http oracle needs a url".into())),
    }
}

fn out_file(cfg: &RunConfig, name: &str) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(&cfg.out_dir).map_err(|e| CliError::io(&cfg.out_dir, e))?;
    Ok(cfg.out_dir.join(name))
}

fn write_text(cfg: &RunConfig, name: &str, text: &str) -> Result<PathBuf, CliError> {
    let path = out_file(cfg, name)?;
    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("output serializes");
    s.push('\n');
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestStats {
    pub song: String,
    pub control_rate_hz: f64,
    pub frames: usize,
    /// Distinct keys pressed anywhere in the song.
    pub active_keys: usize,
    /// Sum over frames of the keys down in that frame.
    pub active_key_frames: usize,
    pub keys: Vec<usize>,
    pub dropped_notes: usize,
}

pub fn ingest(cfg: &RunConfig, midi: &Path) -> Result<IngestStats, CliError> {
    let (song, traj) = load_song(midi, cfg.env.control_rate_hz)?;
    let keys: Vec<usize> = traj.used_keys().keys().collect();
    let stats = IngestStats {
        song,
        control_rate_hz: traj.control_rate_hz,
        frames: traj.len(),
        active_keys: keys.len(),
        active_key_frames: traj.active_key_count(),
        keys,
        dropped_notes: traj.dropped_notes,
    };
    write_text(cfg, "ingest.json", &to_json(&stats))?;
    println!("song: {}", stats.song);
    println!("frames: {}", stats.frames);
    println!("active keys: {}", stats.active_keys);
    println!("active key-frames: {}", stats.active_key_frames);
    if stats.dropped_notes > 0 {
        println!("dropped notes (off keyboard): {}", stats.dropped_notes);
    }
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoStats {
    pub song: String,
    pub frames: usize,
    pub assigned_presses: usize,
    pub max_ik_residual_m: f64,
    pub mean_ik_residual_m: f64,
    /// Frame F1 of executing the demonstration's IK solutions in the environment.
    pub replay: SongRow,
}

pub fn demo(cfg: &RunConfig, midi: &Path) -> Result<DemoStats, CliError> {
    let (song, traj) = load_song(midi, cfg.env.control_rate_hz)?;
    let demo = demo_for(cfg, &traj)?;
    let mut stub = ZeroStub {
        horizon: cfg.denoiser.horizon,
    };
    let opts = RolloutOptions {
        mode: ActionMode::Residual,
        residual_scale: cfg.residual_scale,
        ik: cfg.ik,
        song: song.clone(),
        audio_mode: cfg.audio_reward,
    };
    let replay = rollout(&mut stub, &demo, &cfg.env, &opts, None)?;
    let n = demo.ik_residuals_m.len().max(1) as f64;
    let stats = DemoStats {
        song: song.clone(),
        frames: demo.len(),
        assigned_presses: demo.assignments.iter().flatten().filter(|a| a.is_some()).count(),
        max_ik_residual_m: demo.ik_residuals_m.iter().copied().fold(0.0, f64::max),
        mean_ik_residual_m: demo.ik_residuals_m.iter().sum::<f64>() / n,
        replay: SongRow::new(song, &replay.prf),
    };
    write_text(cfg, "demo.json", &to_json(&stats))?;
    println!("song: {}", stats.song);
    println!("frames: {}", stats.frames);
    println!("assigned presses: {}", stats.assigned_presses);
    println!("IK residual: max {:.2e} m, mean {:.2e} m", stats.max_ik_residual_m, stats.mean_ik_residual_m);
    println!(
        "replay: precision {:.3} recall {:.3} F1 {:.3}",
        stats.replay.precision, stats.replay.recall, stats.replay.f1
    );
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub songs: Vec<String>,
    pub samples: usize,
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub checkpoint: String,
    pub snapshots: Vec<String>,
}

pub fn train_cmd(cfg: &RunConfig, zero_stub: bool) -> Result<TrainSummary, CliError> {
    let train_cfg = cfg.train_config();
    let songs = load_songs(cfg)?;
    let names: Vec<String> = songs.iter().map(|(n, _)| n.clone()).collect();
    let ckpt_path = out_file(cfg, CHECKPOINT_FILE)?;
    if zero_stub {
        let ckpt = PolicyCheckpoint {
            denoiser: cfg.denoiser.clone(),
            mode: ActionMode::Residual,
            residual_scale: cfg.residual_scale,
            diffusion_steps: train_cfg.diffusion_steps,
            inference_steps: cfg.inference_steps,
            action_norm: Normalizer::unit(cfg.denoiser.action_dim),
            cond_norm: CondNormalizer::identity(),
            zero_stub: true,
        };
        ckpt.write(&ckpt_path, &ParamStore::new())?;
        println!("wrote zero-stub checkpoint {}", ckpt_path.display());
        let summary = TrainSummary {
            songs: names,
            samples: 0,
            steps: 0,
            final_loss: None,
            checkpoint: CHECKPOINT_FILE.into(),
            snapshots: Vec::new(),
        };
        write_text(cfg, "train.json", &to_json(&summary))?;
        return Ok(summary);
    }
    let mut raw = Vec::new();
    for (_, traj) in &songs {
        let demo = demo_for(cfg, traj)?;
        raw.extend(build_dataset(&demo, &cfg.env, cfg.mode, cfg.denoiser.horizon, cfg.residual_scale)?);
    }
    let samples = raw.len();
    let data = Dataset::new(raw)?;
    log::info!("training on {samples} samples from {} songs", songs.len());
    let outcome = train(cfg.denoiser.clone(), &data, &train_cfg)?;
    let ckpt = PolicyCheckpoint {
        inference_steps: cfg.inference_steps,
        ..PolicyCheckpoint::from_outcome(&outcome, cfg.mode, cfg.residual_scale, train_cfg.diffusion_steps)
    };
    ckpt.write(&ckpt_path, &outcome.ema_params)?;
    let mut snapshots = Vec::new();
    for (step, params) in &outcome.snapshots {
        let name = format!("snapshot_{step:06}.ckpt");
        ckpt.write(&out_file(cfg, &name)?, params)?;
        snapshots.push(name);
    }
    let mut curve = String::from("step,epoch,loss\n");
    for (i, loss) in outcome.losses.iter().enumerate() {
        let _ = writeln!(curve, "{},{},{loss}", i + 1, i / train_cfg.steps_per_epoch);
    }
    write_text(cfg, "loss.csv", &curve)?;
    let summary = TrainSummary {
        songs: names,
        samples,
        steps: outcome.losses.len(),
        final_loss: outcome.losses.last().copied(),
        checkpoint: CHECKPOINT_FILE.into(),
        snapshots,
    };
    write_text(cfg, "train.json", &to_json(&summary))?;
    println!("trained {} steps on {} samples", summary.steps, summary.samples);
    if let Some(l) = summary.final_loss {
        println!("final loss: {l:.6}");
    }
    println!("wrote {}", ckpt_path.display());
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutReport {
    pub report: EvalReport,
    pub reward: RewardBreakdown,
    pub oracle: Option<OracleOutcome>,
    pub ik_calls: usize,
}

pub fn rollout_cmd(cfg: &RunConfig, checkpoint: &Path, midi: &Path) -> Result<RolloutReport, CliError> {
    if !checkpoint.is_file() {
        return Err(CliError::BadArgs(format!("checkpoint {} not found", checkpoint.display())));
    }
    let (ckpt, params) = PolicyCheckpoint::read(checkpoint)?;
    let (song, traj) = load_song(midi, cfg.env.control_rate_hz)?;
    let demo = demo_for(cfg, &traj)?;
    let mut policy = ckpt.policy(params, cfg.seed)?;
    let opts = RolloutOptions {
        mode: ckpt.mode,
        residual_scale: ckpt.residual_scale,
        ik: cfg.ik,
        song: song.clone(),
        audio_mode: cfg.audio_reward,
    };
    let oracle = oracle(cfg)?;
    let result: RolloutResult = rollout(policy.as_mut(), &demo, &cfg.env, &opts, Some(&oracle))?;
    let trace = write_text(cfg, "trace.ndjson", &result.trace_ndjson())?;
    let wav = out_file(cfg, "rollout.wav")?;
    let audio = synthesize_audio(&result.pressed, cfg.env.control_rate_hz);
    write_wav(&wav, &audio, SAMPLE_RATE_HZ).map_err(|e| CliError::Failed(format!("{}: {e}", wav.display())))?;
    let mut report = EvalReport::from_rows(vec![SongRow::new(song, &result.prf)]);
    report.trace_paths = vec![file_name(&trace)];
    let out = RolloutReport {
        report,
        reward: result.reward,
        oracle: result.oracle,
        ik_calls: result.ik_calls,
    };
    write_text(cfg, "report.json", &to_json(&out))?;
    let table = out.report.to_table();
    write_text(cfg, "report.txt", &table)?;
    print!("{table}");
    println!("r_total: {:.6}", out.reward.r_total);
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name().map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

pub fn ablate(cfg: &RunConfig, seeds: Option<usize>) -> Result<pianist_core::trainer::AblationResult, CliError> {
    let abl = cfg.ablation_config(seeds);
    if abl.seeds.is_empty() {
        return Err(CliError::BadArgs("--seeds must be at least 1".into()));
    }
    let songs = load_songs(cfg)?;
    let oracle = oracle(cfg)?;
    let result = ablation_run(&songs, &cfg.env, &abl, &oracle)?;
    write_text(cfg, "ablation.json", &result.to_json())?;
    let table = result.report().to_table();
    write_text(cfg, "ablation.txt", &table)?;
    print!("{table}");
    println!("rows: {}", result.rows.len());
    println!("ordering holds: {}", result.ordering_holds());
    Ok(result)
}

/// Fingertip x positions over an episode, one series per finger.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajSeries {
    pub frames: Vec<usize>,
    pub fingers: Vec<FingerSeries>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerSeries {
    pub finger: usize,
    pub hand: String,
    pub x_m: Vec<f64>,
}

pub fn parse_trace(text: &str) -> Result<Vec<TraceRecord>, CliError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| CliError::Parse(format!("trace line {}: {e}", i + 1))))
        .collect()
}

pub fn traj_series(records: &[TraceRecord]) -> Result<TrajSeries, CliError> {
    let mut fingers: Vec<FingerSeries> = (0..NUM_FINGERTIPS)
        .map(|f| FingerSeries {
            finger: f,
            hand: if f < NUM_FINGERTIPS / 2 { "left" } else { "right" }.into(),
            x_m: Vec::with_capacity(records.len()),
        })
        .collect();
    for r in records {
        if r.fingertips.len() != NUM_FINGERTIPS {
            return Err(CliError::Parse(format!(
                "frame {} has {} fingertips, expected {NUM_FINGERTIPS}",
                r.frame,
                r.fingertips.len()
            )));
        }
        for (s, tip) in fingers.iter_mut().zip(&r.fingertips) {
            s.x_m.push(tip[0]);
        }
    }
    Ok(TrajSeries {
        frames: records.iter().map(|r| r.frame).collect(),
        fingers,
    })
}

pub fn plot_traj(cfg: &RunConfig, trace: &Path) -> Result<TrajSeries, CliError> {
    let text = std::fs::read_to_string(trace).map_err(|e| missing_input(trace, e))?;
    let series = traj_series(&parse_trace(&text)?)?;
    write_text(cfg, "traj.json", &to_json(&series))?;
    let mut csv = String::from("frame");
    for f in &series.fingers {
        let _ = write!(csv, ",{}_{}", f.hand, f.finger);
    }
    csv.push('\n');
    for (i, frame) in series.frames.iter().enumerate() {
        let _ = write!(csv, "{frame}");
        for f in &series.fingers {
            let _ = write!(csv, ",{}", f.x_m[i]);
        }
        csv.push('\n');
    }
    let path = write_text(cfg, "traj.csv", &csv)?;
    println!("{} frames x {} fingers -> {}", series.frames.len(), series.fingers.len(), path.display());
    Ok(series)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trace_parsing_rejects_garbage_and_short_frames() {
        assert!(matches!(parse_trace("{not json"), Err(CliError::Parse(_))));
        let rec = TraceRecord {
            frame: 0,
            joints: vec![],
            fingertips: vec![[0.1, 0.0, 0.0]; 3],
            pressed: vec![],
            goal: vec![],
        };
        assert!(traj_series(&[rec]).is_err());
    }

    #[test]
    fn series_has_one_column_per_finger() {
        let recs: Vec<TraceRecord> = (0..3)
            .map(|t| TraceRecord {
                frame: t,
                joints: vec![],
                fingertips: (0..NUM_FINGERTIPS).map(|f| [f as f64 + t as f64, 0.0, 0.0]).collect(),
                pressed: vec![],
                goal: vec![],
            })
            .collect();
        let s = traj_series(&recs).unwrap();
        assert_eq!(s.fingers.len(), NUM_FINGERTIPS);
        assert_eq!(s.fingers[4].x_m, vec![4.0, 5.0, 6.0]);
        assert_eq!(s.fingers[5].hand, "right");
    }

    #[test]
    fn unknown_toy_song_is_bad_argument() {
        assert!(matches!(load_song(Path::new("toy:nope"), 20.0), Err(CliError::BadArgs(_))));
        assert_eq!(load_song(Path::new("toy:three_key"), 20.0).unwrap().1.len(), 198);
    }
}
