//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use pianist_core::autodiff::{Array, ParamStore};
use pianist_core::diffusion::EmaState;
use pianist_core::env::EnvConfig;
use pianist_core::midi::parse_smf;
use pianist_core::oracle::ScriptedOracle;
use pianist_core::reward::{extract_mfcc, MfccConfig};
use pianist_core::trainer::{ablation_run, cosine_lr, toy, AblationConfig, GridCell, TrainConfig};

use common::{fixture_bytes, gradcases, reference_notes, FIXTURES};

const DDIM_MAX_REL_ERR: f64 = 1e-5;
const DDIM_MAX_SECS: f64 = 10.0;
const GRAD_SEEDS: u64 = 20;
const GRAD_MAX_SECS: f64 = 120.0;
const MFCC_MAX_ABS_ERR: f64 = 1e-6;
const IK_SAMPLES: usize = 1000;
const IK_MIN_SOLVED: usize = 950;
const LR_MID: f64 = 5.05e-5;
const LR_MID_TOL: f64 = 1e-12;
const TOY_STEPS: usize = 2000;
const TOY_MIN_F1: f64 = 0.9;
const TOY_MAX_TRAIN_SECS: f64 = 300.0;
const ABLATION_SEEDS: u64 = 5;
const ABLATION_MAX_SECS: f64 = 1800.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn ddim_recovery() -> Outcome {
    let start = Instant::now();
    let (full, strided) = common::ddim_recovery_errors(100, 176);
    let secs = start.elapsed().as_secs_f64();
    outcome(
        full <= DDIM_MAX_REL_ERR && strided <= DDIM_MAX_REL_ERR && secs < DDIM_MAX_SECS,
        format!("100 pairs, worst rel err full {full:.2e} / 10-step {strided:.2e} (<= {DDIM_MAX_REL_ERR:e}), {secs:.2}s (< {DDIM_MAX_SECS}s)"),
    )
}

fn gradient_integrity() -> Outcome {
    let start = Instant::now();
    let failures: Vec<String> = gradcases::CASES.iter().flat_map(|(name, _)| gradcases::run(name, GRAD_SEEDS)).collect();
    let secs = start.elapsed().as_secs_f64();
    let first = failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default();
    outcome(
        failures.is_empty() && secs < GRAD_MAX_SECS,
        format!(
            "{} cases x {GRAD_SEEDS} seeds at rel_tol 1e-4, step 1e-5: {} failures{first}, {secs:.1}s (< {GRAD_MAX_SECS}s)",
            gradcases::CASES.len(),
            failures.len()
        ),
    )
}

fn reward_arithmetic() -> Outcome {
    let failures = common::reward_suite_failures();
    outcome(
        failures.is_empty(),
        format!(
            "task/audio/style/composite examples to 1e-12, linearity, 2^5 argmax: {} failures{}",
            failures.len(),
            failures.first().map(|f| format!(" (first: {f})")).unwrap_or_default()
        ),
    )
}

fn mfcc_equivalence() -> Outcome {
    let cfg = MfccConfig::default();
    let mut worst: f64 = 0.0;
    let mut frames_ok = true;
    for seed in 0..10 {
        let signal = common::random_signal(seed, cfg.sample_rate_hz as usize);
        let fast = extract_mfcc(&signal).expect("1 s signal is long enough");
        let slow = common::brute_force_mfcc(&signal, &cfg);
        frames_ok &= fast.frames() == slow.len();
        for (a, b) in fast.mfcc.iter().flatten().zip(slow.iter().flatten()) {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(
        frames_ok && worst <= MFCC_MAX_ABS_ERR,
        format!("10 random 1 s signals, max abs err {worst:.2e} (<= {MFCC_MAX_ABS_ERR:e})"),
    )
}

fn ik_convergence() -> Outcome {
    let trial = common::ik_contraction_trial(IK_SAMPLES, 11);
    outcome(
        trial.solved >= IK_MIN_SOLVED && trial.non_monotone == 0,
        format!(
            "{}/{} solved to 1e-3 m in 100 iterations (>= {IK_MIN_SOLVED}), {} non-monotone converged cases",
            trial.solved, trial.samples, trial.non_monotone
        ),
    )
}

fn cosine_lr_endpoints() -> Outcome {
    let cfg = TrainConfig::default();
    let (first, last, mid) = (
        cosine_lr(0, &cfg).unwrap(),
        cosine_lr(100, &cfg).unwrap(),
        cosine_lr(50, &cfg).unwrap(),
    );
    outcome(
        first == 1e-4 && last == 1e-6 && (mid - LR_MID).abs() <= LR_MID_TOL,
        format!("lr(0) = {first:e}, lr(100) = {last:e}, lr(50) = {mid:e} (target {LR_MID:e} +- {LR_MID_TOL:e})"),
    )
}

fn ema_cases() -> Outcome {
    let one = |v: f64| {
        let mut p = ParamStore::new();
        p.insert("w", Array::from_vec(vec![v]));
        p
    };
    let mut half = EmaState::new(&one(0.0), 0.5).unwrap();
    half.update(&one(1.0)).unwrap();
    half.update(&one(1.0)).unwrap();
    let two_step = half.shadow.get("w").unwrap().data()[0];
    let mut copy = EmaState::new(&one(0.0), 0.0).unwrap();
    copy.update(&one(0.3)).unwrap();
    let mut frozen = EmaState::new(&one(0.2), 1.0).unwrap();
    frozen.update(&one(9.0)).unwrap();
    outcome(
        two_step == 0.75 && copy.shadow == one(0.3) && frozen.shadow == one(0.2),
        format!("decay 0.5 twice -> {two_step}, decay 0 copies, decay 1 freezes"),
    )
}

fn toy_end_to_end() -> Outcome {
    let r = common::toy_end_to_end(TOY_STEPS, 0);
    outcome(
        r.f1 >= TOY_MIN_F1 && r.f1 >= r.baseline_f1 && r.train_secs <= TOY_MAX_TRAIN_SECS,
        format!(
            "three-key song, width 8, H = 8, {TOY_STEPS} steps: F1 {:.4} (>= {TOY_MIN_F1}), zero-stub F1 {:.4}, final loss {:.3}, train {:.0}s (<= {TOY_MAX_TRAIN_SECS}s)",
            r.f1, r.baseline_f1, r.final_loss, r.train_secs
        ),
    )
}

fn ablation_ordering() -> Outcome {
    let start = Instant::now();
    let cfg = AblationConfig {
        seeds: (0..ABLATION_SEEDS).collect(),
        ..AblationConfig::default()
    };
    let result = match ablation_run(&toy::toy_suite(), &EnvConfig::default(), &cfg, &ScriptedOracle) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("ablation failed: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let mean = |cell: GridCell| {
        let f: Vec<f64> = result.rows.iter().filter(|r| r.config == cell.label()).map(|r| r.mean_f1).collect();
        f.iter().sum::<f64>() / f.len() as f64
    };
    let [a, b, c, d] = GridCell::ALL.map(mean);
    let ordered = a >= b && b > c && b > d && d <= c && d < a;
    outcome(
        ordered && result.ordering_holds() && secs < ABLATION_MAX_SECS,
        format!(
            "{ABLATION_SEEDS} seeds, mean F1 oracle+residual {a:.4} >= no_oracle+residual {b:.4} > oracle+no_residual {c:.4} >= no_oracle+no_residual {d:.4}, {secs:.0}s (< {ABLATION_MAX_SECS}s)"
        ),
    )
}

fn midi_conformance() -> Outcome {
    let mismatched: Vec<&str> = FIXTURES
        .iter()
        .copied()
        .filter(|name| {
            let bytes = fixture_bytes(name);
            parse_smf(&bytes).map(|s| s.notes != reference_notes(&bytes)).unwrap_or(true)
        })
        .collect();
    outcome(
        mismatched.is_empty(),
        format!("{} fixtures against the midly reader, mismatched: {mismatched:?}", FIXTURES.len()),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("DDIM exact recovery", ddim_recovery),
        ("gradient integrity", gradient_integrity),
        ("reward arithmetic", reward_arithmetic),
        ("MFCC oracle equivalence", mfcc_equivalence),
        ("IK convergence", ik_convergence),
        ("cosine LR endpoints", cosine_lr_endpoints),
        ("EMA", ema_cases),
        ("toy end-to-end", toy_end_to_end),
        ("ablation ordering", ablation_ordering),
        ("MIDI conformance", midi_conformance),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !filter.is_empty() && !filter.iter().any(|f| f == &n.to_string()) {
            continue;
        }
        let r = run();
        println!("criterion {n:>2} {} {name}: {}", if r.pass { "PASS" } else { "FAIL" }, r.detail);
        failed += usize::from(!r.pass);
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
