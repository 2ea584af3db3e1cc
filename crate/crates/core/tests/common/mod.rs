//! Helpers shared by the integration tests.
#![allow(dead_code)]

pub mod gradcases;

use std::path::PathBuf;

pub const FIXTURES: [&str; 8] = [
    "half_second_note.mid",
    "single_note.mid",
    "empty.mid",
    "tempo_change.mid",
    "mid_song_tempo.mid",
    "running_status.mid",
    "format1.mid",
    "overlap.mid",
];

pub fn fixture_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

pub fn fixture_bytes(name: &str) -> Vec<u8> {
    std::fs::read(fixture_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// Sum of random sinusoids plus uniform noise, `len` samples at 16 kHz.
pub fn random_signal(seed: u64, len: usize) -> Vec<f64> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let tones: Vec<(f64, f64, f64)> = (0..rng.random_range(1..6))
        .map(|_| (rng.random_range(30.0..7000.0), rng.random_range(0.05..0.5), rng.random_range(0.0..6.3)))
        .collect();
    let noise = rng.random_range(0.0..0.2);
    (0..len)
        .map(|i| {
            let t = i as f64 / 16000.0;
            let s: f64 = tones
                .iter()
                .map(|(f, a, p)| a * (2.0 * std::f64::consts::PI * f * t + p).sin())
                .sum();
            s + noise * rng.random_range(-1.0..1.0)
        })
        .collect()
}

/// MFCCs by definition: direct DFT of each Hann-windowed frame, triangular
/// mel filters evaluated piecewise, natural log, orthonormal DCT-II.
pub fn brute_force_mfcc(signal: &[f64], cfg: &pianist_core::reward::MfccConfig) -> Vec<Vec<f64>> {
    use std::f64::consts::PI;
    let mel = |hz: f64| 1127.0 * (1.0 + hz / 700.0).ln();
    let inv_mel = |m: f64| 700.0 * ((m / 1127.0).exp() - 1.0);
    let n_bins = cfg.n_fft / 2 + 1;
    let step = (mel(cfg.f_max) - mel(cfg.f_min)) / (cfg.n_mels + 1) as f64;
    let edge = |i: usize| inv_mel(mel(cfg.f_min) + step * i as f64);
    let weight = |m: usize, f: f64| {
        let (lo, mid, hi) = (edge(m), edge(m + 1), edge(m + 2));
        if f > lo && f <= mid {
            (f - lo) / (mid - lo)
        } else if f > mid && f < hi {
            (hi - f) / (hi - mid)
        } else {
            0.0
        }
    };
    let mut rows = Vec::new();
    let mut start = 0;
    while start + cfg.window <= signal.len() {
        let frame: Vec<f64> = (0..cfg.window)
            .map(|i| signal[start + i] * (0.5 - 0.5 * (2.0 * PI * i as f64 / cfg.window as f64).cos()))
            .collect();
        let mags: Vec<f64> = (0..n_bins)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (n, x) in frame.iter().enumerate() {
                    let ang = -2.0 * PI * ((k * n) % cfg.n_fft) as f64 / cfg.n_fft as f64;
                    re += x * ang.cos();
                    im += x * ang.sin();
                }
                re.hypot(im)
            })
            .collect();
        let logmel: Vec<f64> = (0..cfg.n_mels)
            .map(|m| {
                let e: f64 = (0..n_bins)
                    .map(|k| weight(m, k as f64 * cfg.sample_rate_hz as f64 / cfg.n_fft as f64) * mags[k])
                    .sum();
                e.max(cfg.log_floor).ln()
            })
            .collect();
        let nm = cfg.n_mels as f64;
        rows.push(
            (0..cfg.n_coeffs)
                .map(|k| {
                    let norm = if k == 0 { (1.0 / nm).sqrt() } else { (2.0 / nm).sqrt() };
                    norm * logmel
                        .iter()
                        .enumerate()
                        .map(|(j, v)| v * (PI * k as f64 * (j as f64 + 0.5) / nm).cos())
                        .sum::<f64>()
                })
                .collect(),
        );
        start += cfg.hop;
    }
    rows
}

/// Outcome of solving IK for FK-generated targets from the rest pose.
#[derive(Debug, Clone, Copy)]
pub struct IkTrial {
    pub samples: usize,
    /// Solutions with residual at most 1e-3 m within 100 iterations.
    pub solved: usize,
    /// Converged solutions whose residual history ever increased.
    pub non_monotone: usize,
}

pub fn ik_contraction_trial(samples: usize, seed: u64) -> IkTrial {
    use pianist_core::kinematics::{forward_kinematics, ik_solve, ChainSpec, IkOptions};
    use rand::{Rng, SeedableRng};
    let spec = ChainSpec::default();
    let limits = spec.joint_limits();
    let opts = IkOptions {
        tol_m: 1e-3,
        max_iters: 100,
        ..IkOptions::default()
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut trial = IkTrial {
        samples,
        solved: 0,
        non_monotone: 0,
    };
    for _ in 0..samples {
        let q: Vec<f64> = limits.iter().map(|l| rng.random_range(l.lo..=l.hi)).collect();
        let targets = forward_kinematics(&q, &spec).unwrap();
        let sol = ik_solve(&targets, &spec.rest_pose(), &spec, &opts).unwrap();
        let tips = forward_kinematics(&sol.q_nominal, &spec).unwrap();
        let residual = targets
            .iter()
            .zip(&tips)
            .map(|(a, b)| (a - b).norm_squared())
            .sum::<f64>()
            .sqrt();
        if sol.converged && residual <= 1e-3 && sol.iterations <= 100 {
            trial.solved += 1;
            if sol.residual_history.windows(2).any(|w| w[1] > w[0]) {
                trial.non_monotone += 1;
            }
        }
    }
    trial
}

/// Denoiser that returns the noise used to build `x_T`, whatever the input.
pub struct PlantedNoise(pub Vec<f64>);

impl pianist_core::diffusion::Denoiser for PlantedNoise {
    fn predict_noise(
        &self,
        _x_t: &[f64],
        _t: usize,
        _cond: &[f64],
    ) -> Result<Vec<f64>, pianist_core::diffusion::DiffusionError> {
        Ok(self.0.clone())
    }
}

/// Worst relative reconstruction error `|x0_hat - x0| / |x0|` over `pairs`
/// planted `(x0, seed)` pairs, for the full reverse pass and for the default
/// 10-step subsequence.
pub fn ddim_recovery_errors(pairs: u64, len: usize) -> (f64, f64) {
    use pianist_core::diffusion::{cosine_schedule, ddim_sample_from, forward_noise, initial_noise};
    use rand::{Rng, SeedableRng};
    let sub = cosine_schedule(100, 0.008).unwrap();
    assert_eq!(sub.step_subsequence().len(), 10);
    let full = sub.clone().with_all_steps();
    let mut worst = (0.0f64, 0.0f64);
    for seed in 0..pairs {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1000 + seed);
        let x0: Vec<f64> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eps = initial_noise(len, seed);
        let x_t = forward_noise(&x0, 100, &eps, &full).unwrap();
        let oracle = PlantedNoise(eps);
        let rel = |x: Vec<f64>| {
            let num: f64 = x.iter().zip(&x0).map(|(a, b)| (a - b) * (a - b)).sum();
            let den: f64 = x0.iter().map(|b| b * b).sum();
            (num / den).sqrt()
        };
        let a = rel(ddim_sample_from(&oracle, &[], x_t.clone(), &full, None).unwrap());
        let b = rel(ddim_sample_from(&oracle, &[], x_t, &sub, None).unwrap());
        worst = (worst.0.max(a), worst.1.max(b));
    }
    worst
}

/// Hand-computed reward cases, composite linearity and the task-reward
/// argmax over every subset of a 5-key toy frame. Returns the failing cases.
pub fn reward_suite_failures() -> Vec<String> {
    use pianist_core::keys::KeyFrame;
    use pianist_core::kinematics::Vec3;
    use pianist_core::reward::*;

    let mut failures = Vec::new();
    let mut check = |name: &str, got: f64, want: f64| {
        if (got - want).abs() > 1e-12 {
            failures.push(format!("{name}: got {got}, want {want}"));
        }
    };
    let frame = |keys: &[usize]| KeyFrame::from_keys(keys.iter().copied());
    let w = RewardWeights::default();

    check("task pressed=goal", task_reward(frame(&[39, 50]), frame(&[39, 50]), 1.7, 0.3), 1.7);
    check("task all missed", task_reward(frame(&[39]), frame(&[]), w.w_press, w.w_fp), 0.0);
    check("task two false presses", task_reward(frame(&[39]), frame(&[40, 41]), w.w_press, w.w_fp), -1.0);
    check("task half missed", task_reward(frame(&[39, 40]), frame(&[39]), 2.0, 0.5), 1.0);

    let feats = |rows: Vec<Vec<f64>>| AudioFeatures { mfcc: rows, sample_rate_hz: 16_000 };
    let a = feats(vec![vec![1.0, 0.0]]);
    let b = feats(vec![vec![0.0, 1.0]]);
    let x = feats(vec![vec![0.3, -1.2, 4.0], vec![2.0, 0.5, -0.7]]);
    check("cosine identical", audio_reward(&x, &x, AudioRewardMode::Cosine).value, 1.0);
    check("neg_l2 identical", audio_reward(&x, &x, AudioRewardMode::NegL2).value, 0.0);
    check("cosine orthogonal", audio_reward(&a, &b, AudioRewardMode::Cosine).value, 0.0);
    check("neg_l2 orthogonal", audio_reward(&a, &b, AudioRewardMode::NegL2).value, -2.0);
    check("cosine opposite", audio_reward(&a, &feats(vec![vec![-2.0, 0.0]]), AudioRewardMode::Cosine).value, -1.0);

    let p = Vec3::new(0.1, -0.2, 0.3);
    let unit = Vec3::new(1.0, 0.0, 0.0);
    check("style identical", style_reward(&[vec![p]], &[vec![p]]).unwrap(), 0.0);
    check("style unit offset", style_reward(&[vec![p + unit]], &[vec![p]]).unwrap(), -1.0);
    let n = 7;
    let robot: Vec<Vec<Vec3>> = (0..n).map(|i| vec![p * i as f64 + unit]).collect();
    let human: Vec<Vec<Vec3>> = (0..n).map(|i| vec![p * i as f64]).collect();
    check("style N frames", style_reward(&robot, &human).unwrap(), -(n as f64));

    let total = |parts: RewardParts, w: &RewardWeights, o: (f64, f64)| composite_reward(parts, w, o).unwrap().r_total;
    check("composite zero", total(RewardParts::default(), &w, (0.0, 0.0)), 0.0);
    let ones = RewardParts { task: 1.0, audio: 1.0, style: 0.0 };
    check("composite example", total(ones, &w, (0.5, 0.5)), 2.0);
    let off = RewardWeights { delta: 0.0, ..w };
    let parts = RewardParts { task: 0.3, audio: 0.2, style: -0.1 };
    check("delta zero ignores oracle", total(parts, &off, (0.9, 0.1)) - total(parts, &off, (0.0, 0.7)), 0.0);

    for c in [0.0, 0.5, 2.0, 4.0] {
        let scaled = RewardWeights {
            alpha: w.alpha * c,
            beta: w.beta * c,
            gamma: w.gamma * c,
            delta: w.delta * c,
            ..w
        };
        let parts = RewardParts { task: 0.75, audio: -0.5, style: -1.25 };
        let o = (0.25, 0.125);
        check(&format!("linearity c={c}"), total(parts, &scaled, o), c * total(parts, &w, o));
    }

    let toy_keys = [36usize, 38, 40, 41, 43];
    let subset = |mask: usize| KeyFrame::from_keys((0..5).filter(|i| mask >> i & 1 == 1).map(|i| toy_keys[i]));
    for goal_mask in 0..32 {
        let goal = subset(goal_mask);
        let best = (0..32)
            .map(|m| (task_reward(goal, subset(m), w.w_press, w.w_fp), m))
            .fold((f64::NEG_INFINITY, 0), |acc, x| if x.0 > acc.0 { x } else { acc });
        let strict = (0..32)
            .filter(|&m| m != goal_mask)
            .all(|m| task_reward(goal, subset(m), w.w_press, w.w_fp) < best.0);
        if best.1 != goal_mask || !strict {
            failures.push(format!("argmax for goal mask {goal_mask:05b} at {:05b}", best.1));
        }
    }
    failures
}

/// Demonstration of the three-key toy song under the default environment.
pub fn three_key_demo() -> (pianist_core::env::EnvConfig, pianist_core::trainer::Demonstration) {
    use pianist_core::trainer::{synthesize_demo, toy};
    let env = pianist_core::env::EnvConfig::default();
    let (_, traj) = toy::toy_suite().remove(0);
    let demo = synthesize_demo(&traj, &env.chain, &env.geometry, &Default::default()).unwrap();
    (env, demo)
}

/// Outcome of training the width-8 denoiser on the three-key song.
pub struct EndToEnd {
    pub f1: f64,
    pub baseline_f1: f64,
    pub train_secs: f64,
    pub final_loss: f64,
}

/// Trains for `steps` behavior-cloning steps at batch 64 with horizon 8,
/// then compares the closed-loop EMA policy with the zero-stub baseline.
pub fn toy_end_to_end(steps: usize, seed: u64) -> EndToEnd {
    use pianist_core::denoiser::DenoiserConfig;
    use pianist_core::trainer::*;
    let (env, demo) = three_key_demo();
    let den = DenoiserConfig::desk();
    assert_eq!((den.channel_widths[0], den.horizon), (8, 8));
    let opts = RolloutOptions::default();
    let data = Dataset::new(build_dataset(&demo, &env, ActionMode::Residual, den.horizon, opts.residual_scale).unwrap()).unwrap();
    let cfg = TrainConfig {
        epochs: 100,
        steps_per_epoch: steps / 100,
        batch: 64,
        lr_max: 1e-3,
        seed,
        ..TrainConfig::default()
    };
    let start = std::time::Instant::now();
    let out = train(den.clone(), &data, &cfg).unwrap();
    let train_secs = start.elapsed().as_secs_f64();
    let mut policy = DiffusionPolicy::from_outcome(&out, out.ema_params.clone(), cfg.diffusion_steps, 10, seed).unwrap();
    let trained = rollout(&mut policy, &demo, &env, &opts, None).unwrap();
    let mut stub = ZeroStub { horizon: den.horizon };
    let baseline = rollout(&mut stub, &demo, &env, &opts, None).unwrap();
    let tail = &out.losses[out.losses.len().saturating_sub(50)..];
    EndToEnd {
        f1: trained.prf.f1,
        baseline_f1: baseline.prf.f1,
        train_secs,
        final_loss: tail.iter().sum::<f64>() / tail.len() as f64,
    }
}

/// Note list decoded with `midly`, timing computed from exact integer
/// tick-microsecond products.
pub fn reference_notes(bytes: &[u8]) -> Vec<pianist_core::midi::Note> {
    use pianist_core::midi::Note;
    use std::collections::{HashMap, VecDeque};
    let smf = midly::Smf::parse(bytes).expect("reference reader accepts fixture");
    let tpq = match smf.header.timing {
        midly::Timing::Metrical(t) => t.as_int() as u64,
        midly::Timing::Timecode(..) => panic!("timecode fixtures are not used"),
    };
    let mut tempos: Vec<(u64, u64)> = Vec::new();
    let mut raw: Vec<(u8, u64, u64, u8)> = Vec::new();
    for track in &smf.tracks {
        let mut tick = 0u64;
        let mut open: HashMap<(u8, u8), VecDeque<(u64, u8)>> = HashMap::new();
        let mut closed = Vec::new();
        for ev in track {
            tick += ev.delta.as_int() as u64;
            match ev.kind {
                midly::TrackEventKind::Meta(midly::MetaMessage::Tempo(t)) => tempos.push((tick, t.as_int() as u64)),
                midly::TrackEventKind::Midi { channel, message } => {
                    let ch = channel.as_int();
                    match message {
                        midly::MidiMessage::NoteOn { key, vel } if vel.as_int() > 0 => {
                            open.entry((ch, key.as_int())).or_default().push_back((tick, vel.as_int()));
                        }
                        midly::MidiMessage::NoteOn { key, .. } | midly::MidiMessage::NoteOff { key, .. } => {
                            if let Some((on, vel)) = open.get_mut(&(ch, key.as_int())).and_then(|q| q.pop_front()) {
                                closed.push((key.as_int(), on, tick, vel));
                            }
                        }
                        _ => {}
                    }
                }
                _ => {}
            }
        }
        assert!(open.values().all(|q| q.is_empty()), "fixtures close every note");
        raw.extend(closed.into_iter().filter(|n| n.2 > n.1));
    }
    tempos.sort_by_key(|t| t.0);
    let seconds = |tick: u64| {
        let mut us_ticks = 0u64;
        let mut tempo = 500_000u64;
        let mut at = 0u64;
        for &(t, v) in tempos.iter().filter(|t| t.0 <= tick) {
            us_ticks += (t - at) * tempo;
            at = t;
            tempo = v;
        }
        us_ticks += (tick - at) * tempo;
        us_ticks as f64 / (tpq as f64 * 1e6)
    };
    let mut notes: Vec<Note> = raw
        .into_iter()
        .map(|(pitch, on, off, velocity)| Note {
            pitch,
            onset_s: seconds(on),
            offset_s: seconds(off),
            velocity,
        })
        .collect();
    notes.sort_by(|a, b| {
        a.onset_s
            .total_cmp(&b.onset_s)
            .then(a.pitch.cmp(&b.pitch))
            .then(a.offset_s.total_cmp(&b.offset_s))
    });
    notes
}
