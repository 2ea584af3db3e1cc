//! Training loop, rollout wiring and evaluation metrics.

mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pianist_core::denoiser::DenoiserConfig;
use pianist_core::diffusion::DiffusionError;
use pianist_core::env::{EnvConfig, EnvError, PianoEnv};
use pianist_core::keys::KeyFrame;
use pianist_core::kinematics::{ik_solve, NUM_JOINTS};
use pianist_core::metrics::frame_prf;
use pianist_core::midi::{parse_smf, to_goal_trajectory, GoalTrajectory, MidiSong};
use pianist_core::oracle::{Oracle, ScriptedOracle};
use pianist_core::reward::RewardWeights;
use pianist_core::trainer::demo::PRESS_Z_M;
use pianist_core::trainer::*;

use common::{fixture_bytes, three_key_demo};

fn residual_dataset() -> Dataset {
    let (env, demo) = three_key_demo();
    Dataset::new(build_dataset(&demo, &env, ActionMode::Residual, 8, 0.1).unwrap()).unwrap()
}

/// Uniform random chunks of a given amplitude.
struct RandomSource {
    rng: ChaCha8Rng,
    amplitude: f64,
}

impl ResidualSource for RandomSource {
    fn chunk(&mut self, _cond: &[f64]) -> Result<Vec<f64>, DiffusionError> {
        Ok((0..8 * NUM_JOINTS).map(|_| self.rng.random_range(-self.amplitude..=self.amplitude)).collect())
    }
}

#[test]
fn untrained_loss_is_near_unit_noise_variance() {
    let data = residual_dataset();
    let cfg = TrainConfig::default();
    let mut state = TrainState::new(DenoiserConfig::desk(), &cfg).unwrap();
    let mut pick = ChaCha8Rng::seed_from_u64(1);
    let mut total = 0.0;
    for _ in 0..100 {
        let batch: Vec<&Sample> = (0..8).map(|_| &data.samples[pick.random_range(0..data.samples.len())]).collect();
        let draw = state.draw_noise(batch.len());
        let loss = batch_loss(&state, &batch, &draw).unwrap();
        assert!(loss > 0.0);
        total += loss;
    }
    let mean = total / 100.0;
    assert!((mean - 1.0).abs() <= 0.2, "mean untrained loss {mean}");
}

#[test]
fn one_repeated_sample_is_memorized() {
    let data = residual_dataset();
    let cfg = TrainConfig {
        lr_max: 1e-3,
        lr_min: 1e-5,
        epochs: 100,
        steps_per_epoch: 5,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(DenoiserConfig::desk(), &cfg).unwrap();
    let batch = [&data.samples[40]];
    let draw = state.draw_noise(1);
    let mut losses = Vec::new();
    for step in 0..500 {
        let lr = cosine_lr(step / cfg.steps_per_epoch, &cfg).unwrap();
        losses.push(bc_train_step_with(&mut state, &batch, &draw, lr, &cfg).unwrap());
    }
    let last = *losses.last().unwrap();
    assert!(last < 0.05, "loss after 500 steps {last} (first {})", losses[0]);
}

#[test]
fn training_losses_are_bit_reproducible() {
    let data = residual_dataset();
    let cfg = TrainConfig {
        epochs: 2,
        steps_per_epoch: 5,
        batch: 4,
        seed: 11,
        snapshot_every: 5,
        ..TrainConfig::default()
    };
    let a = train(DenoiserConfig::desk(), &data, &cfg).unwrap();
    let b = train(DenoiserConfig::desk(), &data, &cfg).unwrap();
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a.losses), bits(&b.losses));
    assert_eq!(a.ema_params, b.ema_params);
    assert_eq!(a.snapshots.iter().map(|s| s.0).collect::<Vec<_>>(), [5, 10]);
    let other = train(DenoiserConfig::desk(), &data, &TrainConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(bits(&a.losses), bits(&other.losses));
}

#[test]
fn divergent_training_reports_non_finite_loss() {
    let data = residual_dataset();
    let cfg = TrainConfig {
        epochs: 2,
        steps_per_epoch: 5,
        batch: 2,
        lr_max: 1e200,
        lr_min: 1e199,
        ..TrainConfig::default()
    };
    match train(DenoiserConfig::desk(), &data, &cfg) {
        Err(TrainError::NonFiniteLoss { last_finite, .. }) => assert!(last_finite.is_some()),
        other => panic!("expected NonFiniteLoss, got {:?}", other.map(|o| o.losses)),
    }
}

#[test]
fn zero_stub_rollout_is_pure_ik_tracking() {
    let (env_cfg, demo) = three_key_demo();
    let opts = RolloutOptions::default();
    let stub = rollout(&mut ZeroStub { horizon: 8 }, &demo, &env_cfg, &opts, None).unwrap();

    let (mut env, _) = PianoEnv::reset(demo.goal.clone(), env_cfg.clone()).unwrap();
    let mut q = env_cfg.chain.rest_pose();
    let mut pressed = Vec::new();
    for (t, record) in stub.trace.iter().enumerate() {
        q = ik_solve(&demo.fingertip_targets[t], &q, &env_cfg.chain, &opts.ik).unwrap().q_nominal;
        let (_, info) = env.step(&q).unwrap();
        assert_eq!(&env.state().joint_angles, &record.joints, "frame {t}");
        pressed.push(info.pressed_keys);
    }
    assert_eq!(pressed, stub.pressed);
    assert_eq!(stub.ik_calls, demo.len());
    assert!(stub.prf.f1 >= 0.95);
}

#[test]
fn fixed_seed_gives_identical_traces() {
    let (env_cfg, demo) = three_key_demo();
    let data = residual_dataset();
    let cfg = TrainConfig {
        epochs: 1,
        steps_per_epoch: 3,
        batch: 2,
        ..TrainConfig::default()
    };
    let out = train(DenoiserConfig::desk(), &data, &cfg).unwrap();
    let run = |seed| {
        let mut p = DiffusionPolicy::from_outcome(&out, out.ema_params.clone(), 100, 10, seed).unwrap();
        rollout(&mut p, &demo, &env_cfg, &RolloutOptions::default(), None).unwrap().trace_ndjson()
    };
    let a = run(5);
    assert_eq!(a, run(5));
    assert_ne!(a, run(6));
}

#[test]
fn absolute_mode_never_calls_ik() {
    let (env_cfg, demo) = three_key_demo();
    let opts = RolloutOptions {
        mode: ActionMode::Absolute,
        ..RolloutOptions::default()
    };
    let r = rollout(&mut ZeroStub { horizon: 8 }, &demo, &env_cfg, &opts, None).unwrap();
    assert_eq!(r.ik_calls, 0);
    let rest = env_cfg.chain.rest_pose();
    assert!(r.trace.iter().all(|rec| rec.joints == rest));
}

#[test]
fn zero_oracle_weight_zeroes_oracle_terms() {
    let (env_cfg, demo) = three_key_demo();
    let r = rollout(&mut ZeroStub { horizon: 8 }, &demo, &env_cfg, &RolloutOptions::default(), None).unwrap();
    let off = RewardWeights { delta: 0.0, ..env_cfg.reward_weights };
    let (b, outcome) = r.score(&off, Some(&ScriptedOracle as &dyn Oracle)).unwrap();
    assert!(outcome.is_none());
    assert_eq!((b.r_llm_left, b.r_llm_right), (0.0, 0.0));
    let (on, outcome) = r.score(&env_cfg.reward_weights, Some(&ScriptedOracle as &dyn Oracle)).unwrap();
    assert!(outcome.is_some() && on.r_llm_left > 0.0 && on.r_llm_right > 0.0);
}

#[test]
fn single_note_demo_presses_key_39_with_one_finger() {
    let env_cfg = EnvConfig::default();
    let traj = to_goal_trajectory(&parse_smf(&fixture_bytes("single_note.mid")).unwrap(), 20.0);
    let demo = synthesize_demo(&traj, &env_cfg.chain, &env_cfg.geometry, &Default::default()).unwrap();
    let center = env_cfg.geometry.key_center_x(39);
    for (t, tips) in demo.fingertip_targets.iter().enumerate() {
        let pressing: Vec<usize> = (0..tips.len()).filter(|&i| tips[i].z < 0.0).collect();
        assert_eq!(pressing.len(), 1, "frame {t}");
        let tip = tips[pressing[0]];
        assert!((tip.x - center).abs() < 1e-12 && tip.z == PRESS_Z_M, "frame {t}: {tip:?}");
        assert_eq!(demo.assignments[t][pressing[0]], Some(39));
    }
    let r = rollout(&mut ZeroStub { horizon: 8 }, &demo, &env_cfg, &RolloutOptions::default(), None).unwrap();
    assert!(r.pressed.iter().skip(2).all(|f| f.keys().eq([39])));
}

#[test]
fn demo_replay_reaches_high_f1_on_toy_songs() {
    let env_cfg = EnvConfig::default();
    for (name, traj) in toy::toy_suite() {
        let demo = synthesize_demo(&traj, &env_cfg.chain, &env_cfg.geometry, &Default::default()).unwrap();
        let r = rollout(&mut ZeroStub { horizon: 8 }, &demo, &env_cfg, &RolloutOptions::default(), None).unwrap();
        assert!(r.prf.f1 >= 0.95, "{name}: {}", r.prf.f1);
    }
}

#[test]
fn empty_song_has_empty_demo_and_no_episode() {
    let env_cfg = EnvConfig::default();
    let traj = to_goal_trajectory(&MidiSong::from_notes(Vec::new()), 20.0);
    let demo = synthesize_demo(&traj, &env_cfg.chain, &env_cfg.geometry, &Default::default()).unwrap();
    assert!(demo.is_empty() && demo.expert_residuals.is_empty());
    assert!(matches!(PianoEnv::reset(traj, env_cfg), Err(EnvError::EmptySong)));
}

#[test]
fn frame_prf_matches_confusion_counts_exhaustively() {
    let frames = |bits: u32| -> Vec<KeyFrame> {
        (0..3).map(|f| KeyFrame::from_keys((0..5).filter(|k| bits >> (5 * f + k) & 1 == 1).map(|k| 39 + k))).collect()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for goal_bits in 0..1u32 << 15 {
        let pressed_bits = rng.random_range(0..1u32 << 15);
        for (g, p) in [(goal_bits, pressed_bits), (pressed_bits, goal_bits), (goal_bits, goal_bits), (goal_bits, 0)] {
            let prf = frame_prf(&frames(g), &frames(p)).unwrap();
            let tp = (g & p).count_ones() as f64;
            let fp = (!g & p).count_ones() as f64;
            let fn_ = (g & !p).count_ones() as f64;
            let precision = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
            let recall = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
            let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
            assert!((prf.precision - precision).abs() < 1e-15, "{g:015b} {p:015b}");
            assert!((prf.recall - recall).abs() < 1e-15);
            assert!((prf.f1 - f1).abs() < 1e-15);
        }
    }
}

#[test]
fn lr_schedule_values() {
    let cfg = TrainConfig::default();
    assert_eq!(cosine_lr(0, &cfg).unwrap(), 1e-4);
    assert_eq!(cosine_lr(100, &cfg).unwrap(), 1e-6);
    assert!((cosine_lr(50, &cfg).unwrap() - 5.05e-5).abs() <= 1e-12);
    assert!(matches!(cosine_lr(101, &cfg), Err(TrainError::OutOfRange { .. })));
}

proptest! {
    #[test]
    fn lr_is_monotone_non_increasing(epochs in 1usize..400, lo in 1e-8f64..1e-5, span in 1e-6f64..1e-2) {
        let cfg = TrainConfig { epochs, lr_min: lo, lr_max: lo + span, ..TrainConfig::default() };
        let lrs: Vec<f64> = (0..=epochs).map(|e| cosine_lr(e, &cfg).unwrap()).collect();
        prop_assert_eq!(lrs[0], cfg.lr_max);
        prop_assert_eq!(lrs[epochs], cfg.lr_min);
        prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn rollouts_respect_the_rate_limit(seed in 0u64..1000, amplitude in 0.0f64..3.0, absolute in any::<bool>()) {
        let (env_cfg, demo) = three_key_demo();
        let short = synthesize_demo(
            &GoalTrajectory { frames: demo.goal.frames[..30].to_vec(), ..demo.goal.clone() },
            &env_cfg.chain, &env_cfg.geometry, &Default::default(),
        ).unwrap();
        let mut src = RandomSource { rng: ChaCha8Rng::seed_from_u64(seed), amplitude };
        let opts = RolloutOptions {
            mode: if absolute { ActionMode::Absolute } else { ActionMode::Residual },
            ..RolloutOptions::default()
        };
        let r = rollout(&mut src, &short, &env_cfg, &opts, None).unwrap();
        let mut prev = env_cfg.chain.rest_pose();
        for rec in &r.trace {
            for (a, b) in prev.iter().zip(&rec.joints) {
                prop_assert!((a - b).abs() <= env_cfg.rate_limit + 1e-12);
            }
            prev = rec.joints.clone();
        }
    }
}
