//! Two-hand kinematic model, damped least-squares IK and residual combination.
//!
//! Each hand has one prismatic joint translating the whole hand along the
//! keyboard (x axis) followed by five fingers with two revolute joints each,
//! giving eleven joints per hand. Joint vectors are laid out as
//! `[base, f0.j0, f0.j1, .., f4.j0, f4.j1]` per hand, left hand first.
//! Fingertip lists follow the same order: left fingers 0..5 then right 0..5.

use nalgebra::{DMatrix, DVector, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec3 = Vector3<f64>;

pub const FINGERS_PER_HAND: usize = 5;
pub const JOINTS_PER_HAND: usize = 1 + 2 * FINGERS_PER_HAND;
pub const NUM_JOINTS: usize = 2 * JOINTS_PER_HAND;
pub const NUM_FINGERTIPS: usize = 2 * FINGERS_PER_HAND;

/// Damping factor of the least-squares update.
pub const IK_DAMPING: f64 = 1e-3;
pub const DEFAULT_IK_MAX_ITERS: usize = 100;
pub const DEFAULT_IK_TOL_M: f64 = 1e-4;
pub const DEFAULT_RESIDUAL_SCALE: f64 = 0.1;

#[derive(Debug, Error, PartialEq)]
pub enum KinematicsError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("invalid chain spec: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointLimit {
    pub lo: f64,
    pub hi: f64,
}

impl JointLimit {
    pub fn new(lo: f64, hi: f64) -> Self {
        JointLimit { lo, hi }
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }
}

/// Two-link finger hanging from the hand frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FingerSpec {
    /// Position of the first joint relative to the hand origin.
    pub base_offset: [f64; 3],
    pub link_lengths: [f64; 2],
    /// Rotation axes of the two joints, expressed in the hand frame.
    pub axes: [[f64; 3]; 2],
    /// Joint angles added to `q` so that `q = 0` is a bent rest pose.
    pub rest_angles: [f64; 2],
    pub limits: [JointLimit; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandSpec {
    /// Hand origin at base joint value 0.
    pub origin: [f64; 3],
    pub base_limit: JointLimit,
    pub fingers: Vec<FingerSpec>,
}

/// Kinematic description of both hands.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub hands: [HandSpec; 2],
}

/// Links hang along -z in the hand frame before the joint rotations.
const LINK_DIR: [f64; 3] = [0.0, 0.0, -1.0];

impl FingerSpec {
    fn default_for(index: usize, key_width: f64) -> Self {
        const Y: [f64; 5] = [-0.03, 0.0, 0.01, 0.0, -0.01];
        FingerSpec {
            base_offset: [(index as f64 - 2.0) * key_width, Y[index], 0.0],
            link_lengths: [0.06, 0.06],
            axes: [[0.0, 1.0, 0.0], [0.0, 1.0, 0.0]],
            rest_angles: [-0.8, 1.6],
            limits: [JointLimit::new(-1.2, 1.2), JointLimit::new(-1.5, 1.2)],
        }
    }
}

impl HandSpec {
    /// Hand with five equal fingers spaced one key apart above the given x.
    pub fn default_at(x: f64, key_width: f64) -> Self {
        let finger = FingerSpec::default_for(0, key_width);
        let drop = rest_drop(&finger);
        HandSpec {
            origin: [x, 0.0, DEFAULT_HOVER_HEIGHT_M + drop],
            base_limit: JointLimit::new(-1.0, 1.0),
            fingers: (0..FINGERS_PER_HAND)
                .map(|i| FingerSpec::default_for(i, key_width))
                .collect(),
        }
    }

    pub fn joint_limits(&self) -> Vec<JointLimit> {
        let mut out = vec![self.base_limit];
        for f in &self.fingers {
            out.extend_from_slice(&f.limits);
        }
        out
    }
}

/// Height of resting fingertips above the key surface.
pub const DEFAULT_HOVER_HEIGHT_M: f64 = 0.02;

fn rest_drop(f: &FingerSpec) -> f64 {
    let tip = finger_tip(f, Vec3::zeros(), [0.0, 0.0]);
    -tip.z
}

impl Default for ChainSpec {
    fn default() -> Self {
        ChainSpec::for_key_width(crate::env::DEFAULT_KEY_WIDTH_M)
    }
}

impl ChainSpec {
    /// Default hands resting over keys 36..=40 (left) and 47..=51 (right).
    pub fn for_key_width(key_width: f64) -> Self {
        ChainSpec {
            hands: [
                HandSpec::default_at(-5.5 * key_width, key_width),
                HandSpec::default_at(5.5 * key_width, key_width),
            ],
        }
    }

    pub fn validate(&self) -> Result<(), KinematicsError> {
        for (h, hand) in self.hands.iter().enumerate() {
            if hand.fingers.len() != FINGERS_PER_HAND {
                return Err(KinematicsError::InvalidSpec(format!(
                    "hand {h} has {} fingers",
                    hand.fingers.len()
                )));
            }
            for lim in hand.joint_limits() {
                if !(lim.lo < lim.hi) {
                    return Err(KinematicsError::InvalidSpec(format!(
                        "joint limit lo {} >= hi {}",
                        lim.lo, lim.hi
                    )));
                }
            }
            for f in &hand.fingers {
                if f.link_lengths.iter().any(|&l| !(l > 0.0)) {
                    return Err(KinematicsError::InvalidSpec("non-positive link length".into()));
                }
                if f.axes.iter().any(|a| Vec3::from(*a).norm() < 1e-12) {
                    return Err(KinematicsError::InvalidSpec("zero joint axis".into()));
                }
            }
        }
        Ok(())
    }

    pub fn joint_limits(&self) -> Vec<JointLimit> {
        let mut out = self.hands[0].joint_limits();
        out.extend(self.hands[1].joint_limits());
        out
    }

    /// Clamps every joint to its limit.
    pub fn clamp(&self, q: &mut [f64]) {
        for (v, lim) in q.iter_mut().zip(self.joint_limits()) {
            *v = lim.clamp(*v);
        }
    }

    pub fn rest_pose(&self) -> Vec<f64> {
        vec![0.0; NUM_JOINTS]
    }

    /// Reach of the longest finger, used as a workspace radius bound.
    pub fn max_finger_reach(&self) -> f64 {
        self.hands
            .iter()
            .flat_map(|h| h.fingers.iter())
            .map(|f| f.link_lengths.iter().sum::<f64>())
            .fold(0.0, f64::max)
    }
}

fn rotation(axis: [f64; 3], angle: f64) -> Rotation3<f64> {
    Rotation3::from_axis_angle(&Unit::new_normalize(Vec3::from(axis)), angle)
}

/// Joint origins, world axes and tip of one finger at the given hand origin.
fn finger_frames(f: &FingerSpec, origin: Vec3, q: [f64; 2]) -> ([Vec3; 2], [Vec3; 2], Vec3) {
    let dir = Vec3::from(LINK_DIR);
    let r1 = rotation(f.axes[0], q[0] + f.rest_angles[0]);
    let r2 = r1 * rotation(f.axes[1], q[1] + f.rest_angles[1]);
    let o1 = origin + Vec3::from(f.base_offset);
    let o2 = o1 + r1 * (dir * f.link_lengths[0]);
    let tip = o2 + r2 * (dir * f.link_lengths[1]);
    let a1 = Vec3::from(f.axes[0]).normalize();
    let a2 = r1 * Vec3::from(f.axes[1]).normalize();
    ([o1, o2], [a1, a2], tip)
}

fn finger_tip(f: &FingerSpec, origin: Vec3, q: [f64; 2]) -> Vec3 {
    finger_frames(f, origin, q).2
}

fn hand_origin(hand: &HandSpec, base: f64) -> Vec3 {
    Vec3::from(hand.origin) + Vec3::x() * base
}

/// Fingertip positions of one hand for its 11-joint vector.
pub fn hand_fk(hand: &HandSpec, q: &[f64]) -> Vec<Vec3> {
    let origin = hand_origin(hand, q[0]);
    hand.fingers
        .iter()
        .enumerate()
        .map(|(i, f)| finger_tip(f, origin, [q[1 + 2 * i], q[2 + 2 * i]]))
        .collect()
}

/// Analytic `3*5 x 11` fingertip Jacobian of one hand.
pub fn hand_jacobian(hand: &HandSpec, q: &[f64]) -> DMatrix<f64> {
    let origin = hand_origin(hand, q[0]);
    let mut jac = DMatrix::zeros(3 * hand.fingers.len(), JOINTS_PER_HAND);
    for (i, f) in hand.fingers.iter().enumerate() {
        let (origins, axes, tip) = finger_frames(f, origin, [q[1 + 2 * i], q[2 + 2 * i]]);
        for r in 0..3 {
            jac[(3 * i + r, 0)] = if r == 0 { 1.0 } else { 0.0 };
        }
        for j in 0..2 {
            let col = axes[j].cross(&(tip - origins[j]));
            for r in 0..3 {
                jac[(3 * i + r, 1 + 2 * i + j)] = col[r];
            }
        }
    }
    jac
}

fn check_len(expected: usize, got: usize) -> Result<(), KinematicsError> {
    if expected != got {
        return Err(KinematicsError::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Fingertip positions of both hands (left fingers first).
pub fn forward_kinematics(q: &[f64], spec: &ChainSpec) -> Result<Vec<Vec3>, KinematicsError> {
    check_len(NUM_JOINTS, q.len())?;
    let mut tips = hand_fk(&spec.hands[0], &q[..JOINTS_PER_HAND]);
    tips.extend(hand_fk(&spec.hands[1], &q[JOINTS_PER_HAND..]));
    Ok(tips)
}

/// Full `30 x 22` block-diagonal Jacobian of both hands.
pub fn jacobian(q: &[f64], spec: &ChainSpec) -> Result<DMatrix<f64>, KinematicsError> {
    check_len(NUM_JOINTS, q.len())?;
    let mut jac = DMatrix::zeros(3 * NUM_FINGERTIPS, NUM_JOINTS);
    for h in 0..2 {
        let block = hand_jacobian(&spec.hands[h], &q[h * JOINTS_PER_HAND..(h + 1) * JOINTS_PER_HAND]);
        jac.view_mut(
            (h * 3 * FINGERS_PER_HAND, h * JOINTS_PER_HAND),
            (3 * FINGERS_PER_HAND, JOINTS_PER_HAND),
        )
        .copy_from(&block);
    }
    Ok(jac)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IkSolution {
    pub q_nominal: Vec<f64>,
    /// Euclidean norm of the stacked fingertip error.
    pub residual_norm_m: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Residual norm before the first iteration and after each accepted one.
    pub residual_history: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IkOptions {
    pub tol_m: f64,
    pub max_iters: usize,
    pub damping: f64,
}

impl Default for IkOptions {
    fn default() -> Self {
        IkOptions {
            tol_m: DEFAULT_IK_TOL_M,
            max_iters: DEFAULT_IK_MAX_ITERS,
            damping: IK_DAMPING,
        }
    }
}

fn stacked_error(targets: &[Vec3], tips: &[Vec3]) -> DVector<f64> {
    DVector::from_iterator(
        3 * targets.len(),
        targets.iter().zip(tips).flat_map(|(t, p)| {
            let d = t - p;
            [d.x, d.y, d.z]
        }),
    )
}

/// Largest change of a finger joint in one IK iteration (rad).
pub const IK_MAX_STEP: f64 = 0.5;
/// Largest change of the base slide in one IK iteration (m).
pub const IK_MAX_BASE_STEP_M: f64 = 0.1;

/// Tolerance for treating a joint as resting on a limit.
const LIMIT_EPS: f64 = 1e-12;

/// Damped least-squares step with joints that sit on a limit and would be
/// pushed past it removed from the solve.
fn active_set_step(
    jac: &DMatrix<f64>,
    e: &DVector<f64>,
    q: &[f64],
    limits: &[JointLimit],
    lambda2: f64,
) -> Option<DVector<f64>> {
    let n = q.len();
    let mut frozen = vec![false; n];
    loop {
        let mut j = jac.clone();
        for (c, f) in frozen.iter().enumerate() {
            if *f {
                j.column_mut(c).fill(0.0);
            }
        }
        let mut normal = j.transpose() * &j;
        for i in 0..n {
            normal[(i, i)] += lambda2;
        }
        let dq = normal.cholesky()?.solve(&(j.transpose() * e));
        let mut changed = false;
        for i in 0..n {
            let l = &limits[i];
            let pinned = (q[i] >= l.hi - LIMIT_EPS && dq[i] > 0.0) || (q[i] <= l.lo + LIMIT_EPS && dq[i] < 0.0);
            if pinned && !frozen[i] {
                frozen[i] = true;
                changed = true;
            }
        }
        if !changed {
            return Some(dq);
        }
    }
}

struct HandIk {
    q: Vec<f64>,
    err: f64,
    iterations: usize,
    history: Vec<f64>,
}

/// Finger postures `(q1, q2)` tried for fingers left far from their targets.
const FINGER_RESTARTS: [[f64; 2]; 4] = [[0.8, -1.2], [-0.8, -1.2], [0.8, 0.6], [-0.8, 0.6]];

/// [`solve_hand_from`] with restarts: while the budget lasts, fingers whose
/// tips miss by more than `tol` are reset to each restart posture in turn,
/// keeping the base and the other fingers, and the best attempt is kept.
fn solve_hand(hand: &HandSpec, targets: &[Vec3], q_init: &[f64], tol: f64, opts: &IkOptions) -> HandIk {
    let mut best = solve_hand_from(hand, targets, q_init, tol, opts.max_iters, opts);
    let mut used = best.iterations;
    for posture in FINGER_RESTARTS {
        if best.err < tol || used >= opts.max_iters {
            break;
        }
        let tips = hand_fk(hand, &best.q);
        let mut start = best.q.clone();
        for (i, (tip, target)) in tips.iter().zip(targets).enumerate() {
            if (tip - target).norm() > tol {
                start[1 + 2 * i] = posture[0];
                start[2 + 2 * i] = posture[1];
            }
        }
        let attempt = solve_hand_from(hand, targets, &start, tol, opts.max_iters - used, opts);
        used += attempt.iterations;
        if attempt.err < best.err {
            best = attempt;
        }
    }
    best.iterations = used;
    best
}

fn solve_hand_from(hand: &HandSpec, targets: &[Vec3], q_init: &[f64], tol: f64, max_iters: usize, opts: &IkOptions) -> HandIk {
    let limits = hand.joint_limits();
    let clamp = |q: &mut Vec<f64>| {
        for (v, l) in q.iter_mut().zip(&limits) {
            *v = l.clamp(*v);
        }
    };
    let mut q = q_init.to_vec();
    clamp(&mut q);
    let mut e = stacked_error(targets, &hand_fk(hand, &q));
    let mut err = e.norm();
    let mut history = vec![err];
    let mut iterations = 0;
    let lambda2 = opts.damping * opts.damping;
    while err >= tol && iterations < max_iters {
        let jac = hand_jacobian(hand, &q);
        let Some(mut dq) = active_set_step(&jac, &e, &q, &limits, lambda2) else {
            break;
        };
        let ratio = (dq[0].abs() / IK_MAX_BASE_STEP_M).max(dq.rows(1, dq.len() - 1).amax() / IK_MAX_STEP);
        if ratio > 1.0 {
            dq /= ratio;
        }
        // Backtrack so that the residual never grows.
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..12 {
            let mut trial: Vec<f64> = q.iter().zip(dq.iter()).map(|(a, d)| a + step * d).collect();
            clamp(&mut trial);
            let e_trial = stacked_error(targets, &hand_fk(hand, &trial));
            let n = e_trial.norm();
            if n < err {
                accepted = Some((trial, e_trial, n));
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        match accepted {
            Some((qn, en, n)) => {
                q = qn;
                e = en;
                err = n;
                history.push(err);
            }
            None => break,
        }
    }
    HandIk { q, err, iterations, history }
}

/// Damped least-squares IK for all ten fingertips, hands solved independently.
///
/// Each hand iterates until its own residual drops below `tol / sqrt(2)`,
/// which bounds the combined residual by `tol`. Steps are capped at
/// [`IK_MAX_STEP`] per finger joint and [`IK_MAX_BASE_STEP_M`] for the base,
/// joints pinned against a limit drop out of the solve, and every accepted
/// step lowers the residual. Joints are clamped to their limits after every
/// update. A hand that stalls is restarted from fixed finger postures within
/// the same `max_iters` budget; `residual_history` covers the returned attempt.
pub fn ik_solve(
    targets: &[Vec3],
    q_init: &[f64],
    spec: &ChainSpec,
    opts: &IkOptions,
) -> Result<IkSolution, KinematicsError> {
    check_len(NUM_FINGERTIPS, targets.len())?;
    check_len(NUM_JOINTS, q_init.len())?;
    let hand_tol = opts.tol_m / std::f64::consts::SQRT_2;
    let left = solve_hand(
        &spec.hands[0],
        &targets[..FINGERS_PER_HAND],
        &q_init[..JOINTS_PER_HAND],
        hand_tol,
        opts,
    );
    let right = solve_hand(
        &spec.hands[1],
        &targets[FINGERS_PER_HAND..],
        &q_init[JOINTS_PER_HAND..],
        hand_tol,
        opts,
    );
    let combine = |a: f64, b: f64| (a * a + b * b).sqrt();
    let n = left.history.len().max(right.history.len());
    let at = |h: &[f64], i: usize| h[i.min(h.len() - 1)];
    let residual_history = (0..n)
        .map(|i| combine(at(&left.history, i), at(&right.history, i)))
        .collect();
    let residual = combine(left.err, right.err);
    let mut q_nominal = left.q;
    q_nominal.extend(right.q);
    Ok(IkSolution {
        q_nominal,
        residual_norm_m: residual,
        converged: residual < opts.tol_m,
        iterations: left.iterations.max(right.iterations),
        residual_history,
    })
}

/// `q_nominal + scale * x0`, clamped to joint limits.
pub fn residual_combine(
    q_nominal: &[f64],
    x0: &[f64],
    scale: f64,
    spec: &ChainSpec,
) -> Result<Vec<f64>, KinematicsError> {
    check_len(q_nominal.len(), x0.len())?;
    check_len(NUM_JOINTS, q_nominal.len())?;
    let mut action: Vec<f64> = q_nominal.iter().zip(x0).map(|(q, r)| q + scale * r).collect();
    spec.clamp(&mut action);
    Ok(action)
}
