//! Finite-difference gradient cases, one random instance per seed.

use pianist_core::autodiff::{grad_check, AdError, Array, GradCheckOptions, ParamStore, ParamVars, Tape, Var};
use pianist_core::denoiser::{DenoiserConfig, UNet1d};
use pianist_core::rng::{self, Rng};
use rand::Rng as _;

pub type Case = fn(u64) -> Result<(), String>;

pub const CASES: [(&str, Case); 10] = [
    ("elementwise_and_broadcast", elementwise_and_broadcast),
    ("matmul", matmul),
    ("mse_under_matmul_chain", mse_under_matmul_chain),
    ("conv1d", conv1d),
    ("conv_transpose1d", conv_transpose1d),
    ("group_norm", group_norm),
    ("activations", activations),
    ("structural_ops", structural_ops),
    ("reductions_and_loss", reductions_and_loss),
    ("full_denoiser_width8", full_denoiser_width8),
];

/// Runs `name` for seeds `0..seeds`, collecting failures.
pub fn run(name: &str, seeds: u64) -> Vec<String> {
    let (_, case) = CASES.iter().find(|(n, _)| *n == name).expect("known case");
    (0..seeds).filter_map(|s| case(s).err().map(|e| format!("{name} seed {s}: {e}"))).collect()
}

pub fn opts(seed: u64) -> GradCheckOptions {
    GradCheckOptions {
        fd_step: 1e-5,
        rel_tol: 1e-4,
        seed,
        ..GradCheckOptions::default()
    }
}

/// `sum(y * r)` for a fixed random `r`, so every output entry carries weight.
fn weighted_sum(t: &mut Tape, y: Var, seed: u64) -> Result<Var, AdError> {
    let mut rng = rng::stream(seed, 99);
    let r = t.constant(Array::randn(t.shape(y), 1.0, &mut rng));
    let p = t.mul(y, r)?;
    Ok(t.sum(p))
}

fn check_with(
    name: &str,
    params: &ParamStore,
    o: &GradCheckOptions,
    f: impl Fn(&mut Tape, &ParamVars) -> Result<Var, AdError>,
) -> Result<(), String> {
    let report = grad_check(f, params, o).map_err(|e| format!("{name}: {e}"))?;
    if report.passed {
        Ok(())
    } else {
        Err(format!("{name}: worst {:?} rel err {:e}", report.worst, report.max_rel_error))
    }
}

fn check(name: &str, seed: u64, params: &ParamStore, f: impl Fn(&mut Tape, &ParamVars) -> Result<Var, AdError>) -> Result<(), String> {
    check_with(name, params, &opts(seed), f)
}

fn dim(rng: &mut Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

pub fn elementwise_and_broadcast(seed: u64) -> Result<(), String> {
    let mut rng = rng::stream(seed, 7);
    let (a, b, c) = (dim(&mut rng, 1, 3), dim(&mut rng, 1, 4), dim(&mut rng, 1, 5));
    let mut p = ParamStore::new();
    p.insert("x", Array::randn(&[a, b, c], 1.0, &mut rng));
    p.insert("y", Array::randn(&[1, b, 1], 1.0, &mut rng));
    check("add/mul/sub", seed, &p, |t, v| {
        let (x, y) = (v.get("x")?, v.get("y")?);
        let s = t.add(x, y)?;
        let m = t.mul(s, x)?;
        let d = t.sub(m, y)?;
        let d = t.scale(d, 0.7);
        let d = t.add_scalar(d, -0.2);
        weighted_sum(t, d, seed)
    })
}

pub fn matmul(seed: u64) -> Result<(), String> {
    let mut rng = rng::stream(seed, 7);
    let (m, k, n) = (dim(&mut rng, 1, 5), dim(&mut rng, 1, 5), dim(&mut rng, 1, 5));
    let mut p = ParamStore::new();
    p.insert("a", Array::randn(&[m, k], 1.0, &mut rng));
    p.insert("b", Array::randn(&[k, n], 1.0, &mut rng));
    check("matmul", seed, &p, |t, v| {
        let y = t.matmul(v.get("a")?, v.get("b")?)?;
        weighted_sum(t, y, seed)
    })
}

/// A smooth quadratic loss, checked at a much tighter tolerance.
pub fn mse_under_matmul_chain(seed: u64) -> Result<(), String> {
    let mut rng = rng::stream(seed, 8);
    let mut p = ParamStore::new();
    p.insert("a", Array::randn(&[4, 3], 1.0, &mut rng));
    p.insert("b", Array::randn(&[3, 2], 1.0, &mut rng));
    let target = Array::randn(&[4, 2], 1.0, &mut rng);
    check_with("mse chain", &p, &GradCheckOptions { rel_tol: 1e-6, ..opts(seed) }, |t, v| {
        let y = t.matmul(v.get("a")?, v.get("b")?)?;
        let tg = t.constant(target.clone());
        t.mse_loss(y, tg)
    })
}

pub fn conv1d(seed: u64) -> Result<(), String> {
    let mut rng = rng::stream(seed, 7);
    let (b, ci, co) = (dim(&mut rng, 1, 2), dim(&mut rng, 1, 3), dim(&mut rng, 1, 3));
    let k = dim(&mut rng, 1, 3);
    let stride = dim(&mut rng, 1, 2);
    let padding = dim(&mut rng, 0, 2);
    let n = dim(&mut rng, k, 7);
    let mut p = ParamStore::new();
    p.insert("x", Array::randn(&[b, ci, n], 1.0, &mut rng));
    p.insert("w", Array::randn(&[co, ci, k], 1.0, &mut rng));
    p.insert("b", Array::randn(&[co], 1.0, &mut rng));
    check("conv1d", seed, &p, |t, v| {
        let y = t.conv1d(v.get("x")?, v.get("w")?, Some(v.get("b")?), stride, padding)?;
        weighted_sum(t, y, seed)
    })
}

pub fn conv_transpose1d(seed: u64) -> Result<(), String> {
    let mut rng = rng::stream(seed, 7);
    let (b, ci, co) = (dim(&mut rng, 1, 2), dim(&mut rng, 1, 3), dim(&mut rng, 1, 3));
    let k = dim(&mut rng, 2, 4);
    let stride = dim(&mut rng, 1, 2);
    let padding = dim(&mut rng, 0, (k - 1) / 2);
    let n = dim(&mut rng, 1, 5);
    let mut p = ParamStore::new();
    p.insert("x", Array::randn(&[b, ci, n], 1.0, &mut rng));
    p.insert("w", Array::randn(&[ci, co, k], 1.0, &mut rng));
    p.insert("b", Array::randn(&[co], 1.0, &mut rng));
    check("conv_transpose1d", seed, &p, |t, v| {
        let y = t.conv_transpose1d(v.get("x")?, v.get("w")?, Some(v.get("b")?), stride, padding)?;
        weighted_sum(t, y, seed)
    })
}

pub fn group_norm(seed: u64) -> Result<(), String> {
    let mut rng = rng::stream(seed, 7);
    let groups = dim(&mut rng, 1, 3);
    let per_group = dim(&mut rng, 1, 3);
    let c = groups * per_group;
    let b = dim(&mut rng, 1, 2);
    let n = dim(&mut rng, if per_group == 1 { 2 } else { 1 }, 5);
    let mut p = ParamStore::new();
    p.insert("x", Array::randn(&[b, c, n], 1.0, &mut rng));
    p.insert("g", Array::randn(&[c], 1.0, &mut rng));
    p.insert("b", Array::randn(&[c], 1.0, &mut rng));
    check("group_norm", seed, &p, |t, v| {
        let y = t.group_norm(v.get("x")?, v.get("g")?, v.get("b")?, groups, 1e-5)?;
        weighted_sum(t, y, seed)
    })
}

pub fn activations(seed: u64) -> Result<(), String> {
    let mut rng = rng::stream(seed, 7);
    let mut p = ParamStore::new();
    p.insert("x", Array::randn(&[2, dim(&mut rng, 1, 6)], 2.0, &mut rng));
    check("mish", seed, &p, |t, v| {
        let y = t.mish(v.get("x")?);
        weighted_sum(t, y, seed)
    })?;
    check("silu", seed, &p, |t, v| {
        let y = t.silu(v.get("x")?);
        weighted_sum(t, y, seed)
    })
}

pub fn structural_ops(seed: u64) -> Result<(), String> {
    let mut rng = rng::stream(seed, 7);
    let (a, b, c) = (dim(&mut rng, 1, 3), dim(&mut rng, 2, 4), dim(&mut rng, 1, 3));
    let mut p = ParamStore::new();
    p.insert("x", Array::randn(&[a, b, c], 1.0, &mut rng));
    p.insert("y", Array::randn(&[a, 2, c], 1.0, &mut rng));
    let idx: Vec<usize> = (0..5).map(|_| rng.random_range(0..b + 2)).collect();
    check("concat/slice/gather/reshape", seed, &p, |t, v| {
        let cat = t.concat(&[v.get("x")?, v.get("y")?], 1)?;
        let g = t.gather(cat, 1, &idx)?;
        let s = t.slice(g, 1, 1, 4)?;
        let r = t.reshape(s, &[a * 3 * c])?;
        weighted_sum(t, r, seed)
    })
}

pub fn reductions_and_loss(seed: u64) -> Result<(), String> {
    let mut rng = rng::stream(seed, 7);
    let shape = [dim(&mut rng, 1, 3), dim(&mut rng, 1, 4)];
    let mut p = ParamStore::new();
    p.insert("x", Array::randn(&shape, 1.0, &mut rng));
    p.insert("y", Array::randn(&shape, 1.0, &mut rng));
    check("mean/mse", seed, &p, |t, v| {
        let (x, y) = (v.get("x")?, v.get("y")?);
        let sq = t.mul(x, x)?;
        let m = t.mean(sq);
        let l = t.mse_loss(x, y)?;
        let s = t.add(m, l)?;
        Ok(t.scale(s, 1.5))
    })
}

pub fn full_denoiser_width8(seed: u64) -> Result<(), String> {
    let net = UNet1d::new(DenoiserConfig::desk()).map_err(|e| e.to_string())?;
    let cfg = net.config().clone();
    let mut params = net.init_params(seed);
    let mut rng = rng::stream(seed, 11);
    // Non-zero FiLM projections so the conditioning path is exercised.
    let film: Vec<String> = params.names().filter(|n| n.contains(".film.")).map(String::from).collect();
    for name in film {
        let shape = params.get(&name).unwrap().shape().to_vec();
        params.insert(name, Array::randn(&shape, 0.1, &mut rng));
    }
    let x = Array::randn(&[2, cfg.action_dim, cfg.horizon], 1.0, &mut rng);
    let cond = Array::randn(&[2, cfg.cond_input_dim], 1.0, &mut rng);
    let target = Array::randn(&[2, cfg.action_dim, cfg.horizon], 1.0, &mut rng);
    let steps = [rng.random_range(1..=100), rng.random_range(1..=100)];
    let o = GradCheckOptions {
        max_coords_per_param: Some(4),
        abs_floor: 1e-5,
        ..opts(seed)
    };
    check_with("full denoiser", &params, &o, |t, v| {
        let xv = t.constant(x.clone());
        let cv = t.constant(cond.clone());
        let tv = t.constant(target.clone());
        let out = net.forward(t, v, xv, &steps, cv).map_err(|e| AdError::ShapeMismatch(e.to_string()))?;
        t.mse_loss(out, tv)
    })
}
