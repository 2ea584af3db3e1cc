//! Central finite-difference check of tape gradients.

use indexmap::IndexMap;
use rand::seq::index::sample;

use super::{AdError, ParamStore, ParamVars, Tape, Var};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub fd_step: f64,
    pub rel_tol: f64,
    /// Lower bound on the denominator of the relative error, so that two
    /// near-zero gradients compare as equal.
    pub abs_floor: f64,
    /// Checks at most this many coordinates per parameter, chosen at random.
    pub max_coords_per_param: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            fd_step: 1e-5,
            rel_tol: 1e-4,
            abs_floor: 1e-6,
            max_coords_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max relative error over the checked coordinates of each parameter.
    pub per_param: IndexMap<String, f64>,
    pub max_rel_error: f64,
    /// Parameter and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub coords_checked: usize,
    pub passed: bool,
}

/// Relative error `|a - b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    let d = (a - b).abs();
    if d == 0.0 {
        return 0.0;
    }
    d / a.abs().max(b.abs()).max(floor)
}

/// Compares reverse-mode gradients of the scalar `f` against central
/// differences for every parameter in `params`.
pub fn grad_check<F>(f: F, params: &ParamStore, opts: &GradCheckOptions) -> Result<GradCheckReport, AdError>
where
    F: Fn(&mut Tape, &ParamVars) -> Result<Var, AdError>,
{
    let eval = |p: &ParamStore| -> Result<f64, AdError> {
        let mut tape = Tape::new();
        let vars = p.bind_frozen(&mut tape);
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let out = f(&mut tape, &vars)?;
    let analytic = params.gradients(&vars, &tape.backward(out)?);

    let mut rng = rng::stream(opts.seed, rng::ids::SAMPLER);
    let mut probe = params.clone();
    let mut report = GradCheckReport {
        per_param: IndexMap::new(),
        max_rel_error: 0.0,
        worst: None,
        coords_checked: 0,
        passed: true,
    };
    for (name, value) in params.iter() {
        let n = value.len();
        let coords: Vec<usize> = match opts.max_coords_per_param {
            Some(m) if m < n => sample(&mut rng, n, m).into_vec(),
            _ => (0..n).collect(),
        };
        let grad = analytic.get(name).expect("gradient for every parameter");
        let mut worst = 0.0f64;
        for i in coords {
            let x = value.data()[i];
            probe.get_mut(name).expect("probe layout").data_mut()[i] = x + opts.fd_step;
            let up = eval(&probe)?;
            probe.get_mut(name).expect("probe layout").data_mut()[i] = x - opts.fd_step;
            let down = eval(&probe)?;
            probe.get_mut(name).expect("probe layout").data_mut()[i] = x;
            let numeric = (up - down) / (2.0 * opts.fd_step);
            let err = relative_error(grad.data()[i], numeric, opts.abs_floor);
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((name.to_string(), i));
            }
            worst = worst.max(err);
            report.coords_checked += 1;
        }
        report.per_param.insert(name.to_string(), worst);
    }
    report.passed = report.max_rel_error <= opts.rel_tol;
    Ok(report)
}
