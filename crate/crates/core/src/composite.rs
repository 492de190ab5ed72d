//! The composite objective `l_CE(theta) = sum_j l_E^(j)(theta)`, its gradient,
//! and full and profile minimisation.
//!
//! Every evaluation re-solves all `J` inner problems at the current `theta`.
//! Because each multiplier is stationary for its own dual, the gradient of the
//! sum is `sum_j sum_i psi'(1 + t_j'g_ij) (dg_ij/dtheta)' t_j`, with no terms
//! from `dt_j/dtheta`.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{CelError, Result};
use crate::inner_el::{solve_multiplier_from, InnerSolution};
use crate::model::{CelModel, MomentRole, ParameterPartition, ParameterVector};
use crate::simgen::splitmix64;

/// Objective value, gradient and inner solutions at one `theta`.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub components: Vec<InnerSolution>,
}

impl Evaluation {
    pub fn any_hull_violation(&self) -> bool {
        self.components.iter().any(|c| c.hull_violation)
    }

    pub fn all_converged(&self) -> bool {
        self.components.iter().all(|c| c.converged)
    }
}

fn check_theta(model: &CelModel, theta: &[f64]) -> Result<()> {
    if theta.len() != model.p() {
        return Err(CelError::input(format!(
            "theta has {} entries, model has {} parameters",
            theta.len(),
            model.p()
        )));
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(CelError::input("theta contains non-finite values"));
    }
    Ok(())
}

fn solve_component(
    model: &CelModel,
    j: usize,
    theta: &[f64],
    warm: Option<&[f64]>,
) -> Result<(InnerSolution, Vec<f64>)> {
    let spec = &model.components()[j];
    let tag = |e: CelError| match e {
        CelError::Input(message) => CelError::Evaluation {
            component: spec.label.clone(),
            message,
        },
        other => other,
    };
    let g = model.moment_matrix(j, theta).map_err(tag)?;
    let sol = solve_multiplier_from(&g, warm).map_err(tag)?;
    let n = model.n() as f64;
    let weights: Vec<f64> = sol.u.iter().map(|u| u * n).collect();
    let mut grad = vec![0.0; model.p()];
    model.weighted_jacobian_transpose(j, theta, &sol.t, &weights, &mut grad);
    Ok((sol, grad))
}

/// Solves every component at `theta`, optionally warm-started from previous
/// multipliers (one per component). With `parallel`, components are solved on
/// the current rayon pool; the result does not depend on the pool size.
pub fn evaluate(
    model: &CelModel,
    theta: &[f64],
    warm: Option<&[Vec<f64>]>,
    parallel: bool,
) -> Result<Evaluation> {
    check_theta(model, theta)?;
    if let Some(w) = warm {
        if w.len() != model.j() {
            return Err(CelError::input("warm start needs one multiplier per component"));
        }
    }
    let start = |j: usize| warm.map(|w| w[j].as_slice());
    let parts: Vec<Result<(InnerSolution, Vec<f64>)>> = if parallel {
        (0..model.j())
            .into_par_iter()
            .map(|j| solve_component(model, j, theta, start(j)))
            .collect()
    } else {
        (0..model.j())
            .map(|j| solve_component(model, j, theta, start(j)))
            .collect()
    };
    let mut value = 0.0;
    let mut gradient = vec![0.0; model.p()];
    let mut components = Vec::with_capacity(model.j());
    for part in parts {
        let (sol, grad) = part?;
        value += sol.log_ratio;
        for (a, b) in gradient.iter_mut().zip(&grad) {
            *a += b;
        }
        components.push(sol);
    }
    Ok(Evaluation {
        value,
        gradient,
        components,
    })
}

/// `l_CE(theta)` with the per-component solutions.
pub fn neg_log_cel(model: &CelModel, theta: &[f64]) -> Result<Evaluation> {
    evaluate(model, theta, None, false)
}

/// Gradient of [`neg_log_cel`] with respect to `theta`.
pub fn grad_neg_log_cel(model: &CelModel, theta: &[f64]) -> Result<Vec<f64>> {
    Ok(evaluate(model, theta, None, false)?.gradient)
}

/// Outer optimiser settings.
#[derive(Clone, Debug, PartialEq)]
pub struct FitOptions {
    pub max_iterations: usize,
    /// Stop when the gradient infinity-norm falls below this.
    pub grad_tol: f64,
    /// Give up after a run of steps whose relative objective change is below this.
    pub rel_tol: f64,
    /// Extra jittered starts in addition to the supplied one.
    pub multi_start: usize,
    pub jitter_seed: u64,
    /// Solve components concurrently on the current rayon pool.
    pub parallel: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iterations: 500,
            grad_tol: 1e-6,
            rel_tol: 1e-12,
            multi_start: 0,
            jitter_seed: 0x5eed,
            parallel: false,
        }
    }
}

/// Result of an unrestricted fit.
#[derive(Clone, Debug)]
pub struct CelFit {
    pub theta_hat: ParameterVector,
    pub objective: f64,
    pub components: Vec<InnerSolution>,
    pub grad_norm: f64,
    pub converged: bool,
    pub iterations: usize,
    pub warnings: Vec<String>,
}

/// Result of minimising over the nuisance parameters with the interest part fixed.
#[derive(Clone, Debug)]
pub struct ProfileFit {
    pub phi_fixed: Vec<f64>,
    pub nu_hat: Vec<f64>,
    /// The full parameter vector `(phi_fixed, nu_hat)`.
    pub theta: Vec<f64>,
    pub objective: f64,
    pub components: Vec<InnerSolution>,
    pub grad_norm: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl ProfileFit {
    pub fn any_hull_violation(&self) -> bool {
        self.components.iter().any(|c| c.hull_violation)
    }
}

/// Method-of-moments starting values: a mean parameter starts at the pooled
/// mean of every column that estimates it, a variance parameter at the pooled
/// biased variance. Parameters without a moment interpretation start at zero.
pub fn default_init(model: &CelModel) -> Vec<f64> {
    let p = model.p();
    let data = model.dataset();
    let mut mean_sum = vec![0.0; p];
    let mut mean_count = vec![0usize; p];
    let mut var_sum = vec![0.0; p];
    let mut var_count = vec![0usize; p];
    for spec in model.components() {
        for role in spec.equation.moment_roles() {
            match role {
                MomentRole::Mean { param, column } => {
                    let col = data.column(spec.columns[column]);
                    mean_sum[param] += col.iter().sum::<f64>() / col.len() as f64;
                    mean_count[param] += 1;
                }
                MomentRole::Variance { param, column } => {
                    let col = data.column(spec.columns[column]);
                    let m = col.iter().sum::<f64>() / col.len() as f64;
                    let v = col.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / col.len() as f64;
                    var_sum[param] += v;
                    var_count[param] += 1;
                }
            }
        }
    }
    (0..p)
        .map(|i| {
            if var_count[i] > 0 {
                var_sum[i] / var_count[i] as f64
            } else if mean_count[i] > 0 {
                mean_sum[i] / mean_count[i] as f64
            } else {
                0.0
            }
        })
        .collect()
}

/// Minimises `l_CE` from `init` with default options.
pub fn fit(model: &CelModel, init: &[f64]) -> Result<CelFit> {
    fit_with(model, init, &FitOptions::default())
}

pub fn fit_with(model: &CelModel, init: &[f64], options: &FitOptions) -> Result<CelFit> {
    check_theta(model, init)?;
    let mut warnings = model.warnings().to_vec();
    let mut best: Option<Minimum<Evaluation>> = None;
    for start in starts(init, options) {
        let minimum = match run_minimizer(model, &start, None, options) {
            Ok(m) => m,
            Err(_) if best.is_some() => continue,
            Err(e) => return Err(e),
        };
        if best.as_ref().is_none_or(|b| better(&minimum, b)) {
            best = Some(minimum);
        }
    }
    let best = best.expect("at least one start");
    let first = evaluate(model, init, None, options.parallel)?;
    if first.components.iter().all(|c| c.hull_violation) {
        warnings.push("every component violates the convex hull condition at the initial value".into());
    }
    let eval = best.payload;
    Ok(CelFit {
        theta_hat: model.parameters(best.x)?,
        objective: eval.value,
        grad_norm: inf_norm(&eval.gradient),
        components: eval.components,
        converged: best.converged,
        iterations: best.iterations,
        warnings,
    })
}

fn better<P>(a: &Minimum<P>, b: &Minimum<P>) -> bool {
    match (a.converged, b.converged) {
        (true, false) => true,
        (false, true) => false,
        _ => a.value < b.value,
    }
}

fn starts(init: &[f64], options: &FitOptions) -> Vec<Vec<f64>> {
    let mut out = vec![init.to_vec()];
    for k in 1..=options.multi_start as u64 {
        let mut state = splitmix64(options.jitter_seed ^ k.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        let jittered = init
            .iter()
            .map(|&x| {
                state = splitmix64(state);
                let u = (state >> 11) as f64 * (1.0 / (1u64 << 53) as f64) * 2.0 - 1.0;
                x + 0.1 * (1.0 + x.abs()) * u
            })
            .collect();
        out.push(jittered);
    }
    out
}

/// Runs the minimiser over all parameters (`free = None`) or over the listed
/// indices with the rest held at their value in `base`.
fn run_minimizer(
    model: &CelModel,
    base: &[f64],
    free: Option<&[usize]>,
    options: &FitOptions,
) -> Result<Minimum<Evaluation>> {
    let all: Vec<usize> = (0..model.p()).collect();
    let free = free.unwrap_or(&all);
    let mut warm: Option<Vec<Vec<f64>>> = None;
    let mut theta = base.to_vec();
    let x0: Vec<f64> = free.iter().map(|&i| base[i]).collect();
    let objective = |x: &[f64]| -> Result<(f64, Vec<f64>, Evaluation)> {
        for (&i, &v) in free.iter().zip(x) {
            theta[i] = v;
        }
        let eval = evaluate(model, &theta, warm.as_deref(), options.parallel)?;
        warm = Some(eval.components.iter().map(|c| c.t.clone()).collect());
        let grad = free.iter().map(|&i| eval.gradient[i]).collect();
        Ok((eval.value, grad, eval))
    };
    let mut minimum = minimize(objective, x0, options)?;
    let mut full = base.to_vec();
    for (&i, &v) in free.iter().zip(&minimum.x) {
        full[i] = v;
    }
    minimum.x = full;
    Ok(minimum)
}

/// Minimises over the nuisance parameters with the interest parameters pinned
/// at `phi0`. With no nuisance parameters this is a single evaluation.
pub fn profile_fit(
    model: &CelModel,
    partition: &ParameterPartition,
    phi0: &[f64],
    nu_init: &[f64],
) -> Result<ProfileFit> {
    profile_fit_with(model, partition, phi0, nu_init, &FitOptions::default())
}

pub fn profile_fit_with(
    model: &CelModel,
    partition: &ParameterPartition,
    phi0: &[f64],
    nu_init: &[f64],
    options: &FitOptions,
) -> Result<ProfileFit> {
    if partition.p() != model.p() {
        return Err(CelError::config("partition does not match the model's parameter count"));
    }
    if phi0.len() != partition.q() || nu_init.len() != partition.nuisance().len() {
        return Err(CelError::input("phi0 or nu_init has the wrong length"));
    }
    let base = partition.assemble(phi0, nu_init);
    check_theta(model, &base)?;
    if partition.nuisance().is_empty() {
        let eval = evaluate(model, &base, None, options.parallel)?;
        return Ok(ProfileFit {
            phi_fixed: phi0.to_vec(),
            nu_hat: Vec::new(),
            theta: base,
            objective: eval.value,
            grad_norm: 0.0,
            components: eval.components,
            converged: true,
            iterations: 0,
        });
    }
    let minimum = run_minimizer(model, &base, Some(partition.nuisance()), options)?;
    let nu_hat = partition.nuisance().iter().map(|&i| minimum.x[i]).collect();
    let grad_norm = partition
        .nuisance()
        .iter()
        .fold(0.0f64, |m, &i| m.max(minimum.payload.gradient[i].abs()));
    Ok(ProfileFit {
        phi_fixed: phi0.to_vec(),
        nu_hat,
        theta: minimum.x,
        objective: minimum.payload.value,
        components: minimum.payload.components,
        grad_norm,
        converged: minimum.converged,
        iterations: minimum.iterations,
    })
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Outcome of [`minimize`]; `payload` is whatever the objective returned at `x`.
#[derive(Clone, Debug)]
pub(crate) struct Minimum<P> {
    pub x: Vec<f64>,
    pub value: f64,
    pub payload: P,
    pub iterations: usize,
    pub converged: bool,
}

const ARMIJO_C1: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;
const MAX_STALLS: usize = 3;
const NOISE_ULPS: f64 = 64.0;
/// Consecutive steps with negligible objective change before giving up.
const MAX_FLAT_STEPS: usize = 20;

/// BFGS on the inverse Hessian with Armijo backtracking. Trial points where
/// the objective fails are treated as infinitely bad. `converged` means the
/// gradient infinity-norm reached `grad_tol`.
pub(crate) fn minimize<P, F>(mut f: F, x0: Vec<f64>, options: &FitOptions) -> Result<Minimum<P>>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>, P)>,
{
    let m = x0.len();
    let (mut fx, mut gx, mut payload) = f(&x0)?;
    let mut x = x0;
    let scaled_identity = |g: &[f64]| DMatrix::<f64>::identity(m, m) / inf_norm(g).max(1.0);
    let mut h = scaled_identity(&gx);
    let mut fresh = true;
    let mut iterations = 0;
    let mut stalls = 0;
    let mut flat_steps = 0;
    let mut converged = inf_norm(&gx) <= options.grad_tol;

    while !converged && iterations < options.max_iterations {
        let g = DVector::from_column_slice(&gx);
        let mut d = -(&h * &g);
        let mut slope = g.dot(&d);
        if !(slope < 0.0) || !slope.is_finite() {
            h = scaled_identity(&gx);
            fresh = true;
            d = -(&h * &g);
            slope = g.dot(&d);
        }
        let mut alpha = 1.0;
        let mut accepted = None;
        // Decreases below this are lost in rounding; there the gradient decides.
        let noise = NOISE_ULPS * f64::EPSILON * fx.abs().max(1.0);
        let gnorm = inf_norm(&gx);
        for _ in 0..MAX_BACKTRACKS {
            let xt: Vec<f64> = x.iter().zip(d.iter()).map(|(a, b)| a + alpha * b).collect();
            if let Ok((ft, gt, pt)) = f(&xt) {
                let armijo = ft <= fx + ARMIJO_C1 * alpha * slope;
                let flat = ft <= fx + noise && inf_norm(&gt) < gnorm;
                if ft.is_finite() && (armijo || flat) {
                    accepted = Some((xt, ft, gt, pt));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((xt, ft, gt, pt)) = accepted else {
            if fresh || stalls >= MAX_STALLS {
                break;
            }
            stalls += 1;
            h = scaled_identity(&gx);
            fresh = true;
            continue;
        };
        iterations += 1;
        let s: Vec<f64> = xt.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gt.iter().zip(&gx).map(|(a, b)| a - b).collect();
        let change = (fx - ft).abs();
        let scale = fx.abs().max(ft.abs());
        x = xt;
        fx = ft;
        gx = gt;
        payload = pt;
        if inf_norm(&gx) <= options.grad_tol {
            converged = true;
            break;
        }
        let sy = dot(&s, &y);
        let yy = dot(&y, &y);
        if sy > 1e-12 * dot(&s, &s).sqrt() * yy.sqrt() && sy > 0.0 {
            if fresh {
                h = DMatrix::identity(m, m) * (sy / yy);
                fresh = false;
            }
            let rho = 1.0 / sy;
            let sv = DVector::from_column_slice(&s);
            let yv = DVector::from_column_slice(&y);
            let hy = &h * &yv;
            let yhy = yv.dot(&hy);
            // H+ = H - rho (s (Hy)' + (Hy) s') + (rho^2 y'Hy + rho) s s'
            h -= (&sv * hy.transpose() + &hy * sv.transpose()) * rho;
            h += (&sv * sv.transpose()) * (rho * rho * yhy + rho);
        }
        if change <= options.rel_tol * scale {
            flat_steps += 1;
            if flat_steps >= MAX_FLAT_STEPS {
                break;
            }
        } else {
            flat_steps = 0;
        }
    }
    Ok(Minimum {
        x,
        value: fx,
        payload,
        iterations,
        converged,
    })
}
