//! Empirical likelihood for one component at fixed `theta`.
//!
//! The profile weights are `u_i = 1 / (n (1 + t'g_i))` where the multiplier `t`
//! maximises the concave dual `sum_i log(1 + t'g_i)`. The logarithm is replaced
//! by a pseudo-logarithm that agrees with `log` on `[1/n, UPPER_KNOT]` and
//! continues quadratically (matching value, slope and curvature) outside that
//! range. The continuation makes the dual defined and bounded for every `t`, so
//! Newton can be started anywhere and the value stays finite when zero is not
//! inside the convex hull of the `g_i`. At an exact interior solution every
//! argument already lies in `[1/n, UPPER_KNOT]`; a continuation branch being
//! active at the optimum is reported as a hull violation.

use crate::error::{CelError, Result};
use crate::linalg::cholesky_solve;
use crate::model::{component_moments, ComponentSpec, Dataset, MomentMatrix};

/// Arguments `1 + t'g_i` above this value use the upper quadratic branch.
/// At the knot the weight is `1 / (n * 1e8)`.
pub const UPPER_KNOT: f64 = 1e8;
pub const MAX_ITERATIONS: usize = 100;
/// Convergence threshold on `||sum_i u_i g_i||_inf`.
pub const RESIDUAL_TOL: f64 = 1e-10;
pub const STEP_TOL: f64 = 1e-12;

/// Quadratic extension of the logarithm below `eps`.
///
/// Returns the value and first two derivatives. For `x >= eps` this is `log x`;
/// below the knot it is the second-order Taylor polynomial of `log` at `eps`,
/// `log(eps) - 3/2 + 2(x/eps) - (x/eps)^2 / 2`.
pub fn log_star(x: f64, eps: f64) -> (f64, f64, f64) {
    if x >= eps {
        (x.ln(), 1.0 / x, -1.0 / (x * x))
    } else {
        let z = x / eps;
        (
            eps.ln() - 1.5 + 2.0 * z - 0.5 * z * z,
            (2.0 - z) / eps,
            -1.0 / (eps * eps),
        )
    }
}

/// `log_star` plus the matching quadratic continuation above [`UPPER_KNOT`].
#[inline]
fn pseudo_log(x: f64, eps: f64) -> (f64, f64, f64) {
    if x > UPPER_KNOT {
        let m = UPPER_KNOT;
        let d = (x - m) / m;
        (m.ln() + d - 0.5 * d * d, (1.0 - d) / m, -1.0 / (m * m))
    } else {
        log_star(x, eps)
    }
}

#[inline]
fn pseudo_log_value(x: f64, eps: f64) -> f64 {
    if x >= eps && x <= UPPER_KNOT {
        x.ln()
    } else {
        pseudo_log(x, eps).0
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A solved component at fixed `theta`.
#[derive(Clone, Debug, PartialEq)]
pub struct InnerSolution {
    /// Lagrange multiplier (length `r`).
    pub t: Vec<f64>,
    /// Profile weights `u_i` (length `n`).
    pub u: Vec<f64>,
    /// `-sum_i log(n u_i)`, zero when the sample already satisfies the constraint.
    pub log_ratio: f64,
    /// `||sum_i u_i g_i||_inf` at the returned multiplier.
    pub residual_norm: f64,
    /// True when a continuation branch of the pseudo-logarithm is active at the
    /// optimum, i.e. zero is not (numerically) inside the convex hull.
    pub hull_violation: bool,
    pub iterations: usize,
    pub converged: bool,
}

/// Negative dual objective `-sum psi(1 + t'g_i)`, its gradient and Hessian.
fn dual_derivatives(g: &MomentMatrix, t: &[f64], eps: f64, grad: &mut [f64], hess: &mut [f64]) -> f64 {
    let r = g.r();
    grad.iter_mut().for_each(|v| *v = 0.0);
    hess.iter_mut().for_each(|v| *v = 0.0);
    let mut obj = 0.0;
    for row in g.rows() {
        let (v, d1, d2) = pseudo_log(1.0 + dot(t, row), eps);
        obj -= v;
        for a in 0..r {
            grad[a] -= d1 * row[a];
            let w = -d2 * row[a];
            for b in 0..=a {
                hess[a * r + b] += w * row[b];
            }
        }
    }
    for a in 0..r {
        for b in 0..a {
            hess[b * r + a] = hess[a * r + b];
        }
    }
    obj
}

fn dual_value(g: &MomentMatrix, t: &[f64], eps: f64) -> f64 {
    -g.rows()
        .map(|row| pseudo_log_value(1.0 + dot(t, row), eps))
        .sum::<f64>()
}

fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// Newton direction for the convex dual; falls back to a ridge and finally to
/// scaled steepest descent when the Hessian is numerically singular.
fn newton_direction(hess: &[f64], grad: &[f64], r: usize) -> Vec<f64> {
    let scale = (0..r).map(|i| hess[i * r + i]).fold(0.0, f64::max);
    let mut ridge = 0.0;
    for _ in 0..6 {
        let mut a = hess.to_vec();
        for i in 0..r {
            a[i * r + i] += ridge;
        }
        let mut d: Vec<f64> = grad.iter().map(|v| -v).collect();
        if cholesky_solve(&mut a, r, &mut d) && d.iter().all(|v| v.is_finite()) {
            return d;
        }
        ridge = if ridge == 0.0 {
            1e-12 * scale.max(f64::MIN_POSITIVE)
        } else {
            ridge * 100.0
        };
    }
    let s = if scale > 0.0 { scale } else { 1.0 };
    grad.iter().map(|v| -v / s).collect()
}

/// Solves the component EL problem for the given moment matrix, starting at `t = 0`.
pub fn solve_multiplier(g: &MomentMatrix) -> Result<InnerSolution> {
    solve_multiplier_from(g, None)
}

/// As [`solve_multiplier`], warm-started at `start` when given.
pub fn solve_multiplier_from(g: &MomentMatrix, start: Option<&[f64]>) -> Result<InnerSolution> {
    let (n, r) = (g.n(), g.r());
    if g.values().iter().any(|v| !v.is_finite()) {
        return Err(CelError::input("moment matrix contains non-finite values"));
    }
    if let Some(s) = start {
        if s.len() != r {
            return Err(CelError::input("warm start has the wrong dimension"));
        }
    }
    let warm = start.filter(|s| s.iter().all(|v| v.is_finite()) && s.iter().any(|&v| v != 0.0));
    let solution = newton(g, warm.map(|s| s.to_vec()).unwrap_or_else(|| vec![0.0; r]));
    if warm.is_some() && (!solution.converged || solution.log_ratio < 0.0) {
        return Ok(newton(g, vec![0.0; r]));
    }
    debug_assert_eq!(solution.u.len(), n);
    Ok(solution)
}

fn newton(g: &MomentMatrix, mut t: Vec<f64>) -> InnerSolution {
    let (n, r) = (g.n(), g.r());
    let nf = n as f64;
    let eps = 1.0 / nf;
    let mut grad = vec![0.0; r];
    let mut hess = vec![0.0; r * r];
    let mut obj = dual_derivatives(g, &t, eps, &mut grad, &mut hess);
    let mut iterations = 0;
    let mut converged = false;
    let mut polished = false;
    let mut trial_grad = vec![0.0; r];
    let mut trial_hess = vec![0.0; r * r];

    loop {
        let residual = inf_norm(&grad) / nf;
        if residual <= RESIDUAL_TOL {
            if polished {
                converged = true;
                break;
            }
            polished = true;
        }
        if iterations >= MAX_ITERATIONS {
            break;
        }
        let d = newton_direction(&hess, &grad, r);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = t.iter().zip(&d).map(|(a, b)| a + alpha * b).collect();
            let value = dual_value(g, &trial, eps);
            if value < obj {
                accepted = Some((trial, None));
                break;
            }
            // Near the optimum the objective stops resolving; accept steps that
            // keep it flat while shrinking the gradient.
            if value <= obj + 1e-14 * (1.0 + obj.abs()) {
                let tv = dual_derivatives(g, &trial, eps, &mut trial_grad, &mut trial_hess);
                if inf_norm(&trial_grad) / nf < residual {
                    accepted = Some((trial, Some(tv)));
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some((trial, known)) = accepted else {
            converged = residual <= RESIDUAL_TOL;
            break;
        };
        iterations += 1;
        let step = alpha * inf_norm(&d);
        t = trial;
        obj = match known {
            Some(v) => {
                grad.copy_from_slice(&trial_grad);
                hess.copy_from_slice(&trial_hess);
                v
            }
            None => dual_derivatives(g, &t, eps, &mut grad, &mut hess),
        };
        if step <= STEP_TOL {
            converged = true;
            break;
        }
    }

    let mut u = Vec::with_capacity(n);
    let mut log_ratio = 0.0;
    let mut hull_violation = false;
    let mut moment = vec![0.0; r];
    for row in g.rows() {
        let arg = 1.0 + dot(&t, row);
        let (v, d1, _) = pseudo_log(arg, eps);
        if !(eps..=UPPER_KNOT).contains(&arg) {
            hull_violation = true;
        }
        log_ratio += v;
        let ui = d1 / nf;
        for (m, &gv) in moment.iter_mut().zip(row) {
            *m += ui * gv;
        }
        u.push(ui);
    }
    InnerSolution {
        t,
        u,
        log_ratio,
        residual_norm: inf_norm(&moment),
        hull_violation,
        iterations,
        converged,
    }
}

/// `Q_1j(theta, t) = (1/n) sum_i g_i / (1 + t'g_i)`.
pub fn constraint_residual(g: &MomentMatrix, t: &[f64]) -> Vec<f64> {
    let nf = g.n() as f64;
    let mut out = vec![0.0; g.r()];
    for row in g.rows() {
        let w = 1.0 / (1.0 + dot(t, row));
        for (o, &gv) in out.iter_mut().zip(row) {
            *o += w * gv;
        }
    }
    out.iter_mut().for_each(|o| *o /= nf);
    out
}

/// One factor of the composite likelihood: builds the moment matrix of `spec`
/// on `dataset` and solves the multiplier problem.
pub fn component_log_ratio(
    spec: &ComponentSpec,
    dataset: &Dataset,
    theta: &[f64],
) -> Result<InnerSolution> {
    let tag = |e: CelError| match e {
        CelError::Input(message) => CelError::Evaluation {
            component: spec.label.clone(),
            message,
        },
        other => other,
    };
    let g = component_moments(spec, dataset, theta).map_err(tag)?;
    solve_multiplier(&g).map_err(tag)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EquationKind;

    fn column(values: &[f64]) -> MomentMatrix {
        MomentMatrix::from_column(values.to_vec()).unwrap()
    }

    #[test]
    fn log_star_at_one_and_at_knot() {
        let (v, d1, d2) = log_star(1.0, 1.0 / 3.0);
        assert_eq!((v, d1, d2), (0.0, 1.0, -1.0));
        let eps = 0.25;
        let (v, d1, d2) = log_star(eps, eps);
        assert!((v - eps.ln()).abs() < 1e-15);
        assert!((d1 - 1.0 / eps).abs() < 1e-12);
        assert!((d2 + 1.0 / (eps * eps)).abs() < 1e-12);
    }

    #[test]
    fn log_star_below_knot_is_taylor_polynomial() {
        let eps: f64 = 0.2;
        let x = eps / 2.0;
        // second-order Taylor expansion of log about eps, evaluated independently
        let h = x - eps;
        let taylor = eps.ln() + h / eps - h * h / (2.0 * eps * eps);
        let (v, d1, d2) = log_star(x, eps);
        assert!((v - taylor).abs() < 1e-14);
        assert!((d1 - (1.0 / eps - h / (eps * eps))).abs() < 1e-12);
        assert!((d2 + 1.0 / (eps * eps)).abs() < 1e-12);
        // continuity just below the knot
        let below = log_star(eps * (1.0 - 1e-9), eps);
        assert!((below.0 - eps.ln()).abs() < 1e-8);
        assert!((below.1 - 1.0 / eps).abs() < 1e-6);
    }

    #[test]
    fn upper_branch_is_c2_at_knot() {
        let m = UPPER_KNOT;
        let (v0, d10, d20) = pseudo_log(m, 0.1);
        let (v1, d11, d21) = pseudo_log(m * (1.0 + 1e-12), 0.1);
        assert!((v0 - v1).abs() < 1e-9);
        assert!((d10 - d11).abs() / d10 < 1e-9);
        assert!((d20 - d21).abs() / d20.abs() < 1e-9);
    }

    #[test]
    fn sample_mean_at_mu_gives_zero() {
        // data {1,2,3}, mu = 2
        let sol = solve_multiplier(&column(&[-1.0, 0.0, 1.0])).unwrap();
        assert!(sol.converged);
        assert!(!sol.hull_violation);
        assert_eq!(sol.t, vec![0.0]);
        for &u in &sol.u {
            assert!((u - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(sol.log_ratio, 0.0);
    }

    #[test]
    fn outside_hull_is_flagged_and_finite() {
        // data {1,2,3}, mu = 5
        let sol = solve_multiplier(&column(&[-4.0, -3.0, -2.0])).unwrap();
        assert!(sol.hull_violation);
        assert!(sol.log_ratio.is_finite());
        assert!(sol.log_ratio > 0.0);
    }

    #[test]
    fn converged_solution_satisfies_constraints() {
        let g = column(&[0.3, -1.2, 2.5, 0.9, -0.4, -2.0]);
        let sol = solve_multiplier(&g).unwrap();
        assert!(sol.converged && !sol.hull_violation);
        let sum_u: f64 = sol.u.iter().sum();
        assert!((sum_u - 1.0).abs() <= 1e-12);
        assert!(sol.residual_norm <= 1e-8);
        let res = constraint_residual(&g, &sol.t);
        assert!(res[0].abs() <= 1e-8);
        for row in g.rows() {
            assert!(1.0 + sol.t[0] * row[0] >= 1.0 / 6.0 - 1e-12);
        }
    }

    #[test]
    fn residual_at_zero_multiplier_is_column_mean() {
        let g = MomentMatrix::new(3, 2, vec![1.0, 2.0, 3.0, -4.0, 5.0, 0.5]).unwrap();
        let res = constraint_residual(&g, &[0.0, 0.0]);
        assert!((res[0] - 3.0).abs() < 1e-15);
        assert!((res[1] - (-0.5)).abs() < 1e-15);
    }

    #[test]
    fn warm_start_reaches_same_solution() {
        let g = MomentMatrix::new(
            5,
            2,
            vec![0.5, 1.0, -1.0, 0.2, 0.8, -0.7, -0.6, -0.3, 0.4, 0.1],
        )
        .unwrap();
        let cold = solve_multiplier(&g).unwrap();
        let warm = solve_multiplier_from(&g, Some(&[0.3, -0.2])).unwrap();
        assert!((cold.log_ratio - warm.log_ratio).abs() < 1e-12);
        for (a, b) in cold.t.iter().zip(&warm.t) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn non_finite_input_rejected() {
        let g = MomentMatrix::from_column(vec![1.0, f64::INFINITY]).unwrap();
        assert!(matches!(solve_multiplier(&g), Err(CelError::Input(_))));
    }

    #[test]
    fn component_wrapper_matches_direct_solve() {
        let ds = Dataset::with_default_names(1, vec![1.0, 2.0, 3.0]).unwrap();
        let spec = ComponentSpec::builtin("x", vec![0], EquationKind::Mean { mu: 0 });
        let sol = component_log_ratio(&spec, &ds, &[2.0]).unwrap();
        assert_eq!(sol.log_ratio, 0.0);
        let direct = solve_multiplier(&column(&[-0.5, 0.5, 1.5])).unwrap();
        let via = component_log_ratio(&spec, &ds, &[1.5]).unwrap();
        assert_eq!(direct, via);
    }
}
