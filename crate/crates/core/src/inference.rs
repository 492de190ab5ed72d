//! Likelihood-ratio tests and test-inversion confidence intervals.
//!
//! The statistic is `T = 2 (l_CE(null) - l_CE(theta_hat))` on the negative-log
//! scale, so it is nonnegative up to optimiser tolerance; tiny negative values
//! are reported as zero.

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::asymptotics::{chisq_quantile, chisq_tail, estimate_all, AsymptoticEstimates, WeightedChiSq};
use crate::composite::{default_init, evaluate, fit_with, profile_fit_with, CelFit, FitOptions};
use crate::error::{CelError, Result};
use crate::model::{CelModel, ParameterPartition};

/// Reference law for the statistic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Weighted chi-square with estimated eigenvalue weights (Monte Carlo when
    /// there is more than one weight).
    EigenMc,
    /// Scaled chi-square `a chi2_b` matching two moments.
    Welch,
    /// Plain chi-square with `q` degrees of freedom; valid for independent components.
    #[serde(rename = "chisq")]
    ChiSquare,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::EigenMc => "eigen_mc",
            Method::Welch => "welch",
            Method::ChiSquare => "chisq",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = CelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eigen" | "eigen_mc" => Ok(Method::EigenMc),
            "welch" => Ok(Method::Welch),
            "chisq" | "chi_square" => Ok(Method::ChiSquare),
            other => Err(CelError::config(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TestOptions {
    pub method: Method,
    /// Required for [`Method::ChiSquare`].
    pub assume_independent: bool,
    /// Evaluate the matrices at `(phi0, nu_hat(phi0))` instead of `(phi0, nu_hat)`.
    pub strict_nuisance: bool,
    pub fit: FitOptions,
}

impl Default for TestOptions {
    fn default() -> Self {
        TestOptions {
            method: Method::EigenMc,
            assume_independent: false,
            strict_nuisance: false,
            fit: FitOptions::default(),
        }
    }
}

impl TestOptions {
    pub fn with_method(method: Method) -> Self {
        TestOptions {
            method,
            ..TestOptions::default()
        }
    }

    fn check(&self) -> Result<()> {
        if self.method == Method::ChiSquare && !self.assume_independent {
            return Err(CelError::config(
                "the chisq method requires components to be asserted independent",
            ));
        }
        Ok(())
    }
}

/// Outcome of a likelihood-ratio test.
#[derive(Clone, Debug, Serialize)]
pub struct TestResult {
    pub statistic: f64,
    pub p_value: f64,
    pub method: Method,
    /// Degrees of freedom for the chisq method.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dof: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub welch_a: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub welch_b: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
    pub theta_hat: Vec<f64>,
    pub theta_null: Vec<f64>,
    pub theta_tilde: Vec<f64>,
    /// Some component's convex hull excludes zero at the null.
    pub hull_violation: bool,
    /// Both the unrestricted and the null fits converged.
    pub converged: bool,
    pub warnings: Vec<String>,
}

/// Upper-tail probability of `t` under the chosen law.
fn p_value(method: Method, est: &AsymptoticEstimates, q: usize, t: f64) -> Result<f64> {
    let p = match method {
        Method::EigenMc => WeightedChiSq::new(&est.eigenvalues)?.tail(t),
        Method::Welch => chisq_tail(est.welch_b, t / est.welch_a),
        Method::ChiSquare => chisq_tail(q as f64, t),
    };
    Ok(p.clamp(0.0, 1.0))
}

/// The `level` quantile of the chosen law.
pub fn critical_value(method: Method, est: &AsymptoticEstimates, q: usize, level: f64) -> Result<f64> {
    if !(level > 0.0 && level < 1.0) {
        return Err(CelError::input("level must lie in (0, 1)"));
    }
    Ok(match method {
        Method::EigenMc => WeightedChiSq::new(&est.eigenvalues)?.quantile(level),
        Method::Welch => est.welch_a * chisq_quantile(est.welch_b, level),
        Method::ChiSquare => chisq_quantile(q as f64, level),
    })
}

fn fit_default(model: &CelModel, options: &FitOptions) -> Result<CelFit> {
    fit_with(model, &default_init(model), options)
}

#[allow(clippy::too_many_arguments)]
fn finish(
    model: &CelModel,
    fit: &CelFit,
    partition: &ParameterPartition,
    statistic: f64,
    theta_null: Vec<f64>,
    theta_tilde: Vec<f64>,
    hull_violation: bool,
    null_converged: bool,
    options: &TestOptions,
) -> Result<TestResult> {
    // At a hull-violating null the matrices may not be estimable; p is 0 regardless.
    let est = match estimate_all(model, &theta_tilde, partition) {
        Ok(e) => Some(e),
        Err(_) if hull_violation => None,
        Err(e) => return Err(e),
    };
    let q = partition.q();
    let p_value = match &est {
        Some(e) if !hull_violation => p_value(options.method, e, q, statistic)?,
        _ => 0.0,
    };
    let mut warnings = Vec::new();
    if !fit.converged {
        warnings.push("unrestricted fit did not converge".to_string());
    }
    if !null_converged {
        warnings.push("restricted fit did not converge".to_string());
    }
    if hull_violation {
        warnings.push("zero lies outside a component's convex hull at the null".to_string());
    }
    let (dof, welch_a, welch_b, weights) = match (options.method, &est) {
        (Method::ChiSquare, _) => (Some(q), None, None, None),
        (Method::Welch, Some(e)) => (None, Some(e.welch_a), Some(e.welch_b), None),
        (Method::EigenMc, Some(e)) => (None, None, None, Some(e.eigenvalues.clone())),
        (_, None) => (None, None, None, None),
    };
    Ok(TestResult {
        statistic,
        p_value,
        method: options.method,
        dof,
        welch_a,
        welch_b,
        weights,
        theta_hat: fit.theta_hat.values().to_vec(),
        theta_null,
        theta_tilde,
        hull_violation,
        converged: fit.converged && null_converged,
        warnings,
    })
}

/// `T` for a simple null, with whether any component is hull-violating there.
pub fn simple_statistic(model: &CelModel, fit: &CelFit, theta0: &[f64]) -> Result<(f64, bool)> {
    let eval = evaluate(model, theta0, None, false)?;
    let t = (2.0 * (eval.value - fit.objective)).max(0.0);
    Ok((t, eval.any_hull_violation()))
}

/// Tests `theta = theta0` for the whole parameter vector.
pub fn lr_test_simple(model: &CelModel, theta0: &[f64], options: &TestOptions) -> Result<TestResult> {
    options.check()?;
    let fit = fit_default(model, &options.fit)?;
    lr_test_simple_given(model, &fit, theta0, options)
}

/// As [`lr_test_simple`] with an existing unrestricted fit.
pub fn lr_test_simple_given(
    model: &CelModel,
    fit: &CelFit,
    theta0: &[f64],
    options: &TestOptions,
) -> Result<TestResult> {
    options.check()?;
    let (t, hull) = simple_statistic(model, fit, theta0)?;
    let partition = ParameterPartition::full(model.p());
    finish(model, fit, &partition, t, theta0.to_vec(), theta0.to_vec(), hull, true, options)
}

/// Tests `phi = phi0` for the interest parameters of `partition`, profiling out the rest.
pub fn lr_test_profile(
    model: &CelModel,
    partition: &ParameterPartition,
    phi0: &[f64],
    options: &TestOptions,
) -> Result<TestResult> {
    options.check()?;
    let fit = fit_default(model, &options.fit)?;
    lr_test_profile_given(model, &fit, partition, phi0, options)
}

pub fn lr_test_profile_given(
    model: &CelModel,
    fit: &CelFit,
    partition: &ParameterPartition,
    phi0: &[f64],
    options: &TestOptions,
) -> Result<TestResult> {
    options.check()?;
    let theta_hat = fit.theta_hat.values();
    let nu_hat: Vec<f64> = partition.nuisance().iter().map(|&i| theta_hat[i]).collect();
    let prof = profile_fit_with(model, partition, phi0, &nu_hat, &options.fit)?;
    let t = (2.0 * (prof.objective - fit.objective)).max(0.0);
    let theta_tilde = if options.strict_nuisance {
        prof.theta.clone()
    } else {
        partition.assemble(phi0, &nu_hat)
    };
    let hull = prof.any_hull_violation();
    finish(model, fit, partition, t, prof.theta, theta_tilde, hull, prof.converged, options)
}

/// A confidence interval for one parameter by inverting the profile test.
#[derive(Clone, Debug, Serialize)]
pub struct ConfidenceInterval {
    pub parameter: String,
    pub level: f64,
    pub method: Method,
    pub estimate: f64,
    pub lower: f64,
    pub upper: f64,
    pub critical_value: f64,
    /// Final bracket width at each endpoint.
    pub endpoint_tolerance: f64,
    /// No crossing was found within the expansion budget; the endpoint is the
    /// farthest point examined.
    pub lower_open: bool,
    pub upper_open: bool,
    /// The endpoint is where a component's convex hull stops containing zero.
    pub lower_at_hull: bool,
    pub upper_at_hull: bool,
}

impl ConfidenceInterval {
    pub fn length(&self) -> f64 {
        self.upper - self.lower
    }
}

const MAX_EXPANSIONS: usize = 50;

/// Interval for parameter `index` at coverage `level`.
pub fn confidence_interval(
    model: &CelModel,
    index: usize,
    level: f64,
    options: &TestOptions,
) -> Result<ConfidenceInterval> {
    options.check()?;
    let fit = fit_default(model, &options.fit)?;
    confidence_interval_given(model, &fit, index, level, options)
}

pub fn confidence_interval_given(
    model: &CelModel,
    fit: &CelFit,
    index: usize,
    level: f64,
    options: &TestOptions,
) -> Result<ConfidenceInterval> {
    options.check()?;
    let partition = ParameterPartition::new(vec![index], model.p())?;
    let theta_hat = fit.theta_hat.values().to_vec();
    let est = estimate_all(model, &theta_hat, &partition)?;
    let crit = critical_value(options.method, &est, 1, level)?;
    let estimate = theta_hat[index];
    let se = est.sandwich[(index, index)].max(0.0).sqrt();
    let step0 = if se.is_finite() && se > 0.0 {
        se
    } else {
        1e-3 * (1.0 + estimate.abs())
    };
    let tol = 1e-6f64.min(1e-3 * step0);
    let nu_hat: Vec<f64> = partition.nuisance().iter().map(|&i| theta_hat[i]).collect();

    // Whether `phi` lies outside the interval, and whether that is because of the hull.
    let outside = |phi: f64, nu: &mut Vec<f64>| -> Result<(bool, bool)> {
        let prof = profile_fit_with(model, &partition, &[phi], nu, &options.fit)?;
        let hull = prof.any_hull_violation();
        if !hull {
            nu.clone_from(&prof.nu_hat);
        }
        let t = 2.0 * (prof.objective - fit.objective);
        Ok((hull || t >= crit, hull))
    };

    let endpoint = |dir: f64| -> Result<(f64, bool, bool)> {
        let mut nu = nu_hat.clone();
        let mut inner = estimate;
        let mut step = step0;
        let mut outer = estimate + dir * step;
        let mut found = None;
        for _ in 0..MAX_EXPANSIONS {
            let (out, hull) = outside(outer, &mut nu)?;
            if out {
                found = Some(hull);
                break;
            }
            inner = outer;
            step *= 2.0;
            outer = estimate + dir * step;
        }
        let Some(mut hull) = found else {
            return Ok((inner, true, false));
        };
        let mut inner_nu = nu.clone();
        while (outer - inner).abs() > tol {
            let mid = 0.5 * (inner + outer);
            let mut trial_nu = inner_nu.clone();
            let (out, h) = outside(mid, &mut trial_nu)?;
            if out {
                outer = mid;
                hull = h;
            } else {
                inner = mid;
                inner_nu = trial_nu;
            }
        }
        Ok((0.5 * (inner + outer), false, hull))
    };

    let (lower, lower_open, lower_at_hull) = endpoint(-1.0)?;
    let (upper, upper_open, upper_at_hull) = endpoint(1.0)?;
    Ok(ConfidenceInterval {
        parameter: model.parameter_names()[index].clone(),
        level,
        method: options.method,
        estimate,
        lower,
        upper,
        critical_value: crit,
        endpoint_tolerance: tol,
        lower_open,
        upper_open,
        lower_at_hull,
        upper_at_hull,
    })
}
