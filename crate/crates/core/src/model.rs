//! Data model: the sample, the global parameter vector, and the estimating
//! equations each likelihood component imposes.
//!
//! A component reads an ordered subset of the dataset columns and evaluates an
//! estimating equation `g(z, theta)` of dimension `r`. Equations address the
//! global parameter vector through explicit indices, so parameters can be
//! shared across components (a common mean, a common variance).

use std::fmt;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::error::{CelError, Result};

/// Minimum number of observations per locally-read parameter before
/// `validate_model` warns.
pub const MIN_OBS_PER_PARAMETER: usize = 10;

/// An `n x k` numeric sample with named columns, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    column_names: Vec<String>,
    values: Vec<f64>,
    n: usize,
    k: usize,
}

impl Dataset {
    /// Builds a dataset from row-major values. Rejects empty shapes and
    /// non-finite entries.
    pub fn from_row_major(column_names: Vec<String>, values: Vec<f64>) -> Result<Self> {
        let k = column_names.len();
        if k == 0 {
            return Err(CelError::input("dataset must have at least one column"));
        }
        if values.is_empty() || !values.len().is_multiple_of(k) {
            return Err(CelError::input(format!(
                "dataset has {} values, not a positive multiple of {k} columns",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(CelError::input(format!(
                "non-finite value at row {}, column '{}'",
                pos / k,
                column_names[pos % k]
            )));
        }
        let n = values.len() / k;
        Ok(Dataset {
            column_names,
            values,
            n,
            k,
        })
    }

    pub fn from_rows(column_names: Vec<String>, rows: &[Vec<f64>]) -> Result<Self> {
        let k = column_names.len();
        if let Some((i, row)) = rows.iter().enumerate().find(|(_, r)| r.len() != k) {
            return Err(CelError::input(format!(
                "row {i} has {} values, expected {k}",
                row.len()
            )));
        }
        Self::from_row_major(column_names, rows.concat())
    }

    pub fn from_columns(column_names: Vec<String>, columns: &[Vec<f64>]) -> Result<Self> {
        if columns.len() != column_names.len() {
            return Err(CelError::input("column count does not match column names"));
        }
        let n = columns.first().map_or(0, |c| c.len());
        if columns.iter().any(|c| c.len() != n) {
            return Err(CelError::input("columns have unequal lengths"));
        }
        let k = columns.len();
        let mut values = Vec::with_capacity(n * k);
        for i in 0..n {
            values.extend(columns.iter().map(|c| c[i]));
        }
        Self::from_row_major(column_names, values)
    }

    /// Columns named `z1..zk`.
    pub fn with_default_names(k: usize, values: Vec<f64>) -> Result<Self> {
        Self::from_row_major((1..=k).map(|j| format!("z{j}")).collect(), values)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.column_names.iter().position(|c| c == name)
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.k..(i + 1) * self.k]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n).map(|i| self.values[i * self.k + j]).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Named parameter values `theta`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterVector {
    names: Vec<String>,
    values: Vec<f64>,
}

impl ParameterVector {
    pub fn new(names: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if names.is_empty() {
            return Err(CelError::config("parameter vector must be non-empty"));
        }
        if names.len() != values.len() {
            return Err(CelError::config(format!(
                "{} parameter names for {} values",
                names.len(),
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(CelError::input(format!(
                "parameter '{}' is not finite",
                names[i]
            )));
        }
        Ok(ParameterVector { names, values })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.index_of(name).map(|i| self.values[i])
    }
}

/// Split of the parameter indices into interest (`phi`) and nuisance (`nu`) parts.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParameterPartition {
    interest: Vec<usize>,
    nuisance: Vec<usize>,
}

impl ParameterPartition {
    /// `interest` must be distinct, in range, and non-empty; the nuisance part is
    /// the ascending complement in `0..p`.
    pub fn new(interest: Vec<usize>, p: usize) -> Result<Self> {
        if interest.is_empty() || interest.len() > p {
            return Err(CelError::config(format!(
                "interest set must have between 1 and {p} parameters"
            )));
        }
        let mut seen = vec![false; p];
        for &i in &interest {
            if i >= p {
                return Err(CelError::config(format!("parameter index {i} out of range 0..{p}")));
            }
            if seen[i] {
                return Err(CelError::config(format!("parameter index {i} repeated")));
            }
            seen[i] = true;
        }
        let nuisance = (0..p).filter(|&i| !seen[i]).collect();
        Ok(ParameterPartition { interest, nuisance })
    }

    /// The trivial partition with every parameter of interest.
    pub fn full(p: usize) -> Self {
        ParameterPartition {
            interest: (0..p).collect(),
            nuisance: Vec::new(),
        }
    }

    pub fn interest(&self) -> &[usize] {
        &self.interest
    }

    pub fn nuisance(&self) -> &[usize] {
        &self.nuisance
    }

    pub fn q(&self) -> usize {
        self.interest.len()
    }

    pub fn p(&self) -> usize {
        self.interest.len() + self.nuisance.len()
    }

    /// Assembles a full parameter vector from interest and nuisance values.
    pub fn assemble(&self, phi: &[f64], nu: &[f64]) -> Vec<f64> {
        let mut theta = vec![0.0; self.p()];
        for (&i, &v) in self.interest.iter().zip(phi) {
            theta[i] = v;
        }
        for (&i, &v) in self.nuisance.iter().zip(nu) {
            theta[i] = v;
        }
        theta
    }
}

/// How a parameter can be initialised from one of the columns an equation reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MomentRole {
    /// `param` is the mean of local column `column`.
    Mean { param: usize, column: usize },
    /// `param` is the variance of local column `column`.
    Variance { param: usize, column: usize },
}

/// An unbiased estimating function `g(z, theta)` for one likelihood component.
///
/// `z` holds the component's columns for one observation, in component order.
/// Implementations must be pure; they are called concurrently.
pub trait EstimatingEquation: Send + Sync + fmt::Debug {
    /// Short identifier used in diagnostics and configuration files.
    fn name(&self) -> &str;

    /// Number of dataset columns the equation reads.
    fn arity(&self) -> usize;

    /// Output dimension `r`.
    fn dim(&self) -> usize;

    /// Global parameter indices read by the equation (may repeat).
    fn parameter_map(&self) -> Vec<usize>;

    /// Writes `g(z, theta)` into `out` (length `dim()`).
    fn eval(&self, z: &[f64], theta: &[f64], n: usize, out: &mut [f64]);

    /// Adds the Jacobian `dg/dtheta` into `out`, an `r x p` row-major block
    /// with `p = theta.len()`. The caller zeroes `out`.
    fn jacobian(&self, z: &[f64], theta: &[f64], n: usize, out: &mut [f64]);

    /// Adds `weight * (dg/dtheta)^T t` into `grad` (length `p`).
    fn accumulate_jacobian_transpose(
        &self,
        z: &[f64],
        theta: &[f64],
        n: usize,
        t: &[f64],
        weight: f64,
        grad: &mut [f64],
    ) {
        let p = theta.len();
        let r = self.dim();
        let mut jac = vec![0.0; r * p];
        self.jacobian(z, theta, n, &mut jac);
        for (row, &tk) in jac.chunks_exact(p).zip(t) {
            for (gi, &d) in grad.iter_mut().zip(row) {
                *gi += weight * tk * d;
            }
        }
    }

    /// Moment interpretation of the parameters, used for default starting values.
    /// Equations without an obvious one return nothing.
    fn moment_roles(&self) -> Vec<MomentRole> {
        Vec::new()
    }

    /// Number of distinct parameters read (`p_j`).
    fn local_parameter_count(&self) -> usize {
        let mut map = self.parameter_map();
        map.sort_unstable();
        map.dedup();
        map.len()
    }
}

/// The built-in estimating equations.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EquationKind {
    /// `g = z - mu`.
    Mean { mu: usize },
    /// `g = [x - mu_x, y - mu_y]`; the two indices may coincide.
    CommonMeanPair { mu_x: usize, mu_y: usize },
    /// `g = [z - mu, (z - mu)^2 - ((n-1)/n) sigma2]`.
    MeanAndVariance { mu: usize, sigma2: usize },
    /// `g_i = z_i - mu_i` for each of the `m` columns.
    StackedMeans { means: Vec<usize> },
}

impl EquationKind {
    /// Configuration-file tag.
    pub fn tag(&self) -> &'static str {
        match self {
            EquationKind::Mean { .. } => "mean",
            EquationKind::CommonMeanPair { .. } => "common_mean_pair",
            EquationKind::MeanAndVariance { .. } => "mean_and_variance",
            EquationKind::StackedMeans { .. } => "stacked_means",
        }
    }

    /// Builds a kind from its configuration tag and parameter indices.
    pub fn from_tag(tag: &str, params: &[usize]) -> Result<Self> {
        let need = |k: usize| -> Result<()> {
            if params.len() != k {
                Err(CelError::config(format!(
                    "equation '{tag}' takes {k} parameters, got {}",
                    params.len()
                )))
            } else {
                Ok(())
            }
        };
        match tag {
            "mean" => {
                need(1)?;
                Ok(EquationKind::Mean { mu: params[0] })
            }
            "common_mean_pair" => {
                need(2)?;
                Ok(EquationKind::CommonMeanPair {
                    mu_x: params[0],
                    mu_y: params[1],
                })
            }
            "mean_and_variance" => {
                need(2)?;
                Ok(EquationKind::MeanAndVariance {
                    mu: params[0],
                    sigma2: params[1],
                })
            }
            "stacked_means" => {
                if params.is_empty() {
                    return Err(CelError::config("equation 'stacked_means' needs at least one parameter"));
                }
                Ok(EquationKind::StackedMeans {
                    means: params.to_vec(),
                })
            }
            other => Err(CelError::config(format!("unknown equation kind '{other}'"))),
        }
    }

    pub fn into_equation(self) -> Arc<dyn EstimatingEquation> {
        Arc::new(self)
    }
}

fn variance_factor(n: usize) -> f64 {
    (n as f64 - 1.0) / n as f64
}

impl EstimatingEquation for EquationKind {
    fn name(&self) -> &str {
        self.tag()
    }

    fn arity(&self) -> usize {
        match self {
            EquationKind::Mean { .. } | EquationKind::MeanAndVariance { .. } => 1,
            EquationKind::CommonMeanPair { .. } => 2,
            EquationKind::StackedMeans { means } => means.len(),
        }
    }

    fn dim(&self) -> usize {
        match self {
            EquationKind::Mean { .. } => 1,
            EquationKind::CommonMeanPair { .. } | EquationKind::MeanAndVariance { .. } => 2,
            EquationKind::StackedMeans { means } => means.len(),
        }
    }

    fn parameter_map(&self) -> Vec<usize> {
        match self {
            EquationKind::Mean { mu } => vec![*mu],
            EquationKind::CommonMeanPair { mu_x, mu_y } => vec![*mu_x, *mu_y],
            EquationKind::MeanAndVariance { mu, sigma2 } => vec![*mu, *sigma2],
            EquationKind::StackedMeans { means } => means.clone(),
        }
    }

    fn eval(&self, z: &[f64], theta: &[f64], n: usize, out: &mut [f64]) {
        match self {
            EquationKind::Mean { mu } => out[0] = z[0] - theta[*mu],
            EquationKind::CommonMeanPair { mu_x, mu_y } => {
                out[0] = z[0] - theta[*mu_x];
                out[1] = z[1] - theta[*mu_y];
            }
            EquationKind::MeanAndVariance { mu, sigma2 } => {
                let d = z[0] - theta[*mu];
                out[0] = d;
                out[1] = d * d - variance_factor(n) * theta[*sigma2];
            }
            EquationKind::StackedMeans { means } => {
                for ((o, &zi), &m) in out.iter_mut().zip(z).zip(means) {
                    *o = zi - theta[m];
                }
            }
        }
    }

    fn jacobian(&self, z: &[f64], theta: &[f64], n: usize, out: &mut [f64]) {
        let p = theta.len();
        match self {
            EquationKind::Mean { mu } => out[*mu] -= 1.0,
            EquationKind::CommonMeanPair { mu_x, mu_y } => {
                out[*mu_x] -= 1.0;
                out[p + *mu_y] -= 1.0;
            }
            EquationKind::MeanAndVariance { mu, sigma2 } => {
                let d = z[0] - theta[*mu];
                out[*mu] -= 1.0;
                out[p + *mu] -= 2.0 * d;
                out[p + *sigma2] -= variance_factor(n);
            }
            EquationKind::StackedMeans { means } => {
                for (i, &m) in means.iter().enumerate() {
                    out[i * p + m] -= 1.0;
                }
            }
        }
    }

    fn moment_roles(&self) -> Vec<MomentRole> {
        match self {
            EquationKind::Mean { mu } => vec![MomentRole::Mean { param: *mu, column: 0 }],
            EquationKind::CommonMeanPair { mu_x, mu_y } => vec![
                MomentRole::Mean { param: *mu_x, column: 0 },
                MomentRole::Mean { param: *mu_y, column: 1 },
            ],
            EquationKind::MeanAndVariance { mu, sigma2 } => vec![
                MomentRole::Mean { param: *mu, column: 0 },
                MomentRole::Variance { param: *sigma2, column: 0 },
            ],
            EquationKind::StackedMeans { means } => means
                .iter()
                .enumerate()
                .map(|(column, &param)| MomentRole::Mean { param, column })
                .collect(),
        }
    }

    fn accumulate_jacobian_transpose(
        &self,
        z: &[f64],
        theta: &[f64],
        n: usize,
        t: &[f64],
        weight: f64,
        grad: &mut [f64],
    ) {
        match self {
            EquationKind::Mean { mu } => grad[*mu] -= weight * t[0],
            EquationKind::CommonMeanPair { mu_x, mu_y } => {
                grad[*mu_x] -= weight * t[0];
                grad[*mu_y] -= weight * t[1];
            }
            EquationKind::MeanAndVariance { mu, sigma2 } => {
                let d = z[0] - theta[*mu];
                grad[*mu] -= weight * (t[0] + 2.0 * d * t[1]);
                grad[*sigma2] -= weight * variance_factor(n) * t[1];
            }
            EquationKind::StackedMeans { means } => {
                for (&m, &tk) in means.iter().zip(t) {
                    grad[m] -= weight * tk;
                }
            }
        }
    }
}

/// Several equations stacked into one component. Columns are consumed in
/// order: the first part reads the first `parts[0].arity()` component columns,
/// and so on.
#[derive(Clone, Debug)]
pub struct StackedEquations {
    parts: Vec<Arc<dyn EstimatingEquation>>,
}

impl StackedEquations {
    pub fn new(parts: Vec<Arc<dyn EstimatingEquation>>) -> Result<Self> {
        if parts.is_empty() {
            return Err(CelError::config("stacked equation needs at least one part"));
        }
        Ok(StackedEquations { parts })
    }
}

impl EstimatingEquation for StackedEquations {
    fn name(&self) -> &str {
        "stacked"
    }

    fn arity(&self) -> usize {
        self.parts.iter().map(|e| e.arity()).sum()
    }

    fn dim(&self) -> usize {
        self.parts.iter().map(|e| e.dim()).sum()
    }

    fn parameter_map(&self) -> Vec<usize> {
        self.parts.iter().flat_map(|e| e.parameter_map()).collect()
    }

    fn eval(&self, z: &[f64], theta: &[f64], n: usize, out: &mut [f64]) {
        let (mut zc, mut oc) = (0, 0);
        for part in &self.parts {
            let (a, r) = (part.arity(), part.dim());
            part.eval(&z[zc..zc + a], theta, n, &mut out[oc..oc + r]);
            zc += a;
            oc += r;
        }
    }

    fn jacobian(&self, z: &[f64], theta: &[f64], n: usize, out: &mut [f64]) {
        let p = theta.len();
        let (mut zc, mut oc) = (0, 0);
        for part in &self.parts {
            let (a, r) = (part.arity(), part.dim());
            part.jacobian(&z[zc..zc + a], theta, n, &mut out[oc * p..(oc + r) * p]);
            zc += a;
            oc += r;
        }
    }

    fn moment_roles(&self) -> Vec<MomentRole> {
        let mut out = Vec::new();
        let mut offset = 0;
        for part in &self.parts {
            out.extend(part.moment_roles().into_iter().map(|role| match role {
                MomentRole::Mean { param, column } => MomentRole::Mean {
                    param,
                    column: column + offset,
                },
                MomentRole::Variance { param, column } => MomentRole::Variance {
                    param,
                    column: column + offset,
                },
            }));
            offset += part.arity();
        }
        out
    }

    fn accumulate_jacobian_transpose(
        &self,
        z: &[f64],
        theta: &[f64],
        n: usize,
        t: &[f64],
        weight: f64,
        grad: &mut [f64],
    ) {
        let (mut zc, mut oc) = (0, 0);
        for part in &self.parts {
            let (a, r) = (part.arity(), part.dim());
            part.accumulate_jacobian_transpose(
                &z[zc..zc + a],
                theta,
                n,
                &t[oc..oc + r],
                weight,
                grad,
            );
            zc += a;
            oc += r;
        }
    }
}

/// One likelihood component: which columns it reads and the equation it imposes.
#[derive(Clone, Debug)]
pub struct ComponentSpec {
    pub label: String,
    pub columns: Vec<usize>,
    pub equation: Arc<dyn EstimatingEquation>,
}

impl ComponentSpec {
    pub fn new(
        label: impl Into<String>,
        columns: Vec<usize>,
        equation: Arc<dyn EstimatingEquation>,
    ) -> Self {
        ComponentSpec {
            label: label.into(),
            columns,
            equation,
        }
    }

    pub fn builtin(label: impl Into<String>, columns: Vec<usize>, kind: EquationKind) -> Self {
        Self::new(label, columns, Arc::new(kind))
    }

    pub fn dim(&self) -> usize {
        self.equation.dim()
    }

    fn gather(&self, row: &[f64], buf: &mut Vec<f64>) {
        buf.clear();
        buf.extend(self.columns.iter().map(|&c| row[c]));
    }
}

/// `g_j(z_i, theta)` for one dataset row.
pub fn eval_g(spec: &ComponentSpec, row: &[f64], theta: &[f64], n: usize) -> Result<Vec<f64>> {
    if row.iter().any(|v| !v.is_finite()) || theta.iter().any(|v| !v.is_finite()) {
        return Err(CelError::input(format!(
            "non-finite input to component '{}'",
            spec.label
        )));
    }
    let mut z = Vec::with_capacity(spec.columns.len());
    spec.gather(row, &mut z);
    let mut out = vec![0.0; spec.dim()];
    spec.equation.eval(&z, theta, n, &mut out);
    check_finite(spec, &out)?;
    Ok(out)
}

/// Analytic Jacobian `dg_j/dtheta` (`r_j x p`) in global coordinates.
pub fn eval_dg_dtheta(
    spec: &ComponentSpec,
    row: &[f64],
    theta: &[f64],
    n: usize,
) -> Result<DMatrix<f64>> {
    if row.iter().any(|v| !v.is_finite()) || theta.iter().any(|v| !v.is_finite()) {
        return Err(CelError::input(format!(
            "non-finite input to component '{}'",
            spec.label
        )));
    }
    let mut z = Vec::with_capacity(spec.columns.len());
    spec.gather(row, &mut z);
    let (r, p) = (spec.dim(), theta.len());
    let mut out = vec![0.0; r * p];
    spec.equation.jacobian(&z, theta, n, &mut out);
    check_finite(spec, &out)?;
    Ok(DMatrix::from_row_slice(r, p, &out))
}

fn check_finite(spec: &ComponentSpec, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CelError::Evaluation {
            component: spec.label.clone(),
            message: "estimating equation returned a non-finite value".into(),
        })
    }
}

/// Outcome of `validate_model`: rule violations never abort validation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ValidationReport {
    pub errors: Vec<String>,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Checks component specs against the dataset and parameter vector.
pub fn validate_model(dataset: &Dataset, specs: &[ComponentSpec], theta: &[f64]) -> ValidationReport {
    let mut report = ValidationReport::default();
    let p = theta.len();
    if specs.is_empty() {
        report.errors.push("model has no components".into());
    }
    if p == 0 {
        report.errors.push("model has no parameters".into());
    }
    if theta.iter().any(|v| !v.is_finite()) {
        report.errors.push("parameter vector contains non-finite values".into());
    }
    for spec in specs {
        let label = &spec.label;
        let eq = &spec.equation;
        if spec.columns.len() != eq.arity() {
            report.errors.push(format!(
                "component '{label}': equation '{}' reads {} columns, {} given",
                eq.name(),
                eq.arity(),
                spec.columns.len()
            ));
        }
        for &c in &spec.columns {
            if c >= dataset.k() {
                report.errors.push(format!(
                    "component '{label}': column index {c} out of range (k = {})",
                    dataset.k()
                ));
            }
        }
        let mut cols = spec.columns.clone();
        cols.sort_unstable();
        cols.dedup();
        if cols.len() != spec.columns.len() {
            report
                .errors
                .push(format!("component '{label}': repeated column index"));
        }
        for idx in eq.parameter_map() {
            if idx >= p {
                report.errors.push(format!(
                    "component '{label}': parameter index {idx} out of range (p = {p})"
                ));
            }
        }
        let (r, pj) = (eq.dim(), eq.local_parameter_count());
        if r < pj {
            report.errors.push(format!(
                "component '{label}': r_j = {r} < p_j = {pj}"
            ));
        }
        if dataset.n() < MIN_OBS_PER_PARAMETER * pj {
            report.warnings.push(format!(
                "component '{label}': n < 10·p_j ({} < {})",
                dataset.n(),
                MIN_OBS_PER_PARAMETER * pj
            ));
        }
    }
    report
}

/// A `n x r` matrix of estimating-equation values at fixed `theta`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentMatrix {
    n: usize,
    r: usize,
    values: Vec<f64>,
}

impl MomentMatrix {
    pub fn new(n: usize, r: usize, values: Vec<f64>) -> Result<Self> {
        if r == 0 || n == 0 || values.len() != n * r {
            return Err(CelError::input(format!(
                "moment matrix shape {n}x{r} does not match {} values",
                values.len()
            )));
        }
        Ok(MomentMatrix { n, r, values })
    }

    /// Single-column matrix.
    pub fn from_column(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(n, 1, values)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn r(&self) -> usize {
        self.r
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.r..(i + 1) * self.r]
    }

    pub fn rows(&self) -> std::slice::ChunksExact<'_, f64> {
        self.values.chunks_exact(self.r)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Column means.
    pub fn mean(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.r];
        for row in self.rows() {
            for (a, &b) in m.iter_mut().zip(row) {
                *a += b;
            }
        }
        m.iter_mut().for_each(|a| *a /= self.n as f64);
        m
    }
}

/// Evaluates one component's equation on every dataset row.
pub fn component_moments(
    spec: &ComponentSpec,
    dataset: &Dataset,
    theta: &[f64],
) -> Result<MomentMatrix> {
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(CelError::input("non-finite parameter value"));
    }
    if let Some(&bad) = spec.columns.iter().find(|&&c| c >= dataset.k()) {
        return Err(CelError::config(format!(
            "component '{}': column index {bad} out of range",
            spec.label
        )));
    }
    let (n, r) = (dataset.n(), spec.dim());
    let mut values = vec![0.0; n * r];
    let mut z = Vec::with_capacity(spec.columns.len());
    for (i, out) in values.chunks_exact_mut(r).enumerate() {
        spec.gather(dataset.row(i), &mut z);
        spec.equation.eval(&z, theta, n, out);
    }
    check_finite(spec, &values)?;
    MomentMatrix::new(n, r, values)
}

/// A validated composite model: one dataset, `J` components, `p` named parameters.
#[derive(Clone, Debug)]
pub struct CelModel {
    dataset: Arc<Dataset>,
    components: Vec<ComponentSpec>,
    parameter_names: Vec<String>,
    warnings: Vec<String>,
}

impl CelModel {
    /// Validates and assembles a model. Validation errors become a
    /// configuration error; warnings are kept on the model.
    pub fn new(
        dataset: Arc<Dataset>,
        components: Vec<ComponentSpec>,
        parameter_names: Vec<String>,
    ) -> Result<Self> {
        let theta = vec![0.0; parameter_names.len()];
        let report = validate_model(&dataset, &components, &theta);
        if !report.is_ok() {
            return Err(CelError::Config(report.errors.join("; ")));
        }
        Ok(CelModel {
            dataset,
            components,
            parameter_names,
            warnings: report.warnings,
        })
    }

    pub fn dataset(&self) -> &Dataset {
        &self.dataset
    }

    pub fn components(&self) -> &[ComponentSpec] {
        &self.components
    }

    pub fn parameter_names(&self) -> &[String] {
        &self.parameter_names
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn n(&self) -> usize {
        self.dataset.n()
    }

    pub fn p(&self) -> usize {
        self.parameter_names.len()
    }

    pub fn j(&self) -> usize {
        self.components.len()
    }

    /// Total moment dimension `sum_j r_j`.
    pub fn total_dim(&self) -> usize {
        self.components.iter().map(|c| c.dim()).sum()
    }

    pub fn parameters(&self, values: Vec<f64>) -> Result<ParameterVector> {
        ParameterVector::new(self.parameter_names.clone(), values)
    }

    pub fn parameter_index(&self, name: &str) -> Option<usize> {
        self.parameter_names.iter().position(|n| n == name)
    }

    /// Same components and parameters on a different dataset with the same columns.
    pub fn with_dataset(&self, dataset: Arc<Dataset>) -> Result<Self> {
        Self::new(dataset, self.components.clone(), self.parameter_names.clone())
    }

    /// Evaluates component `j` on every row.
    pub fn moment_matrix(&self, j: usize, theta: &[f64]) -> Result<MomentMatrix> {
        if theta.len() != self.p() {
            return Err(CelError::input(format!(
                "theta has {} entries, model has {} parameters",
                theta.len(),
                self.p()
            )));
        }
        component_moments(&self.components[j], &self.dataset, theta)
    }

    /// Mean Jacobian `D_j = (1/n) sum_i dg_j/dtheta` (`r_j x p`).
    pub fn mean_jacobian(&self, j: usize, theta: &[f64]) -> Result<DMatrix<f64>> {
        let spec = &self.components[j];
        let (n, r, p) = (self.n(), spec.dim(), self.p());
        let mut acc = vec![0.0; r * p];
        let mut z = Vec::with_capacity(spec.columns.len());
        for i in 0..n {
            spec.gather(self.dataset.row(i), &mut z);
            spec.equation.jacobian(&z, theta, n, &mut acc);
        }
        check_finite(spec, &acc)?;
        let mut d = DMatrix::from_row_slice(r, p, &acc);
        d /= n as f64;
        Ok(d)
    }

    /// `sum_i w_i (dg_j/dtheta)^T t` over the rows of component `j`.
    pub(crate) fn weighted_jacobian_transpose(
        &self,
        j: usize,
        theta: &[f64],
        t: &[f64],
        weights: &[f64],
        grad: &mut [f64],
    ) {
        let spec = &self.components[j];
        let n = self.n();
        let mut z = Vec::with_capacity(spec.columns.len());
        for (i, &w) in weights.iter().enumerate() {
            spec.gather(self.dataset.row(i), &mut z);
            spec.equation
                .accumulate_jacobian_transpose(&z, theta, n, t, w, grad);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: EquationKind, columns: Vec<usize>) -> ComponentSpec {
        ComponentSpec::builtin("c", columns, kind)
    }

    #[test]
    fn mean_equation_values() {
        let s = spec(EquationKind::Mean { mu: 0 }, vec![0]);
        assert_eq!(eval_g(&s, &[3.0], &[1.0], 5).unwrap(), vec![2.0]);
        let d = eval_dg_dtheta(&s, &[3.0], &[1.0], 5).unwrap();
        assert_eq!(d.as_slice(), &[-1.0]);
    }

    #[test]
    fn common_mean_pair_shared_index() {
        let s = spec(EquationKind::CommonMeanPair { mu_x: 0, mu_y: 0 }, vec![0, 1]);
        assert_eq!(eval_g(&s, &[2.0, 4.0], &[1.0], 5).unwrap(), vec![1.0, 3.0]);
        let d = eval_dg_dtheta(&s, &[2.0, 4.0], &[1.0], 5).unwrap();
        assert_eq!(d.shape(), (2, 1));
        assert_eq!(d[(0, 0)], -1.0);
        assert_eq!(d[(1, 0)], -1.0);
    }

    #[test]
    fn mean_and_variance_values() {
        let s = spec(EquationKind::MeanAndVariance { mu: 0, sigma2: 1 }, vec![0]);
        let g = eval_g(&s, &[2.0], &[1.0, 1.0], 4).unwrap();
        assert_eq!(g, vec![1.0, 0.25]);
        let d = eval_dg_dtheta(&s, &[2.0], &[1.0, 1.0], 4).unwrap();
        assert_eq!(d[(0, 0)], -1.0);
        assert_eq!(d[(0, 1)], 0.0);
        assert_eq!(d[(1, 0)], -2.0);
        assert_eq!(d[(1, 1)], -0.75);
    }

    #[test]
    fn stacked_means_and_unread_parameters() {
        let s = spec(EquationKind::StackedMeans { means: vec![2, 0] }, vec![1, 0]);
        let g = eval_g(&s, &[10.0, 20.0], &[1.0, 5.0, 2.0], 3).unwrap();
        assert_eq!(g, vec![18.0, 9.0]);
        let d = eval_dg_dtheta(&s, &[10.0, 20.0], &[1.0, 5.0, 2.0], 3).unwrap();
        assert_eq!(d.row(0).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, -1.0]);
        assert_eq!(d.row(1).iter().copied().collect::<Vec<_>>(), vec![-1.0, 0.0, 0.0]);
    }

    #[test]
    fn pair_equals_two_stacked_means() {
        let pair = spec(EquationKind::CommonMeanPair { mu_x: 0, mu_y: 0 }, vec![0, 1]);
        let a = spec(EquationKind::Mean { mu: 0 }, vec![0]);
        let b = spec(EquationKind::Mean { mu: 0 }, vec![1]);
        let row = [0.3, -1.7];
        let theta = [0.9];
        let mut stacked = eval_g(&a, &row, &theta, 7).unwrap();
        stacked.extend(eval_g(&b, &row, &theta, 7).unwrap());
        assert_eq!(eval_g(&pair, &row, &theta, 7).unwrap(), stacked);
    }

    #[test]
    fn non_finite_output_is_an_evaluation_error() {
        #[derive(Debug)]
        struct Bad;
        impl EstimatingEquation for Bad {
            fn name(&self) -> &str {
                "bad"
            }
            fn arity(&self) -> usize {
                1
            }
            fn dim(&self) -> usize {
                1
            }
            fn parameter_map(&self) -> Vec<usize> {
                vec![0]
            }
            fn eval(&self, z: &[f64], theta: &[f64], _n: usize, out: &mut [f64]) {
                out[0] = (z[0] - theta[0]).ln();
            }
            fn jacobian(&self, _z: &[f64], _t: &[f64], _n: usize, out: &mut [f64]) {
                out[0] = 1.0;
            }
        }
        let s = ComponentSpec::new("bad", vec![0], Arc::new(Bad));
        let err = eval_g(&s, &[0.0], &[1.0], 3).unwrap_err();
        assert!(matches!(err, CelError::Evaluation { .. }));
    }

    #[test]
    fn unknown_tag_is_config_error() {
        assert!(matches!(
            EquationKind::from_tag("median", &[0]),
            Err(CelError::Config(_))
        ));
    }

    #[test]
    fn validation_rules() {
        let ds = Dataset::with_default_names(1, (0..100).map(|i| i as f64).collect()).unwrap();
        let ok = [spec(EquationKind::Mean { mu: 0 }, vec![0])];
        let report = validate_model(&ds, &ok, &[0.0]);
        assert!(report.is_ok());
        assert!(report.warnings.is_empty());

        let small = Dataset::with_default_names(1, (0..15).map(|i| i as f64).collect()).unwrap();
        let mv = [spec(EquationKind::MeanAndVariance { mu: 0, sigma2: 1 }, vec![0])];
        let report = validate_model(&small, &mv, &[0.0, 1.0]);
        assert!(report.is_ok());
        assert_eq!(report.warnings.len(), 1);
        assert!(report.warnings[0].contains("n < 10·p_j"));

        let bad_col = [spec(EquationKind::Mean { mu: 0 }, vec![1])];
        let report = validate_model(&ds, &bad_col, &[0.0]);
        assert!(report.errors.iter().any(|e| e.contains("column index 1 out of range")));

        let bad_param = [spec(EquationKind::Mean { mu: 3 }, vec![0])];
        let report = validate_model(&ds, &bad_param, &[0.0]);
        assert!(report.errors.iter().any(|e| e.contains("parameter index 3")));
    }

    #[test]
    fn r_less_than_p_is_rejected() {
        #[derive(Debug)]
        struct TwoParamsOneEq;
        impl EstimatingEquation for TwoParamsOneEq {
            fn name(&self) -> &str {
                "sum"
            }
            fn arity(&self) -> usize {
                1
            }
            fn dim(&self) -> usize {
                1
            }
            fn parameter_map(&self) -> Vec<usize> {
                vec![0, 1]
            }
            fn eval(&self, z: &[f64], t: &[f64], _n: usize, out: &mut [f64]) {
                out[0] = z[0] - t[0] - t[1];
            }
            fn jacobian(&self, _z: &[f64], _t: &[f64], _n: usize, out: &mut [f64]) {
                out[0] -= 1.0;
                out[1] -= 1.0;
            }
        }
        let ds = Dataset::with_default_names(1, (0..50).map(f64::from).collect()).unwrap();
        let s = [ComponentSpec::new("s", vec![0], Arc::new(TwoParamsOneEq))];
        let report = validate_model(&ds, &s, &[0.0, 0.0]);
        assert!(report.errors.iter().any(|e| e.contains("r_j = 1 < p_j = 2")));
    }

    #[test]
    fn dataset_rejects_nan() {
        let err = Dataset::with_default_names(2, vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, CelError::Input(_)));
    }

    #[test]
    fn partition_complement() {
        let part = ParameterPartition::new(vec![4], 5).unwrap();
        assert_eq!(part.nuisance(), &[0, 1, 2, 3]);
        assert_eq!(part.assemble(&[9.0], &[1.0, 2.0, 3.0, 4.0]), vec![1.0, 2.0, 3.0, 4.0, 9.0]);
        assert!(ParameterPartition::new(vec![], 3).is_err());
        assert!(ParameterPartition::new(vec![0, 0], 3).is_err());
    }
}
