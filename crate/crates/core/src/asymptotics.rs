//! Plug-in estimators for the limiting laws of the CEL estimator and of the
//! likelihood-ratio statistic.
//!
//! With `D_j = (1/n) sum_i dg_j/dtheta` (`r_j x p`) and
//! `Gamma_jk = (1/n) sum_i g_j g_k'`:
//!
//! * `W = sum_j D_j' Gamma_jj^-1 D_j`
//! * `V = sum_jk D_j' Gamma_jj^-1 Gamma_jk Gamma_kk^-1 D_k`
//! * `cov(theta_hat) ~ W^-1 V W^-1 / n`
//! * `A_jk = Gamma_jj^-1 (D_j W^-1 D_k' - D_j^nu W_nu^-1 D_k^nu') Gamma_kk^-1`
//!
//! The statistic is asymptotically `sum_i lambda_i chi2_1` where `lambda` are the
//! nonzero eigenvalues of `A Gamma`.

use nalgebra::{DMatrix, SymmetricEigen};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{CelError, Result};
use crate::linalg::{psd_sqrt, spd_inverse, symmetrize};
use crate::model::{CelModel, ParameterPartition};
use crate::simgen::NormalSampler;

/// Eigenvalues at or below this fraction of the largest are treated as zero.
pub const EIGEN_THRESHOLD: f64 = 1e-8;
/// Draws used by the Monte Carlo weighted chi-square law.
pub const MC_DRAWS: usize = 200_000;
const MC_SEED: u64 = 0x00c3_1a5e_ed00_2024;

/// A symmetric matrix partitioned into `J x J` blocks of sizes `r_1..r_J`.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockMatrix {
    dims: Vec<usize>,
    offsets: Vec<usize>,
    matrix: DMatrix<f64>,
}

impl BlockMatrix {
    fn new(dims: Vec<usize>, matrix: DMatrix<f64>) -> Self {
        let mut offsets = Vec::with_capacity(dims.len());
        let mut acc = 0;
        for &d in &dims {
            offsets.push(acc);
            acc += d;
        }
        debug_assert_eq!(matrix.nrows(), acc);
        BlockMatrix {
            dims,
            offsets,
            matrix,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn block(&self, j: usize, k: usize) -> DMatrix<f64> {
        self.matrix
            .view((self.offsets[j], self.offsets[k]), (self.dims[j], self.dims[k]))
            .into_owned()
    }

    pub fn full(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    /// Copy with all off-diagonal blocks set to zero.
    pub fn block_diagonal(&self) -> BlockMatrix {
        let mut m = DMatrix::zeros(self.matrix.nrows(), self.matrix.ncols());
        for j in 0..self.dims.len() {
            let (o, d) = (self.offsets[j], self.dims[j]);
            m.view_mut((o, o), (d, d)).copy_from(&self.block(j, j));
        }
        BlockMatrix::new(self.dims.clone(), m)
    }
}

/// `Gamma_hat` evaluated at `theta`.
pub fn estimate_gamma(model: &CelModel, theta: &[f64]) -> Result<BlockMatrix> {
    let moments = (0..model.j())
        .map(|j| model.moment_matrix(j, theta))
        .collect::<Result<Vec<_>>>()?;
    let dims: Vec<usize> = moments.iter().map(|m| m.r()).collect();
    let total: usize = dims.iter().sum();
    let n = model.n();
    let mut gamma = DMatrix::zeros(total, total);
    let mut row = vec![0.0; total];
    for i in 0..n {
        let mut o = 0;
        for m in &moments {
            row[o..o + m.r()].copy_from_slice(m.row(i));
            o += m.r();
        }
        for a in 0..total {
            let ra = row[a];
            for b in 0..=a {
                gamma[(a, b)] += ra * row[b];
            }
        }
    }
    for a in 0..total {
        for b in 0..a {
            gamma[(b, a)] = gamma[(a, b)];
        }
    }
    gamma /= n as f64;
    Ok(BlockMatrix::new(dims, gamma))
}

/// `D_j` for every component.
pub fn mean_jacobians(model: &CelModel, theta: &[f64]) -> Result<Vec<DMatrix<f64>>> {
    (0..model.j()).map(|j| model.mean_jacobian(j, theta)).collect()
}

fn select_columns(d: &DMatrix<f64>, columns: &[usize]) -> DMatrix<f64> {
    d.select_columns(columns)
}

/// Shared ingredients: `Gamma`, the inverted diagonal blocks and `D_j`.
struct Pieces {
    gamma: BlockMatrix,
    gamma_inv: Vec<DMatrix<f64>>,
    d: Vec<DMatrix<f64>>,
}

impl Pieces {
    fn new(model: &CelModel, theta: &[f64]) -> Result<Self> {
        let gamma = estimate_gamma(model, theta)?;
        Self::from_gamma(model, theta, gamma)
    }

    fn from_gamma(model: &CelModel, theta: &[f64], gamma: BlockMatrix) -> Result<Self> {
        let gamma_inv = (0..model.j())
            .map(|j| {
                let label = &model.components()[j].label;
                spd_inverse(&gamma.block(j, j), &format!("Gamma_jj of component '{label}'"))
            })
            .collect::<Result<Vec<_>>>()?;
        let d = mean_jacobians(model, theta)?;
        Ok(Pieces {
            gamma,
            gamma_inv,
            d,
        })
    }

    fn w(&self, columns: &[usize]) -> DMatrix<f64> {
        let m = columns.len();
        let mut w = DMatrix::zeros(m, m);
        for (d, gi) in self.d.iter().zip(&self.gamma_inv) {
            let dc = select_columns(d, columns);
            w += dc.transpose() * gi * &dc;
        }
        symmetrize(&mut w);
        w
    }

    fn v(&self) -> DMatrix<f64> {
        let p = self.d.first().map_or(0, |d| d.ncols());
        let left: Vec<DMatrix<f64>> = self
            .d
            .iter()
            .zip(&self.gamma_inv)
            .map(|(d, gi)| d.transpose() * gi)
            .collect();
        let mut v = DMatrix::zeros(p, p);
        let j = self.d.len();
        for a in 0..j {
            for b in 0..j {
                v += &left[a] * self.gamma.block(a, b) * left[b].transpose();
            }
        }
        symmetrize(&mut v);
        v
    }
}

/// `W_hat` over the given parameter columns (all of `theta` for `W_theta`,
/// the nuisance indices for `W_nu`).
pub fn estimate_w(model: &CelModel, theta: &[f64], columns: &[usize]) -> Result<DMatrix<f64>> {
    Ok(Pieces::new(model, theta)?.w(columns))
}

pub fn estimate_w_theta(model: &CelModel, theta: &[f64]) -> Result<DMatrix<f64>> {
    let all: Vec<usize> = (0..model.p()).collect();
    estimate_w(model, theta, &all)
}

pub fn estimate_v(model: &CelModel, theta: &[f64]) -> Result<DMatrix<f64>> {
    Ok(Pieces::new(model, theta)?.v())
}

fn sandwich_from(w: &DMatrix<f64>, v: &DMatrix<f64>, n: usize) -> Result<DMatrix<f64>> {
    let w_inv = spd_inverse(w, "W_theta")?;
    let mut s = &w_inv * v * &w_inv / n as f64;
    symmetrize(&mut s);
    Ok(s)
}

/// `W^-1 V W^-1 / n` at `theta`.
pub fn sandwich_covariance(model: &CelModel, theta: &[f64]) -> Result<DMatrix<f64>> {
    let pieces = Pieces::new(model, theta)?;
    let all: Vec<usize> = (0..model.p()).collect();
    sandwich_from(&pieces.w(&all), &pieces.v(), model.n())
}

fn a_from(pieces: &Pieces, partition: &ParameterPartition) -> Result<BlockMatrix> {
    let all: Vec<usize> = (0..partition.p()).collect();
    let w_inv = spd_inverse(&pieces.w(&all), "W_theta")?;
    let nuisance = partition.nuisance();
    let wnu_inv = if nuisance.is_empty() {
        None
    } else {
        Some(spd_inverse(&pieces.w(nuisance), "W_nu")?)
    };
    let dims = pieces.gamma.dims().to_vec();
    let total: usize = dims.iter().sum();
    let mut a = DMatrix::zeros(total, total);
    let (mut oj, j_count) = (0, dims.len());
    for j in 0..j_count {
        let mut ok = 0;
        for k in 0..j_count {
            let mut inner = &pieces.d[j] * &w_inv * pieces.d[k].transpose();
            if let Some(wn) = &wnu_inv {
                let dj = select_columns(&pieces.d[j], nuisance);
                let dk = select_columns(&pieces.d[k], nuisance);
                inner -= &dj * wn * dk.transpose();
            }
            let block = &pieces.gamma_inv[j] * inner * &pieces.gamma_inv[k];
            a.view_mut((oj, ok), (dims[j], dims[k])).copy_from(&block);
            ok += dims[k];
        }
        oj += dims[j];
    }
    symmetrize(&mut a);
    Ok(BlockMatrix::new(dims, a))
}

/// `A_hat` at `theta` for the given interest/nuisance split.
pub fn estimate_a(model: &CelModel, theta: &[f64], partition: &ParameterPartition) -> Result<BlockMatrix> {
    a_from(&Pieces::new(model, theta)?, partition)
}

/// Nonzero eigenvalues of `A Gamma`, computed on `Gamma^1/2 A Gamma^1/2`,
/// sorted in descending order.
pub fn eigen_weights(a: &DMatrix<f64>, gamma: &DMatrix<f64>) -> Result<Vec<f64>> {
    if a.shape() != gamma.shape() || !a.is_square() {
        return Err(CelError::input("A and Gamma must be square and of equal size"));
    }
    let root = psd_sqrt(gamma);
    let mut m = &root * a * &root;
    symmetrize(&mut m);
    if m.iter().any(|v| !v.is_finite()) {
        return Err(CelError::Numeric("non-finite entries in Gamma^1/2 A Gamma^1/2".into()));
    }
    let eig = SymmetricEigen::try_new(m, f64::EPSILON, 10_000)
        .ok_or_else(|| CelError::Numeric("eigendecomposition did not converge".into()))?;
    let mut values: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    values.sort_by(|x, y| y.total_cmp(x));
    let max = values.first().copied().unwrap_or(0.0);
    if !(max > 0.0) {
        return Ok(Vec::new());
    }
    Ok(values.into_iter().filter(|&v| v > EIGEN_THRESHOLD * max).collect())
}

/// `(tr(A Gamma), tr((A Gamma)^2))`.
pub fn trace_moments(a: &DMatrix<f64>, gamma: &DMatrix<f64>) -> (f64, f64) {
    let ag = a * gamma;
    let t1 = ag.trace();
    let t2 = (&ag * &ag).trace();
    (t1, t2)
}

/// Welch scale and degrees of freedom `(a, b)` matching the first two moments
/// of the weighted chi-square law.
pub fn welch_params(a: &DMatrix<f64>, gamma: &DMatrix<f64>) -> Result<(f64, f64)> {
    let (t1, t2) = trace_moments(a, gamma);
    welch_from_traces(t1, t2)
}

pub fn welch_from_traces(t1: f64, t2: f64) -> Result<(f64, f64)> {
    if !(t1 > 0.0) || !(t2 > 0.0) || !t1.is_finite() || !t2.is_finite() {
        return Err(CelError::Degenerate(format!(
            "tr(A Gamma) = {t1}, tr((A Gamma)^2) = {t2}"
        )));
    }
    Ok((t2 / t1, t1 * t1 / t2))
}

/// Welch parameters from a spectrum.
pub fn welch_from_eigenvalues(lambdas: &[f64]) -> Result<(f64, f64)> {
    let t1: f64 = lambdas.iter().sum();
    let t2: f64 = lambdas.iter().map(|l| l * l).sum();
    welch_from_traces(t1, t2)
}

fn check_lambdas(lambdas: &[f64]) -> Result<()> {
    if lambdas.is_empty() {
        return Err(CelError::Degenerate("no positive eigenvalues".into()));
    }
    if lambdas.iter().any(|&l| !(l > 0.0) || !l.is_finite()) {
        return Err(CelError::Degenerate("weights must be positive and finite".into()));
    }
    Ok(())
}

/// The law of `sum_i lambda_i X_i` with `X_i` iid chi-square(1).
#[derive(Clone, Debug)]
pub enum WeightedChiSq {
    /// `lambda * chi2_1`, handled exactly.
    Scaled(f64),
    /// Sorted Monte Carlo draws from a fixed private stream.
    Sampled(Vec<f64>),
}

impl WeightedChiSq {
    pub fn new(lambdas: &[f64]) -> Result<Self> {
        check_lambdas(lambdas)?;
        if lambdas.len() == 1 {
            return Ok(WeightedChiSq::Scaled(lambdas[0]));
        }
        let mut sampler = NormalSampler::new(MC_SEED);
        let mut draws: Vec<f64> = (0..MC_DRAWS)
            .map(|_| {
                lambdas
                    .iter()
                    .map(|&l| {
                        let z = sampler.standard_normal();
                        l * z * z
                    })
                    .sum()
            })
            .collect();
        draws.sort_by(f64::total_cmp);
        Ok(WeightedChiSq::Sampled(draws))
    }

    /// `P(Q > t)`.
    pub fn tail(&self, t: f64) -> f64 {
        match self {
            WeightedChiSq::Scaled(l) => chisq_tail(1.0, t / l),
            WeightedChiSq::Sampled(draws) => {
                let above = draws.len() - draws.partition_point(|&d| d <= t);
                above as f64 / draws.len() as f64
            }
        }
    }

    /// Smallest `c` with `P(Q <= c) >= prob`.
    pub fn quantile(&self, prob: f64) -> f64 {
        match self {
            WeightedChiSq::Scaled(l) => l * chisq_quantile(1.0, prob),
            WeightedChiSq::Sampled(draws) => {
                let n = draws.len();
                let idx = ((prob * n as f64).ceil() as usize).clamp(1, n) - 1;
                draws[idx]
            }
        }
    }
}

/// `P(sum lambda_i chi2_1 > t)`.
pub fn weighted_chisq_tail(lambdas: &[f64], t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(CelError::input("tail point must be nonnegative"));
    }
    Ok(WeightedChiSq::new(lambdas)?.tail(t))
}

pub fn weighted_chisq_quantile(lambdas: &[f64], prob: f64) -> Result<f64> {
    if !(prob > 0.0 && prob < 1.0) {
        return Err(CelError::input("probability must lie in (0, 1)"));
    }
    Ok(WeightedChiSq::new(lambdas)?.quantile(prob))
}

/// Upper tail of chi-square with `dof` degrees of freedom.
pub fn chisq_tail(dof: f64, t: f64) -> f64 {
    if t <= 0.0 {
        return 1.0;
    }
    ChiSquared::new(dof).expect("positive dof").sf(t)
}

pub fn chisq_quantile(dof: f64, prob: f64) -> f64 {
    ChiSquared::new(dof).expect("positive dof").inverse_cdf(prob)
}

/// Everything the tests and intervals need at one `theta_tilde`.
#[derive(Clone, Debug)]
pub struct AsymptoticEstimates {
    pub gamma_hat: BlockMatrix,
    pub a_hat: BlockMatrix,
    pub w_theta_hat: DMatrix<f64>,
    pub w_nu_hat: DMatrix<f64>,
    pub v_hat: DMatrix<f64>,
    pub sandwich: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    pub eigen_threshold: f64,
    pub welch_a: f64,
    pub welch_b: f64,
    pub theta_tilde: Vec<f64>,
}

pub fn estimate_all(
    model: &CelModel,
    theta_tilde: &[f64],
    partition: &ParameterPartition,
) -> Result<AsymptoticEstimates> {
    if partition.p() != model.p() {
        return Err(CelError::config("partition does not match the model's parameter count"));
    }
    let pieces = Pieces::new(model, theta_tilde)?;
    let all: Vec<usize> = (0..model.p()).collect();
    let w_theta = pieces.w(&all);
    let w_nu = pieces.w(partition.nuisance());
    let v = pieces.v();
    let sandwich = sandwich_from(&w_theta, &v, model.n())?;
    let a = a_from(&pieces, partition)?;
    let eigenvalues = eigen_weights(a.full(), pieces.gamma.full())?;
    let (welch_a, welch_b) = welch_params(a.full(), pieces.gamma.full())?;
    Ok(AsymptoticEstimates {
        gamma_hat: pieces.gamma,
        a_hat: a,
        w_theta_hat: w_theta,
        w_nu_hat: w_nu,
        v_hat: v,
        sandwich,
        eigenvalues,
        eigen_threshold: EIGEN_THRESHOLD,
        welch_a,
        welch_b,
        theta_tilde: theta_tilde.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ComponentSpec, Dataset, EquationKind};
    use std::sync::Arc;

    fn single_mean(values: Vec<f64>) -> CelModel {
        let ds = Arc::new(Dataset::with_default_names(1, values).unwrap());
        CelModel::new(
            ds,
            vec![ComponentSpec::builtin("x", vec![0], EquationKind::Mean { mu: 0 })],
            vec!["mu".into()],
        )
        .unwrap()
    }

    #[test]
    fn gamma_single_mean() {
        let model = single_mean(vec![1.0, 2.0, 3.0]);
        let g = estimate_gamma(&model, &[2.0]).unwrap();
        assert!((g.full()[(0, 0)] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn single_mean_a_gamma_has_unit_eigenvalue() {
        let model = single_mean(vec![0.4, 1.0, 2.5, -0.3, 1.7]);
        let part = ParameterPartition::full(1);
        let est = estimate_all(&model, &[1.0], &part).unwrap();
        assert_eq!(est.eigenvalues.len(), 1);
        assert!((est.eigenvalues[0] - 1.0).abs() < 1e-12);
        assert!((est.welch_a - 1.0).abs() < 1e-12);
        assert!((est.welch_b - 1.0).abs() < 1e-12);
        assert!((&est.v_hat - &est.w_theta_hat).abs().max() < 1e-15);
    }

    #[test]
    fn single_mean_sandwich_is_m2_over_n() {
        let data = vec![0.4, 1.0, 2.5, -0.3, 1.7, 0.9];
        let n = data.len() as f64;
        let mean = data.iter().sum::<f64>() / n;
        let m2 = data.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let model = single_mean(data);
        let s = sandwich_covariance(&model, &[mean]).unwrap();
        assert!((s[(0, 0)] - m2 / n).abs() < 1e-14);
    }

    #[test]
    fn welch_from_spectra() {
        let (a, b) = welch_from_eigenvalues(&[2.0, 1.0]).unwrap();
        assert!((a - 5.0 / 3.0).abs() < 1e-15);
        assert!((b - 9.0 / 5.0).abs() < 1e-15);
        let (a, b) = welch_from_eigenvalues(&[1.5]).unwrap();
        assert_eq!((a, b), (1.5, 1.0));
        assert!(matches!(welch_from_traces(0.0, 1.0), Err(CelError::Degenerate(_))));
    }

    #[test]
    fn eigen_threshold_drops_zero() {
        let a = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![2.0, 1.0, 0.0]));
        let g = DMatrix::identity(3, 3);
        let l = eigen_weights(&a, &g).unwrap();
        assert_eq!(l.len(), 2);
        assert!((l[0] - 2.0).abs() < 1e-14 && (l[1] - 1.0).abs() < 1e-14);
        let one = eigen_weights(&DMatrix::identity(1, 1), &DMatrix::identity(1, 1)).unwrap();
        assert_eq!(one, vec![1.0]);
    }

    #[test]
    fn single_weight_tail_is_exact() {
        let p = weighted_chisq_tail(&[1.0], 3.841_458_820_694_124).unwrap();
        assert!((p - 0.05).abs() < 1e-10);
        let rho = 0.4;
        let t = 2.7;
        let scaled = weighted_chisq_tail(&[1.0 + rho], t).unwrap();
        assert!((scaled - chisq_tail(1.0, t / (1.0 + rho))).abs() < 1e-15);
        assert!(weighted_chisq_tail(&[], 1.0).is_err());
    }

    #[test]
    fn mc_quantile_and_tail_are_consistent() {
        let law = WeightedChiSq::new(&[2.0, 1.0]).unwrap();
        let q = law.quantile(0.95);
        assert!((law.tail(q) - 0.05).abs() < 1e-4);
        // equal weights reduce to chi-square(2)
        let two = WeightedChiSq::new(&[1.0, 1.0]).unwrap();
        assert!((two.tail(4.0) - (-2.0f64).exp()).abs() < 0.004);
    }

    #[test]
    fn estimators_are_deterministic() {
        let ds = Arc::new(
            Dataset::with_default_names(2, vec![0.1, 0.4, 1.2, 0.9, -0.5, 0.2, 2.0, 1.1, 0.7, 0.3])
                .unwrap(),
        );
        let model = CelModel::new(
            ds,
            vec![
                ComponentSpec::builtin("x", vec![0], EquationKind::Mean { mu: 0 }),
                ComponentSpec::builtin("y", vec![1], EquationKind::Mean { mu: 0 }),
            ],
            vec!["mu".into()],
        )
        .unwrap();
        let part = ParameterPartition::full(1);
        let a = estimate_all(&model, &[0.6], &part).unwrap();
        let b = estimate_all(&model, &[0.6], &part).unwrap();
        assert_eq!(a.a_hat, b.a_hat);
        assert_eq!(a.sandwich, b.sandwich);
        assert_eq!(a.eigenvalues, b.eigenvalues);
    }
}
