//! Seeded generators for the simulation designs.
//!
//! Random bits come from ChaCha8 seeded through `SeedableRng::seed_from_u64`.
//! Uniforms use the top 53 bits of each word; normals use the Box-Muller
//! transform, consuming both outputs of each pair. Replicate `r` of a cell
//! draws from its own stream seeded with [`replicate_seed`], so the data of a
//! replicate never depends on scheduling.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::function::erf::erfc;

use crate::error::{CelError, Result};
use crate::model::Dataset;

/// SplitMix64 finaliser.
pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for replicate `r` under base seed `base`.
pub fn replicate_seed(base: u64, r: u64) -> u64 {
    splitmix64(splitmix64(base) ^ splitmix64(r.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

/// Uniform and standard-normal draws from one ChaCha8 stream.
#[derive(Clone, Debug)]
pub struct NormalSampler {
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

impl NormalSampler {
    pub fn new(seed: u64) -> Self {
        NormalSampler {
            rng: ChaCha8Rng::seed_from_u64(seed),
            spare: None,
        }
    }

    /// Uniform on `[0, 1)` with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        let radius = (-2.0 * u1.ln()).sqrt();
        let angle = 2.0 * PI * u2;
        self.spare = Some(radius * angle.sin());
        radius * angle.cos()
    }

    /// A pair of standard normals with correlation `r`.
    fn correlated_pair(&mut self, r: f64) -> (f64, f64) {
        let z1 = self.standard_normal();
        let z2 = self.standard_normal();
        (z1, r * z1 + (1.0 - r * r).sqrt() * z2)
    }
}

/// The data-generating designs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Distribution {
    BivNormal,
    BivChisq,
    BivUniform,
    Ar1Normal4,
}

impl Distribution {
    /// Short name used in file names and on the command line.
    pub fn name(self) -> &'static str {
        match self {
            Distribution::BivNormal => "normal",
            Distribution::BivChisq => "chisq",
            Distribution::BivUniform => "uniform",
            Distribution::Ar1Normal4 => "ar1",
        }
    }

    pub fn dimension(self) -> usize {
        match self {
            Distribution::Ar1Normal4 => 4,
            _ => 2,
        }
    }

    pub fn mean(self) -> Vec<f64> {
        match self {
            Distribution::Ar1Normal4 => AR1_MEAN.to_vec(),
            _ => vec![1.0, 1.0],
        }
    }

    /// One-line description of how the design is generated.
    pub fn construction(self) -> &'static str {
        match self {
            Distribution::BivNormal => {
                "x = 1 + sqrt(2) z1, y = 1 + sqrt(2) (rho z1 + sqrt(1 - rho^2) z2), z iid N(0,1) by Box-Muller"
            }
            Distribution::BivChisq => {
                "x = z1^2, y = z2^2 with corr(z1, z2) = sqrt(rho); chi-square(1) margins, corr(x, y) = rho"
            }
            Distribution::BivUniform => {
                "Gaussian copula with r = 2 sin(pi rho / 6), margins Phi(z) mapped to [1 - sqrt(6), 1 + sqrt(6)]"
            }
            Distribution::Ar1Normal4 => {
                "4-variate normal, mean (-3, 1, 2, 0), cov rho^|i-j|, lower Cholesky factor"
            }
        }
    }
}

impl fmt::Display for Distribution {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl serde::Serialize for Distribution {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl FromStr for Distribution {
    type Err = CelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" | "biv_normal" => Ok(Distribution::BivNormal),
            "chisq" | "chi_square" | "biv_chisq" => Ok(Distribution::BivChisq),
            "uniform" | "biv_uniform" => Ok(Distribution::BivUniform),
            "ar1" | "ar1_normal4" => Ok(Distribution::Ar1Normal4),
            other => Err(CelError::config(format!("unknown distribution '{other}'"))),
        }
    }
}

const AR1_MEAN: [f64; 4] = [-3.0, 1.0, 2.0, 0.0];

/// One simulated sample.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimDesign {
    pub distribution: Distribution,
    pub n: usize,
    pub rho: f64,
    pub seed: u64,
}

impl SimDesign {
    pub fn new(distribution: Distribution, n: usize, rho: f64, seed: u64) -> Self {
        SimDesign {
            distribution,
            n,
            rho,
            seed,
        }
    }

    fn check(&self) -> Result<()> {
        if self.n == 0 {
            return Err(CelError::config("sample size must be positive"));
        }
        if !(self.rho.abs() < 1.0) {
            return Err(CelError::config(format!("rho = {} outside (-1, 1)", self.rho)));
        }
        if self.distribution == Distribution::BivChisq && self.rho < 0.0 {
            return Err(CelError::config(
                "the chi-square construction cannot produce negative correlation",
            ));
        }
        Ok(())
    }
}

fn bivariate(design: &SimDesign, expected: Distribution) -> Result<()> {
    design.check()?;
    if design.distribution != expected {
        return Err(CelError::config(format!(
            "design is '{}', expected '{}'",
            design.distribution, expected
        )));
    }
    Ok(())
}

fn dataset(k: usize, values: Vec<f64>) -> Result<Dataset> {
    Dataset::with_default_names(k, values)
}

pub fn gen_biv_normal(design: &SimDesign) -> Result<Dataset> {
    bivariate(design, Distribution::BivNormal)?;
    let mut s = NormalSampler::new(design.seed);
    let sd = 2f64.sqrt();
    let mut values = Vec::with_capacity(2 * design.n);
    for _ in 0..design.n {
        let (a, b) = s.correlated_pair(design.rho);
        values.push(1.0 + sd * a);
        values.push(1.0 + sd * b);
    }
    dataset(2, values)
}

pub fn gen_biv_chisq(design: &SimDesign) -> Result<Dataset> {
    bivariate(design, Distribution::BivChisq)?;
    let mut s = NormalSampler::new(design.seed);
    let r = design.rho.sqrt();
    let mut values = Vec::with_capacity(2 * design.n);
    for _ in 0..design.n {
        let (a, b) = s.correlated_pair(r);
        values.push(a * a);
        values.push(b * b);
    }
    dataset(2, values)
}

fn std_normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z / std::f64::consts::SQRT_2)
}

pub fn gen_biv_uniform(design: &SimDesign) -> Result<Dataset> {
    bivariate(design, Distribution::BivUniform)?;
    let mut s = NormalSampler::new(design.seed);
    let r = 2.0 * (PI * design.rho / 6.0).sin();
    let half = 6f64.sqrt();
    let (lo, width) = (1.0 - half, 2.0 * half);
    let mut values = Vec::with_capacity(2 * design.n);
    for _ in 0..design.n {
        let (a, b) = s.correlated_pair(r);
        values.push(lo + width * std_normal_cdf(a));
        values.push(lo + width * std_normal_cdf(b));
    }
    dataset(2, values)
}

/// Lower Cholesky factor of the AR(1) correlation matrix `rho^|i-j|`.
fn ar1_cholesky(rho: f64) -> [[f64; 4]; 4] {
    let mut sigma = [[0.0; 4]; 4];
    for (i, row) in sigma.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v = rho.powi((i as i32 - j as i32).abs());
        }
    }
    let mut l = [[0.0; 4]; 4];
    for i in 0..4 {
        for j in 0..=i {
            let mut s = sigma[i][j];
            s -= (0..j).map(|k| l[i][k] * l[j][k]).sum::<f64>();
            l[i][j] = if i == j { s.sqrt() } else { s / l[j][j] };
        }
    }
    l
}

pub fn gen_ar1_normal4(design: &SimDesign) -> Result<Dataset> {
    design.check()?;
    if design.distribution != Distribution::Ar1Normal4 {
        return Err(CelError::config("design is not the 4-variate AR(1) normal"));
    }
    let l = ar1_cholesky(design.rho);
    let mut s = NormalSampler::new(design.seed);
    let mut values = Vec::with_capacity(4 * design.n);
    let mut z = [0.0; 4];
    for _ in 0..design.n {
        for v in z.iter_mut() {
            *v = s.standard_normal();
        }
        for i in 0..4 {
            let x: f64 = (0..=i).map(|k| l[i][k] * z[k]).sum();
            values.push(AR1_MEAN[i] + x);
        }
    }
    dataset(4, values)
}

/// Dispatches on the design's distribution.
pub fn generate(design: &SimDesign) -> Result<Dataset> {
    match design.distribution {
        Distribution::BivNormal => gen_biv_normal(design),
        Distribution::BivChisq => gen_biv_chisq(design),
        Distribution::BivUniform => gen_biv_uniform(design),
        Distribution::Ar1Normal4 => gen_ar1_normal4(design),
    }
}

/// Asymptotic variance `(1 + rho) / n` of the common-mean estimator.
pub fn theoretical_variance(n: usize, rho: f64) -> f64 {
    (1.0 + rho) / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(ds: &Dataset, a: usize, b: usize) -> (f64, f64, f64) {
        let x = ds.column(a);
        let y = ds.column(b);
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let vx = x.iter().map(|v| (v - mx).powi(2)).sum::<f64>() / n;
        let vy = y.iter().map(|v| (v - my).powi(2)).sum::<f64>() / n;
        let c = x.iter().zip(&y).map(|(u, v)| (u - mx) * (v - my)).sum::<f64>() / n;
        (mx, vx, c / (vx * vy).sqrt())
    }

    #[test]
    fn same_seed_same_data() {
        let d = SimDesign::new(Distribution::BivNormal, 50, 0.3, 11);
        assert_eq!(generate(&d).unwrap(), generate(&d).unwrap());
        let other = SimDesign { seed: 12, ..d };
        assert_ne!(generate(&d).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn normal_moments() {
        let ds = generate(&SimDesign::new(Distribution::BivNormal, 100_000, 0.9, 1)).unwrap();
        let (m, v, r) = moments(&ds, 0, 1);
        assert!((m - 1.0).abs() < 0.02);
        assert!((v - 2.0).abs() < 0.05);
        assert!((r - 0.9).abs() < 0.01);
        let ds = generate(&SimDesign::new(Distribution::BivNormal, 100_000, 0.0, 2)).unwrap();
        assert!(moments(&ds, 0, 1).2.abs() < 0.01);
    }

    #[test]
    fn chisq_moments_and_range() {
        let ds = generate(&SimDesign::new(Distribution::BivChisq, 100_000, 0.0, 3)).unwrap();
        let (m, v, _) = moments(&ds, 0, 1);
        assert!((m - 1.0).abs() < 0.02);
        assert!((v - 2.0).abs() < 0.1);
        let ds = generate(&SimDesign::new(Distribution::BivChisq, 100_000, 0.9, 4)).unwrap();
        assert!((moments(&ds, 0, 1).2 - 0.9).abs() < 0.01);
        assert!(generate(&SimDesign::new(Distribution::BivChisq, 10, -0.1, 4)).is_err());
    }

    #[test]
    fn uniform_range_and_variance() {
        let ds = generate(&SimDesign::new(Distribution::BivUniform, 50_000, 0.0, 5)).unwrap();
        let half = 6f64.sqrt();
        assert!(ds.values().iter().all(|&v| v >= 1.0 - half && v <= 1.0 + half));
        let (m, v, _) = moments(&ds, 0, 1);
        assert!((m - 1.0).abs() < 0.03);
        assert!((v - 2.0).abs() < 0.05);
    }

    #[test]
    fn ar1_means_and_lag_two() {
        let ds = generate(&SimDesign::new(Distribution::Ar1Normal4, 100_000, 0.5, 6)).unwrap();
        for (j, &mu) in AR1_MEAN.iter().enumerate() {
            let c = ds.column(j);
            assert!((c.iter().sum::<f64>() / c.len() as f64 - mu).abs() < 0.02);
        }
        assert!((moments(&ds, 0, 2).2 - 0.25).abs() < 0.01);
        assert!((moments(&ds, 0, 1).2 - 0.5).abs() < 0.01);
    }

    #[test]
    fn theoretical_variance_values() {
        assert_eq!(theoretical_variance(10, 0.0), 0.1);
        assert!((theoretical_variance(50, 0.5) - 0.03).abs() < 1e-15);
        assert!((theoretical_variance(100, 0.9) - 0.019).abs() < 1e-15);
    }

    #[test]
    fn replicate_seeds_differ() {
        let a: Vec<u64> = (0..100).map(|r| replicate_seed(7, r)).collect();
        let mut b = a.clone();
        b.sort_unstable();
        b.dedup();
        assert_eq!(b.len(), 100);
    }

    #[test]
    fn uniforms_in_unit_interval() {
        let mut s = NormalSampler::new(0);
        for _ in 0..10_000 {
            let u = s.uniform();
            assert!((0.0..1.0).contains(&u));
        }
    }
}
