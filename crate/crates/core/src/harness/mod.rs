//! Monte Carlo studies over grids of simulation designs.
//!
//! Each `(distribution, rho, n)` cell gets its own base seed and every
//! replicate its own stream, so a cell's rows do not depend on the worker
//! count or on which other cells are run. Replicates are collected in index
//! order before aggregation.

mod io;
mod manifest;
mod studies;
mod timing;

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

use crate::error::{CelError, Result};
use crate::inference::Method;
use crate::simgen::{splitmix64, Distribution};

pub use io::{read_dataset, write_dataset, write_table, write_timing_summary};
pub use manifest::Manifest;
pub use studies::{
    common_mean_model, run_comparison_study, run_coverage_study, run_variance_study,
    stacked_model, variance_models,
};
pub use timing::{run_timing_bench, split_model, summarize_timings, TimingRecord, TimingSummary};

/// A cell is flagged when more than this share of replicates failed.
pub const MAX_FAILURE_SHARE: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyKind {
    /// Common mean of a bivariate sample, known-correlation reference law.
    Coverage,
    /// Composite versus pooled and joint EL for the common mean.
    Comparison,
    /// Common variance of four AR(1) margins with unequal means.
    Variance,
    /// Wall-clock cost of the split-sample fit.
    Timing,
}

impl StudyKind {
    pub fn name(self) -> &'static str {
        match self {
            StudyKind::Coverage => "coverage",
            StudyKind::Comparison => "comparison",
            StudyKind::Variance => "variance",
            StudyKind::Timing => "timing",
        }
    }
}

impl fmt::Display for StudyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StudyKind {
    type Err = CelError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coverage" => Ok(StudyKind::Coverage),
            "comparison" | "means" => Ok(StudyKind::Comparison),
            "variance" => Ok(StudyKind::Variance),
            "timing" => Ok(StudyKind::Timing),
            other => Err(CelError::config(format!("unknown study '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudyConfig {
    pub study: StudyKind,
    pub distributions: Vec<Distribution>,
    pub rhos: Vec<f64>,
    pub ns: Vec<usize>,
    pub replicates: usize,
    pub alpha_levels: Vec<f64>,
    /// Coverage of the intervals reported by the comparison and variance studies.
    pub ci_level: f64,
    /// Reference law for the comparison and variance studies.
    pub method: Method,
    pub seed: u64,
    pub threads: usize,
}

impl StudyConfig {
    /// Defaults for `study`: 500 replicates, the study's usual levels and method.
    pub fn new(study: StudyKind, seed: u64) -> Self {
        let (distributions, alpha_levels) = match study {
            StudyKind::Coverage => (
                vec![Distribution::BivNormal, Distribution::BivChisq, Distribution::BivUniform],
                vec![0.10, 0.05, 0.01],
            ),
            StudyKind::Comparison => (
                vec![Distribution::BivNormal, Distribution::BivChisq, Distribution::BivUniform],
                vec![0.05],
            ),
            StudyKind::Variance | StudyKind::Timing => (vec![Distribution::Ar1Normal4], vec![0.05]),
        };
        StudyConfig {
            study,
            distributions,
            rhos: vec![0.0, 0.5, 0.9],
            ns: vec![10, 25, 50, 100],
            replicates: 500,
            alpha_levels,
            ci_level: 0.95,
            method: Method::Welch,
            seed,
            threads: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(CelError::config("replicates must be at least 1"));
        }
        if self.threads == 0 {
            return Err(CelError::config("threads must be at least 1"));
        }
        if self.alpha_levels.iter().any(|&a| !(a > 0.0 && a < 1.0)) {
            return Err(CelError::config("alpha levels must lie in (0, 1)"));
        }
        if !(self.ci_level > 0.0 && self.ci_level < 1.0) {
            return Err(CelError::config("ci level must lie in (0, 1)"));
        }
        if self.distributions.is_empty() || self.rhos.is_empty() || self.ns.is_empty() {
            return Err(CelError::config("design grid is empty"));
        }
        if let Some(&n) = self.ns.iter().find(|&&n| n < 2) {
            return Err(CelError::config(format!("sample size {n} is too small")));
        }
        if self.study == StudyKind::Variance
            && self.distributions.iter().any(|&d| d != Distribution::Ar1Normal4)
        {
            return Err(CelError::config("the variance study uses the ar1 design"));
        }
        if matches!(self.study, StudyKind::Coverage | StudyKind::Comparison)
            && self.distributions.contains(&Distribution::Ar1Normal4)
        {
            return Err(CelError::config("this study uses bivariate designs"));
        }
        Ok(())
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new()
            .num_threads(self.threads)
            .build()
            .map_err(|e| CelError::Numeric(format!("cannot start worker pool: {e}")))
    }
}

/// Base seed of one design cell.
pub fn cell_seed(base: u64, distribution: Distribution, rho: f64, n: usize) -> u64 {
    let tag = match distribution {
        Distribution::BivNormal => 1,
        Distribution::BivChisq => 2,
        Distribution::BivUniform => 3,
        Distribution::Ar1Normal4 => 4,
    };
    let mut h = splitmix64(base);
    for word in [tag, rho.to_bits(), n as u64] {
        h = splitmix64(h ^ word);
    }
    h
}

/// Aggregated results for one method in one design cell.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StudyRow {
    pub study: StudyKind,
    pub distribution: Distribution,
    pub rho: f64,
    pub n: usize,
    pub method: String,
    /// Replicates that produced a result.
    pub replicates: usize,
    pub failures: usize,
    /// More than [`MAX_FAILURE_SHARE`] of replicates failed.
    pub flagged: bool,
    pub obs_mean: f64,
    pub obs_variance: f64,
    pub alpha_levels: Vec<f64>,
    pub rejection: Vec<f64>,
    pub avg_ci_length: Option<f64>,
    /// Share of intervals lying entirely above the true value.
    pub miss_low: Option<f64>,
    /// Share of intervals lying entirely below the true value.
    pub miss_high: Option<f64>,
}

impl StudyRow {
    pub fn rejection_at(&self, alpha: f64) -> Option<f64> {
        self.alpha_levels
            .iter()
            .position(|&a| a == alpha)
            .map(|i| self.rejection[i])
    }
}

/// One replicate's result for one method.
#[derive(Clone, Debug)]
pub(crate) struct Outcome {
    pub estimate: f64,
    pub rejects: Vec<bool>,
    pub ci: Option<(f64, f64)>,
}

/// Builds a row from per-replicate outcomes (`None` marks a failure).
pub(crate) fn aggregate(
    config: &StudyConfig,
    distribution: Distribution,
    rho: f64,
    n: usize,
    method: &str,
    truth: f64,
    outcomes: &[Option<Outcome>],
) -> StudyRow {
    let ok: Vec<&Outcome> = outcomes.iter().flatten().collect();
    let failures = outcomes.len() - ok.len();
    let m = ok.len() as f64;
    let mean = ok.iter().map(|o| o.estimate).sum::<f64>() / m;
    let variance = if ok.len() > 1 {
        ok.iter().map(|o| (o.estimate - mean).powi(2)).sum::<f64>() / (m - 1.0)
    } else {
        f64::NAN
    };
    let rejection = (0..config.alpha_levels.len())
        .map(|a| ok.iter().filter(|o| o.rejects[a]).count() as f64 / m)
        .collect();
    let cis: Vec<(f64, f64)> = ok.iter().filter_map(|o| o.ci).collect();
    let share = |f: &dyn Fn(&(f64, f64)) -> bool| cis.iter().filter(|c| f(c)).count() as f64 / cis.len() as f64;
    let (avg, low, high) = if cis.is_empty() {
        (None, None, None)
    } else {
        (
            Some(cis.iter().map(|(l, u)| u - l).sum::<f64>() / cis.len() as f64),
            Some(share(&|c| c.0 > truth)),
            Some(share(&|c| c.1 < truth)),
        )
    };
    StudyRow {
        study: config.study,
        distribution,
        rho,
        n,
        method: method.to_string(),
        replicates: ok.len(),
        failures,
        flagged: failures as f64 > MAX_FAILURE_SHARE * outcomes.len() as f64,
        obs_mean: mean,
        obs_variance: variance,
        alpha_levels: config.alpha_levels.clone(),
        rejection,
        avg_ci_length: avg,
        miss_low: low,
        miss_high: high,
    }
}

/// Runs a non-timing study and dispatches on its kind.
pub fn run_study(config: &StudyConfig) -> Result<Vec<StudyRow>> {
    match config.study {
        StudyKind::Coverage => run_coverage_study(config),
        StudyKind::Comparison => run_comparison_study(config),
        StudyKind::Variance => run_variance_study(config),
        StudyKind::Timing => Err(CelError::config("use run_timing_bench for the timing study")),
    }
}

/// Runs a study and writes `<study>_<distribution>.csv` plus a manifest per
/// distribution into `dir`. Returns the written paths.
pub fn run_and_write(config: &StudyConfig, dir: &std::path::Path) -> Result<Vec<std::path::PathBuf>> {
    let rows = run_study(config)?;
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for &dist in &config.distributions {
        let subset: Vec<StudyRow> = rows.iter().filter(|r| r.distribution == dist).cloned().collect();
        let stem = format!("{}_{}", config.study, dist);
        let table = dir.join(format!("{stem}.csv"));
        write_table(&subset, &table)?;
        let manifest = Manifest::for_study(config, dist, &table);
        let mpath = dir.join(format!("{stem}.manifest.json"));
        manifest.write(&mpath)?;
        written.push(table);
        written.push(mpath);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cell_seeds_separate_cells() {
        let a = cell_seed(1, Distribution::BivNormal, 0.5, 100);
        assert_ne!(a, cell_seed(1, Distribution::BivChisq, 0.5, 100));
        assert_ne!(a, cell_seed(1, Distribution::BivNormal, 0.9, 100));
        assert_ne!(a, cell_seed(1, Distribution::BivNormal, 0.5, 50));
        assert_ne!(a, cell_seed(2, Distribution::BivNormal, 0.5, 100));
        assert_eq!(a, cell_seed(1, Distribution::BivNormal, 0.5, 100));
    }

    #[test]
    fn aggregate_counts_failures_and_misses() {
        let cfg = StudyConfig {
            alpha_levels: vec![0.05],
            ..StudyConfig::new(StudyKind::Comparison, 0)
        };
        let ok = |e: f64, r: bool, ci: (f64, f64)| {
            Some(Outcome {
                estimate: e,
                rejects: vec![r],
                ci: Some(ci),
            })
        };
        let outcomes = vec![
            ok(0.9, false, (0.5, 1.3)),
            ok(1.1, true, (1.05, 1.2)),
            None,
            ok(1.0, false, (0.7, 0.95)),
        ];
        let row = aggregate(&cfg, Distribution::BivNormal, 0.0, 10, "L_CE", 1.0, &outcomes);
        assert_eq!(row.replicates, 3);
        assert_eq!(row.failures, 1);
        assert!(row.flagged);
        assert!((row.obs_mean - 1.0).abs() < 1e-15);
        assert!((row.obs_variance - 0.01).abs() < 1e-12);
        assert!((row.rejection[0] - 1.0 / 3.0).abs() < 1e-15);
        assert!((row.miss_low.unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((row.miss_high.unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((row.avg_ci_length.unwrap() - (0.8 + 0.15 + 0.25) / 3.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut cfg = StudyConfig::new(StudyKind::Coverage, 1);
        assert!(cfg.validate().is_ok());
        cfg.replicates = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = StudyConfig::new(StudyKind::Variance, 1);
        cfg.distributions = vec![Distribution::BivNormal];
        assert!(cfg.validate().is_err());
    }
}
