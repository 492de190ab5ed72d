use std::sync::Arc;

use rayon::prelude::*;

use super::{aggregate, cell_seed, Outcome, StudyConfig, StudyRow};
use crate::asymptotics::chisq_tail;
use crate::composite::{default_init, fit, CelFit};
use crate::error::{CelError, Result};
use crate::inference::{
    confidence_interval_given, lr_test_profile_given, lr_test_simple_given, simple_statistic,
    TestOptions,
};
use crate::model::{CelModel, ComponentSpec, Dataset, EquationKind, ParameterPartition, StackedEquations};
use crate::simgen::{generate, replicate_seed, Distribution, SimDesign};

/// Two `Mean` components, one per column, sharing `mu`.
pub fn common_mean_model(data: Arc<Dataset>) -> Result<CelModel> {
    CelModel::new(
        data,
        vec![
            ComponentSpec::builtin("x", vec![0], EquationKind::Mean { mu: 0 }),
            ComponentSpec::builtin("y", vec![1], EquationKind::Mean { mu: 0 }),
        ],
        vec!["mu".into()],
    )
}

/// One `Mean` component on the `2n` values of both columns stacked.
pub fn stacked_model(data: &Dataset) -> Result<CelModel> {
    let mut values = data.column(0);
    values.extend(data.column(1));
    let stacked = Arc::new(Dataset::from_row_major(vec!["z".into()], values)?);
    CelModel::new(
        stacked,
        vec![ComponentSpec::builtin("z", vec![0], EquationKind::Mean { mu: 0 })],
        vec!["mu".into()],
    )
}

/// One bivariate component imposing both means equal to `mu`.
pub fn joint_model(data: Arc<Dataset>) -> Result<CelModel> {
    CelModel::new(
        data,
        vec![ComponentSpec::builtin(
            "xy",
            vec![0, 1],
            EquationKind::CommonMeanPair { mu_x: 0, mu_y: 0 },
        )],
        vec!["mu".into()],
    )
}

/// Composite (four components) and joint (one stacked component) models for
/// a common variance across four columns with separate means. Parameters are
/// `mu1..mu4, sigma2`.
pub fn variance_models(data: Arc<Dataset>) -> Result<(CelModel, CelModel)> {
    let names: Vec<String> = (1..=4)
        .map(|j| format!("mu{j}"))
        .chain(std::iter::once("sigma2".to_string()))
        .collect();
    let kinds: Vec<EquationKind> = (0..4)
        .map(|j| EquationKind::MeanAndVariance { mu: j, sigma2: 4 })
        .collect();
    let composite = CelModel::new(
        data.clone(),
        kinds
            .iter()
            .enumerate()
            .map(|(j, k)| ComponentSpec::builtin(format!("z{}", j + 1), vec![j], k.clone()))
            .collect(),
        names.clone(),
    )?;
    let stacked = StackedEquations::new(kinds.into_iter().map(|k| k.into_equation()).collect())?;
    let joint = CelModel::new(
        data,
        vec![ComponentSpec::new("z1..z4", vec![0, 1, 2, 3], Arc::new(stacked))],
        names,
    )?;
    Ok((composite, joint))
}

/// A usable fit, or `None` when the optimiser failed.
fn fitted(model: &CelModel) -> Option<CelFit> {
    fit(model, &default_init(model)).ok().filter(|f| f.converged)
}

fn designs(config: &StudyConfig) -> Vec<(Distribution, f64, usize)> {
    let mut out = Vec::new();
    for &d in &config.distributions {
        for &rho in &config.rhos {
            for &n in &config.ns {
                out.push((d, rho, n));
            }
        }
    }
    out
}

type CellKey = (Distribution, f64, usize);
/// Outcomes of one cell, one vector per method.
type CellOutcomes = Vec<Vec<Option<Outcome>>>;

/// Runs `per_replicate` for every replicate of every cell on the study's pool.
/// Returns, per cell, one outcome vector per method.
fn run_cells<F>(config: &StudyConfig, methods: usize, per_replicate: F) -> Result<Vec<(CellKey, CellOutcomes)>>
where
    F: Fn(&SimDesign) -> Result<Vec<Option<Outcome>>> + Sync,
{
    config.validate()?;
    let pool = config.pool()?;
    let mut cells = Vec::new();
    for (dist, rho, n) in designs(config) {
        let base = cell_seed(config.seed, dist, rho, n);
        let results: Vec<Result<Vec<Option<Outcome>>>> = pool.install(|| {
            (0..config.replicates as u64)
                .into_par_iter()
                .map(|r| per_replicate(&SimDesign::new(dist, n, rho, replicate_seed(base, r))))
                .collect()
        });
        let mut by_method = vec![Vec::with_capacity(config.replicates); methods];
        for res in results {
            let outcomes = res?;
            debug_assert_eq!(outcomes.len(), methods);
            for (m, o) in outcomes.into_iter().enumerate() {
                by_method[m].push(o);
            }
        }
        cells.push(((dist, rho, n), by_method));
    }
    Ok(cells)
}

/// Common mean of two margins, tested with the exact `(1 + rho) chi2_1` law
/// at the true correlation.
pub fn run_coverage_study(config: &StudyConfig) -> Result<Vec<StudyRow>> {
    let cells = run_cells(config, 1, |design| {
        let data = Arc::new(generate(design)?);
        let model = common_mean_model(data)?;
        let Some(f) = fitted(&model) else {
            return Ok(vec![None]);
        };
        let Ok((t, hull)) = simple_statistic(&model, &f, &[1.0]) else {
            return Ok(vec![None]);
        };
        let p = if hull { 0.0 } else { chisq_tail(1.0, t / (1.0 + design.rho)) };
        Ok(vec![Some(Outcome {
            estimate: f.theta_hat.values()[0],
            rejects: config.alpha_levels.iter().map(|&a| p < a).collect(),
            ci: None,
        })])
    })?;
    Ok(cells
        .into_iter()
        .map(|((d, rho, n), m)| aggregate(config, d, rho, n, "L_CE", 1.0, &m[0]))
        .collect())
}

/// Test of `truth` and an interval for parameter `index`, both with the
/// study's method. `None` if any step fails.
fn assess(model: &CelModel, index: usize, truth: f64, config: &StudyConfig) -> Option<Outcome> {
    let f = fitted(model)?;
    let options = TestOptions::with_method(config.method);
    let test = if model.p() == 1 {
        lr_test_simple_given(model, &f, &[truth], &options)
    } else {
        let part = ParameterPartition::new(vec![index], model.p()).ok()?;
        lr_test_profile_given(model, &f, &part, &[truth], &options)
    }
    .ok()?;
    let ci = confidence_interval_given(model, &f, index, config.ci_level, &options).ok()?;
    Some(Outcome {
        estimate: f.theta_hat.values()[index],
        rejects: config.alpha_levels.iter().map(|&a| test.p_value < a).collect(),
        ci: Some((ci.lower, ci.upper)),
    })
}

pub const COMPARISON_METHODS: [&str; 3] = ["L_CE", "L_E1", "L_E2"];

/// Composite, pooled and joint empirical likelihood for the common mean.
pub fn run_comparison_study(config: &StudyConfig) -> Result<Vec<StudyRow>> {
    let cells = run_cells(config, 3, |design| {
        let data = Arc::new(generate(design)?);
        let models = [
            common_mean_model(data.clone())?,
            stacked_model(&data)?,
            joint_model(data)?,
        ];
        Ok(models.iter().map(|m| assess(m, 0, 1.0, config)).collect())
    })?;
    let mut rows = Vec::new();
    for ((d, rho, n), by_method) in cells {
        for (label, outcomes) in COMPARISON_METHODS.iter().zip(&by_method) {
            rows.push(aggregate(config, d, rho, n, label, 1.0, outcomes));
        }
    }
    Ok(rows)
}

pub const VARIANCE_METHODS: [&str; 2] = ["L_CE", "L_E"];

/// Common variance of the four AR(1) margins, means profiled out.
pub fn run_variance_study(config: &StudyConfig) -> Result<Vec<StudyRow>> {
    if config.distributions.iter().any(|&d| d != Distribution::Ar1Normal4) {
        return Err(CelError::config("the variance study uses the ar1 design"));
    }
    let cells = run_cells(config, 2, |design| {
        let data = Arc::new(generate(design)?);
        let (composite, joint) = variance_models(data)?;
        Ok(vec![
            assess(&composite, 4, 1.0, config),
            assess(&joint, 4, 1.0, config),
        ])
    })?;
    let mut rows = Vec::new();
    for ((d, rho, n), by_method) in cells {
        for (label, outcomes) in VARIANCE_METHODS.iter().zip(&by_method) {
            rows.push(aggregate(config, d, rho, n, label, 1.0, outcomes));
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::StudyKind;

    fn tiny(study: StudyKind) -> StudyConfig {
        StudyConfig {
            rhos: vec![0.5],
            ns: vec![30],
            replicates: 6,
            ..StudyConfig::new(study, 42)
        }
    }

    #[test]
    fn stacked_model_has_twice_the_rows() {
        let ds = Dataset::with_default_names(2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let m = stacked_model(&ds).unwrap();
        assert_eq!(m.n(), 4);
        assert_eq!(m.dataset().column(0), vec![1.0, 3.0, 2.0, 4.0]);
    }

    #[test]
    fn variance_models_share_sigma2() {
        let ds = generate(&SimDesign::new(Distribution::Ar1Normal4, 40, 0.3, 1)).unwrap();
        let (c, j) = variance_models(Arc::new(ds)).unwrap();
        assert_eq!((c.j(), c.p(), c.total_dim()), (4, 5, 8));
        assert_eq!((j.j(), j.p(), j.total_dim()), (1, 5, 8));
    }

    #[test]
    fn coverage_rows_are_reproducible() {
        let cfg = StudyConfig {
            distributions: vec![Distribution::BivNormal],
            ..tiny(StudyKind::Coverage)
        };
        let a = run_coverage_study(&cfg).unwrap();
        let b = run_coverage_study(&StudyConfig { threads: 3, ..cfg }).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 1);
        assert_eq!(a[0].replicates + a[0].failures, 6);
    }

    #[test]
    fn comparison_has_three_methods_per_cell() {
        let cfg = StudyConfig {
            distributions: vec![Distribution::BivUniform],
            ..tiny(StudyKind::Comparison)
        };
        let rows = run_comparison_study(&cfg).unwrap();
        let labels: Vec<&str> = rows.iter().map(|r| r.method.as_str()).collect();
        assert_eq!(labels, COMPARISON_METHODS);
        assert!(rows.iter().all(|r| r.avg_ci_length.is_some()));
    }
}
