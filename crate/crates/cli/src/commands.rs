use std::sync::Arc;

use cel::asymptotics::sandwich_covariance;
use cel::composite::{fit_with, CelFit, FitOptions};
use cel::config::{BuiltModel, ModelConfig};
use cel::harness::read_dataset;
use cel::inference::{
    confidence_interval_given, lr_test_profile_given, lr_test_simple_given, Method, TestOptions,
};
use cel::model::{CelModel, ParameterPartition};
use cel::CelError;
use serde_json::{json, Value};

use crate::{Calibration, CiArgs, Failure, Inputs, Outcome, TestArgs};

fn load(inputs: &Inputs) -> Result<BuiltModel, Failure> {
    let data = Arc::new(read_dataset(&inputs.data)?);
    let text = std::fs::read_to_string(&inputs.model).map_err(CelError::from)?;
    Ok(ModelConfig::from_json(&text)?.build(data)?)
}

fn fit_options(inputs: &Inputs, threads: usize) -> FitOptions {
    FitOptions {
        max_iterations: inputs.max_iter,
        parallel: threads > 1,
        ..FitOptions::default()
    }
}

fn options_for(calibration: &Calibration, fit: FitOptions) -> Result<TestOptions, Failure> {
    if calibration.method == Method::ChiSquare && !calibration.assume_independent {
        return Err(Failure::usage(
            "--method chisq requires --assume-independent",
        ));
    }
    Ok(TestOptions {
        method: calibration.method,
        assume_independent: calibration.assume_independent,
        strict_nuisance: calibration.strict_nuisance,
        fit,
    })
}

fn fit_json(model: &CelModel, fit: &CelFit) -> Value {
    let components: Vec<Value> = model
        .components()
        .iter()
        .zip(&fit.components)
        .map(|(spec, s)| {
            json!({
                "label": spec.label,
                "log_ratio": s.log_ratio,
                "multiplier": s.t,
                "residual_norm": s.residual_norm,
                "hull_violation": s.hull_violation,
                "converged": s.converged,
                "iterations": s.iterations,
            })
        })
        .collect();
    json!({
        "command": "fit",
        "parameters": model.parameter_names(),
        "theta_hat": fit.theta_hat.values(),
        "objective": fit.objective,
        "grad_norm": fit.grad_norm,
        "converged": fit.converged,
        "iterations": fit.iterations,
        "n": model.n(),
        "components": components,
        "sandwich_covariance": Value::Null,
        "standard_errors": Value::Null,
        "warnings": fit.warnings,
    })
}

fn run_fit(built: &BuiltModel, options: &FitOptions) -> Result<(CelFit, Value), Failure> {
    let fit = fit_with(&built.model, &built.init, options)?;
    let out = fit_json(&built.model, &fit);
    if !fit.converged {
        return Err(Failure::numerical("the optimiser did not converge", out));
    }
    Ok((fit, out))
}

pub fn fit(inputs: &Inputs, threads: usize) -> Outcome {
    let built = load(inputs)?;
    let (fit, mut out) = run_fit(&built, &fit_options(inputs, threads))?;
    match sandwich_covariance(&built.model, fit.theta_hat.values()) {
        Ok(cov) => {
            let p = cov.nrows();
            let rows: Vec<Vec<f64>> = (0..p).map(|i| (0..p).map(|j| cov[(i, j)]).collect()).collect();
            let se: Vec<f64> = (0..p).map(|i| cov[(i, i)].max(0.0).sqrt()).collect();
            out["sandwich_covariance"] = json!(rows);
            out["standard_errors"] = json!(se);
            Ok(out)
        }
        Err(e) if e.is_numerical() => Err(Failure::numerical(e.to_string(), out)),
        Err(e) => Err(e.into()),
    }
}

/// Parses `name=value,...` into pairs, in the order given.
fn parse_null(text: &str) -> Result<Vec<(String, f64)>, Failure> {
    let mut pairs: Vec<(String, f64)> = Vec::new();
    for item in text.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (name, value) = item
            .split_once('=')
            .ok_or_else(|| Failure::usage(format!("--null entry '{item}' is not name=value")))?;
        let name = name.trim().to_string();
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| Failure::usage(format!("--null value for '{name}' is not a number")))?;
        if pairs.iter().any(|(n, _)| *n == name) {
            return Err(Failure::usage(format!("--null names '{name}' twice")));
        }
        pairs.push((name, value));
    }
    if pairs.is_empty() {
        return Err(Failure::usage("--null is empty"));
    }
    Ok(pairs)
}

fn index_of(model: &CelModel, name: &str) -> Result<usize, Failure> {
    model
        .parameter_index(name)
        .ok_or_else(|| CelError::Config(format!("unknown parameter '{name}'")).into())
}

pub fn test(args: &TestArgs, threads: usize) -> Outcome {
    let null = parse_null(&args.null)?;
    let options = options_for(&args.calibration, fit_options(&args.inputs, threads))?;
    let built = load(&args.inputs)?;
    let model = &built.model;
    let mut phi = vec![None; model.p()];
    for (name, value) in &null {
        phi[index_of(model, name)?] = Some(*value);
    }
    let interest: Vec<usize> = (0..model.p()).filter(|&i| phi[i].is_some()).collect();
    let phi0: Vec<f64> = interest.iter().map(|&i| phi[i].unwrap()).collect();
    let (fit, _) = run_fit(&built, &options.fit)?;
    let result = if interest.len() == model.p() {
        lr_test_simple_given(model, &fit, &phi0, &options)?
    } else {
        let partition = ParameterPartition::new(interest.clone(), model.p())?;
        lr_test_profile_given(model, &fit, &partition, &phi0, &options)?
    };
    let names = model.parameter_names();
    let mut out = serde_json::to_value(&result).expect("test result serialises");
    out["command"] = json!("test");
    out["parameters"] = json!(names);
    out["interest"] = json!(interest.iter().map(|&i| &names[i]).collect::<Vec<_>>());
    out["nuisance"] = json!((0..model.p())
        .filter(|i| !interest.contains(i))
        .map(|i| &names[i])
        .collect::<Vec<_>>());
    if !result.converged {
        return Err(Failure::numerical("a constrained fit did not converge", out));
    }
    Ok(out)
}

pub fn ci(args: &CiArgs, threads: usize) -> Outcome {
    if !(args.level > 0.0 && args.level < 1.0) {
        return Err(Failure::usage("--level must lie in (0, 1)"));
    }
    let options = options_for(&args.calibration, fit_options(&args.inputs, threads))?;
    let built = load(&args.inputs)?;
    let model = &built.model;
    let indices = args
        .params
        .iter()
        .map(|p| index_of(model, p))
        .collect::<Result<Vec<_>, _>>()?;
    let (fit, _) = run_fit(&built, &options.fit)?;
    let intervals = indices
        .iter()
        .map(|&i| confidence_interval_given(model, &fit, i, args.level, &options))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(json!({
        "command": "ci",
        "parameters": model.parameter_names(),
        "theta_hat": fit.theta_hat.values(),
        "intervals": intervals,
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_parsing() {
        let pairs = parse_null("mu=1, sigma2 = 2.5").unwrap();
        assert_eq!(pairs, vec![("mu".to_string(), 1.0), ("sigma2".to_string(), 2.5)]);
        assert_eq!(parse_null("mu").unwrap_err().code, 1);
        assert_eq!(parse_null("mu=x").unwrap_err().code, 1);
        assert_eq!(parse_null("mu=1,mu=2").unwrap_err().code, 1);
        assert_eq!(parse_null(" ").unwrap_err().code, 1);
    }
}
