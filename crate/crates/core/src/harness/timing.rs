use std::sync::Arc;
use std::time::Instant;

use serde::Serialize;

use crate::composite::{fit_with, FitOptions};
use crate::error::{CelError, Result};
use crate::model::{CelModel, ComponentSpec, Dataset, EquationKind};
use crate::simgen::{replicate_seed, splitmix64, NormalSampler};

/// One timed fit.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimingRecord {
    pub n: usize,
    pub j: usize,
    pub replicate: usize,
    pub seconds: f64,
    pub estimate: f64,
    pub converged: bool,
}

/// Median and quartiles of the fit time for one `(n, J)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimingSummary {
    pub n: usize,
    pub j: usize,
    pub threads: usize,
    pub replicates: usize,
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
}

/// Splits a univariate sample into `j` consecutive blocks of equal size and
/// builds `j` mean components sharing one parameter, one per block.
pub fn split_model(sample: &[f64], j: usize) -> Result<CelModel> {
    if j == 0 || !sample.len().is_multiple_of(j) {
        return Err(CelError::config(format!(
            "J = {j} does not divide n = {}",
            sample.len()
        )));
    }
    let m = sample.len() / j;
    let columns: Vec<Vec<f64>> = sample.chunks_exact(m).map(|c| c.to_vec()).collect();
    let names = (1..=j).map(|c| format!("z{c}")).collect();
    let data = Arc::new(Dataset::from_columns(names, &columns)?);
    let specs = (0..j)
        .map(|c| ComponentSpec::builtin(format!("piece{}", c + 1), vec![c], EquationKind::Mean { mu: 0 }))
        .collect();
    CelModel::new(data, specs, vec!["mu".into()])
}

fn chisq_sample(n: usize, seed: u64) -> Vec<f64> {
    let mut s = NormalSampler::new(seed);
    (0..n)
        .map(|_| {
            let z = s.standard_normal();
            z * z
        })
        .collect()
}

/// Times the split-sample fit of a chi-square(1) mean for each `J`, with the
/// components solved concurrently on a pool of `threads` workers. Every `J`
/// sees the same sample in a given replicate.
pub fn run_timing_bench(
    n: usize,
    j_list: &[usize],
    replicates: usize,
    threads: usize,
    seed: u64,
) -> Result<Vec<TimingRecord>> {
    if replicates == 0 || threads == 0 || j_list.is_empty() {
        return Err(CelError::config("timing needs replicates, threads and J values"));
    }
    if let Some(&bad) = j_list.iter().find(|&&j| j == 0 || !n.is_multiple_of(j)) {
        return Err(CelError::config(format!("J = {bad} does not divide n = {n}")));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CelError::Numeric(format!("cannot start worker pool: {e}")))?;
    let options = FitOptions {
        parallel: true,
        ..FitOptions::default()
    };
    let base = splitmix64(seed ^ n as u64);
    let mut records = Vec::with_capacity(replicates * j_list.len());
    for r in 0..replicates {
        let sample = chisq_sample(n, replicate_seed(base, r as u64));
        for &j in j_list {
            let model = split_model(&sample, j)?;
            let (fit, seconds) = pool.install(|| {
                let start = Instant::now();
                let fit = fit_with(&model, &[1.0], &options);
                (fit, start.elapsed().as_secs_f64())
            });
            let fit = fit?;
            records.push(TimingRecord {
                n,
                j,
                replicate: r,
                seconds,
                estimate: fit.theta_hat.values()[0],
                converged: fit.converged,
            });
        }
    }
    Ok(records)
}

fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = p * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per-`(n, J)` medians and quartiles, in the order the `J` values first appear.
pub fn summarize_timings(records: &[TimingRecord], threads: usize) -> Vec<TimingSummary> {
    let mut keys: Vec<(usize, usize)> = Vec::new();
    for r in records {
        if !keys.contains(&(r.n, r.j)) {
            keys.push((r.n, r.j));
        }
    }
    keys.into_iter()
        .map(|(n, j)| {
            let mut t: Vec<f64> = records
                .iter()
                .filter(|r| r.n == n && r.j == j)
                .map(|r| r.seconds)
                .collect();
            t.sort_by(f64::total_cmp);
            TimingSummary {
                n,
                j,
                threads,
                replicates: t.len(),
                median: quantile(&t, 0.5),
                q1: quantile(&t, 0.25),
                q3: quantile(&t, 0.75),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composite::fit;

    #[test]
    fn split_requires_divisor() {
        assert!(split_model(&[1.0; 10], 3).is_err());
        let m = split_model(&(0..12).map(f64::from).collect::<Vec<_>>(), 3).unwrap();
        assert_eq!((m.n(), m.j()), (4, 3));
        assert_eq!(m.dataset().column(1), vec![4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn single_piece_is_plain_mean() {
        let sample = chisq_sample(40, 3);
        let mean = sample.iter().sum::<f64>() / 40.0;
        let f = fit(&split_model(&sample, 1).unwrap(), &[1.0]).unwrap();
        assert!((f.theta_hat.values()[0] - mean).abs() < 1e-7);
    }

    #[test]
    fn quartiles() {
        let recs: Vec<TimingRecord> = [4.0, 1.0, 3.0, 2.0, 5.0]
            .iter()
            .enumerate()
            .map(|(i, &s)| TimingRecord {
                n: 10,
                j: 1,
                replicate: i,
                seconds: s,
                estimate: 0.0,
                converged: true,
            })
            .collect();
        let s = summarize_timings(&recs, 1);
        assert_eq!(s.len(), 1);
        assert_eq!((s[0].q1, s[0].median, s[0].q3), (2.0, 3.0, 4.0));
    }

    #[test]
    fn bench_runs() {
        let recs = run_timing_bench(40, &[1, 2, 4], 2, 2, 9).unwrap();
        assert_eq!(recs.len(), 6);
        assert!(recs.iter().all(|r| r.converged && r.seconds >= 0.0));
        assert!(run_timing_bench(30, &[4], 1, 1, 0).is_err());
    }
}
