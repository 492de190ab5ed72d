use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;

use super::{cell_seed, StudyConfig};
use crate::error::Result;
use crate::simgen::Distribution;

/// Metadata written next to each output table.
#[derive(Clone, Debug, Serialize)]
pub struct Manifest {
    pub study: String,
    pub distribution: String,
    pub table: String,
    pub code_version: String,
    pub rng: String,
    pub construction: String,
    pub config: serde_json::Value,
    /// Base seed of each cell, keyed by `rho=<rho>,n=<n>`.
    pub cell_seeds: BTreeMap<String, u64>,
    /// Replicate `r` of a cell uses `replicate_seed(cell_seed, r)`.
    pub replicate_seeding: String,
}

pub(crate) const RNG_DESCRIPTION: &str =
    "ChaCha8 (seed_from_u64), uniforms from the top 53 bits, Box-Muller normals";

impl Manifest {
    pub fn for_study(config: &StudyConfig, distribution: Distribution, table: &Path) -> Self {
        let mut cell_seeds = BTreeMap::new();
        for &rho in &config.rhos {
            for &n in &config.ns {
                cell_seeds.insert(
                    format!("rho={rho},n={n}"),
                    cell_seed(config.seed, distribution, rho, n),
                );
            }
        }
        Manifest {
            study: config.study.to_string(),
            distribution: distribution.to_string(),
            table: table
                .file_name()
                .map(|f| f.to_string_lossy().into_owned())
                .unwrap_or_default(),
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            rng: RNG_DESCRIPTION.to_string(),
            construction: distribution.construction().to_string(),
            config: serde_json::to_value(config).unwrap_or(serde_json::Value::Null),
            cell_seeds,
            replicate_seeding: "splitmix64 mix of the cell seed and replicate index".into(),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}
