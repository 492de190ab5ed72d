//! JSON model descriptions.
//!
//! ```json
//! {
//!   "components": [
//!     {"label": "x", "columns": ["z1"], "equation": "mean", "params": ["mu"]}
//!   ],
//!   "parameters": [{"name": "mu", "init": 1.0}],
//!   "interest": ["mu"]
//! }
//! ```
//!
//! `init` may be omitted for any parameter; missing values are filled from
//! method-of-moments starting values.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::composite::default_init;
use crate::error::{CelError, Result};
use crate::model::{CelModel, ComponentSpec, Dataset, EquationKind, ParameterPartition};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentConfig {
    pub label: String,
    pub columns: Vec<String>,
    pub equation: String,
    pub params: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParameterConfig {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub components: Vec<ComponentConfig>,
    pub parameters: Vec<ParameterConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub interest: Vec<String>,
}

/// A model built from a configuration, with its starting values.
#[derive(Clone, Debug)]
pub struct BuiltModel {
    pub model: CelModel,
    pub init: Vec<f64>,
    /// Present when the configuration names interest parameters.
    pub partition: Option<ParameterPartition>,
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| CelError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })
    }

    pub fn parameter_names(&self) -> Vec<String> {
        self.parameters.iter().map(|p| p.name.clone()).collect()
    }

    fn parameter_index(&self, name: &str) -> Result<usize> {
        self.parameters
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| CelError::config(format!("unknown parameter '{name}'")))
    }

    /// Resolves names against `dataset` and validates the resulting model.
    pub fn build(&self, dataset: Arc<Dataset>) -> Result<BuiltModel> {
        let names = self.parameter_names();
        for (i, name) in names.iter().enumerate() {
            if names[..i].contains(name) {
                return Err(CelError::config(format!("parameter '{name}' declared twice")));
            }
        }
        let mut specs = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let columns = c
                .columns
                .iter()
                .map(|col| {
                    dataset.column_index(col).ok_or_else(|| {
                        CelError::config(format!(
                            "component '{}' references missing column '{col}'",
                            c.label
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let params = c
                .params
                .iter()
                .map(|p| self.parameter_index(p))
                .collect::<Result<Vec<_>>>()?;
            let kind = EquationKind::from_tag(&c.equation, &params)?;
            specs.push(ComponentSpec::builtin(c.label.clone(), columns, kind));
        }
        let model = CelModel::new(dataset, specs, names)?;
        let moments = default_init(&model);
        let init = self
            .parameters
            .iter()
            .zip(moments)
            .map(|(p, m)| p.init.unwrap_or(m))
            .collect::<Vec<_>>();
        if init.iter().any(|v| !v.is_finite()) {
            return Err(CelError::config("initial values must be finite"));
        }
        let partition = if self.interest.is_empty() {
            None
        } else {
            let idx = self
                .interest
                .iter()
                .map(|n| self.parameter_index(n))
                .collect::<Result<Vec<_>>>()?;
            Some(ParameterPartition::new(idx, model.p())?)
        };
        Ok(BuiltModel {
            model,
            init,
            partition,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data() -> Arc<Dataset> {
        Arc::new(
            Dataset::from_columns(
                vec!["a".into(), "b".into()],
                &[vec![1.0, 2.0, 3.0, 4.0], vec![2.0, 3.0, 4.0, 5.0]],
            )
            .unwrap(),
        )
    }

    #[test]
    fn builds_common_mean_model() {
        let cfg = ModelConfig::from_json(
            r#"{"components": [
                {"label": "a", "columns": ["a"], "equation": "mean", "params": ["mu"]},
                {"label": "b", "columns": ["b"], "equation": "mean", "params": ["mu"]}
            ], "parameters": [{"name": "mu"}]}"#,
        )
        .unwrap();
        let built = cfg.build(data()).unwrap();
        assert_eq!(built.model.j(), 2);
        assert_eq!(built.init, vec![3.0]);
        assert!(built.partition.is_none());
    }

    #[test]
    fn missing_column_is_named() {
        let cfg = ModelConfig::from_json(
            r#"{"components": [{"label": "c", "columns": ["zz"], "equation": "mean", "params": ["mu"]}],
                "parameters": [{"name": "mu", "init": 0.0}]}"#,
        )
        .unwrap();
        let err = cfg.build(data()).unwrap_err();
        assert!(matches!(&err, CelError::Config(m) if m.contains("'zz'")));
    }

    #[test]
    fn syntax_error_has_position() {
        let err = ModelConfig::from_json("{\n  \"components\": [,]\n}").unwrap_err();
        assert!(matches!(err, CelError::Parse { line: 2, .. }));
    }

    #[test]
    fn interest_becomes_partition() {
        let cfg = ModelConfig::from_json(
            r#"{"components": [
                {"label": "a", "columns": ["a"], "equation": "mean_and_variance", "params": ["m", "s2"]}
            ], "parameters": [{"name": "m"}, {"name": "s2"}], "interest": ["s2"]}"#,
        )
        .unwrap();
        let built = cfg.build(data()).unwrap();
        let part = built.partition.unwrap();
        assert_eq!(part.interest(), &[1]);
        assert_eq!(part.nuisance(), &[0]);
    }
}
