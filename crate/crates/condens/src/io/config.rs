//! Run configuration: TOML sections mirroring the CLI flags. Flags override
//! file values; unknown keys are rejected.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: Option<String>,
    pub out: Option<String>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    /// "poly" or "gmm".
    pub model: Option<String>,
    pub fit: FitSection,
    pub selection: SelectionSection,
    pub divergence: DivergenceSection,
    pub simulate: SimulateSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitSection {
    pub x_depth: Option<u32>,
    pub y_depth: Option<u32>,
    pub degree: Option<Vec<usize>>,
    pub k: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SelectionSection {
    pub collection_x: Option<String>,
    pub collection_y: Option<String>,
    /// Isotropic maximum-degree candidates.
    pub degrees: Option<Vec<usize>>,
    pub k_range: Option<Vec<usize>>,
    pub cov_spec: Option<String>,
    /// "slope", "theoretical" or "manual".
    pub penalty_mode: Option<String>,
    pub kappa: Option<f64>,
    /// Growth-rule sample size; defaults to the dataset size.
    pub rule_n: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DivergenceSection {
    pub rho: Option<f64>,
    /// "grid:<points>" or "mc:<samples>".
    pub quadrature: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSection {
    pub scenario: Option<String>,
    pub n: Option<usize>,
    pub ns: Option<Vec<usize>>,
    pub replicates: Option<usize>,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))
    }

    /// File values overridden by any non-empty flag values.
    pub fn merged_under(mut self, flags: RunConfig) -> RunConfig {
        macro_rules! take {
            ($($field:ident).+) => {
                if flags.$($field).+.is_some() {
                    self.$($field).+ = flags.$($field).+;
                }
            };
        }
        take!(data);
        take!(out);
        take!(seed);
        take!(threads);
        take!(model);
        take!(fit.x_depth);
        take!(fit.y_depth);
        take!(fit.degree);
        take!(fit.k);
        take!(selection.collection_x);
        take!(selection.collection_y);
        take!(selection.degrees);
        take!(selection.k_range);
        take!(selection.cov_spec);
        take!(selection.penalty_mode);
        take!(selection.kappa);
        take!(selection.rule_n);
        take!(divergence.rho);
        take!(divergence.quadrature);
        take!(simulate.scenario);
        take!(simulate.n);
        take!(simulate.ns);
        take!(simulate.replicates);
        self
    }
}
