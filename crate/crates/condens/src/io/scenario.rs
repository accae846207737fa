//! Scenario files: a synthetic truth plus an estimator grid, used by the
//! `simulate`, `risk` and `slope` commands.

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::geometry::{PartitionKind, PartitionTree};
use crate::polydens::{DegreeVector, FitOptions, PolyModel};
use crate::simulate::{DesignLaw, GroundTruth, TruthDensity};
use crate::spatial_gmm::{GaussianComponent, SpatialGmm};
use crate::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub truth: TruthSection,
    pub estimator: EstimatorSection,
    pub risk: RiskSection,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TruthSection {
    /// "piecewise_constant", "piecewise_poly" or "spatial_gmm".
    pub kind: String,
    pub d_x: Option<usize>,
    /// Uniform dyadic X-partition depth.
    pub x_depth: Option<u32>,
    /// Uniform dyadic Y-partition depth (histogram truths).
    pub y_depth: Option<u32>,
    /// Per-X-leaf cell weights (histogram) or mixing proportions (gmm).
    pub weights: Option<Vec<Vec<f64>>>,
    /// Per-cell polynomial coefficients (one block per (x-leaf, y-cell)).
    pub coeffs: Option<Vec<Vec<Vec<f64>>>>,
    pub degree: Option<Vec<usize>>,
    /// Component means (gmm truths).
    pub means: Option<Vec<Vec<f64>>>,
    pub variance: Option<f64>,
    /// "iid_uniform" or "fixed_grid".
    pub design: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EstimatorSection {
    /// "hist_grid", "poly_dp" or "gmm_select".
    pub kind: String,
    pub x_depths: Option<Vec<u32>>,
    pub y_depths: Option<Vec<u32>>,
    pub collection_x: Option<String>,
    pub collection_y: Option<String>,
    pub degrees: Option<Vec<usize>>,
    pub k_range: Option<Vec<usize>>,
    pub cov_spec: Option<String>,
    pub penalty_mode: Option<String>,
    pub kappa: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RiskSection {
    pub ns: Option<Vec<usize>>,
    pub replicates: Option<usize>,
    pub rho: Option<f64>,
    pub seed: Option<u64>,
}

impl ScenarioConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Format(format!("scenario: {e}")))
    }

    pub fn build_truth(&self) -> Result<GroundTruth> {
        let t = &self.truth;
        let design = match t.design.as_deref().unwrap_or("iid_uniform") {
            "iid_uniform" => DesignLaw::IidUniform,
            "fixed_grid" => DesignLaw::FixedGrid,
            other => return Err(Error::Contract(format!("unknown design `{other}`"))),
        };
        let d_x = t.d_x.unwrap_or(1);
        let x_depth = t.x_depth.unwrap_or(0);
        let rule_n = 1usize << 20; // generous growth rules for truth shapes
        let x_tree = PartitionTree::uniform(PartitionKind::Udp, rule_n, d_x, x_depth);
        let density = match t.kind.as_str() {
            "piecewise_constant" => {
                let weights = t
                    .weights
                    .clone()
                    .ok_or_else(|| Error::Contract("piecewise_constant truth needs weights".into()))?;
                let y_depth = t.y_depth.unwrap_or(1);
                let y_tree = PartitionTree::uniform(PartitionKind::Udp, rule_n, 1, y_depth);
                let y_trees = vec![y_tree; x_tree.num_leaves()];
                TruthDensity::Poly(PolyModel::histogram(x_tree, y_trees, weights)?)
            }
            "piecewise_poly" => {
                let degree = DegreeVector(
                    t.degree.clone().ok_or_else(|| Error::Contract("needs degree".into()))?,
                );
                let coeffs = t
                    .coeffs
                    .clone()
                    .ok_or_else(|| Error::Contract("piecewise_poly truth needs coeffs".into()))?;
                let weights = t
                    .weights
                    .clone()
                    .ok_or_else(|| Error::Contract("piecewise_poly truth needs weights".into()))?;
                let y_depth = t.y_depth.unwrap_or(0);
                let d_y = degree.0.len();
                let y_tree = PartitionTree::uniform(PartitionKind::Udp, rule_n, d_y, y_depth);
                let y_trees = vec![y_tree; x_tree.num_leaves()];
                let mut model = PolyModel::histogram(
                    x_tree,
                    y_trees,
                    weights,
                )?;
                model.degree = degree.clone();
                for (l, row) in coeffs.iter().enumerate() {
                    for (c, block) in row.iter().enumerate() {
                        if block.len() != degree.dims_per_cell() {
                            return Err(Error::Contract("coefficient block size mismatch".into()));
                        }
                        let norm: f64 = block.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if (norm - 1.0).abs() > 1e-8 {
                            return Err(Error::Contract("coefficients must be unit-norm".into()));
                        }
                        model.cells[l][c].coeffs = block.clone();
                    }
                }
                TruthDensity::Poly(model)
            }
            "spatial_gmm" => {
                let means = t
                    .means
                    .clone()
                    .ok_or_else(|| Error::Contract("spatial_gmm truth needs means".into()))?;
                let proportions = t
                    .weights
                    .clone()
                    .ok_or_else(|| Error::Contract("spatial_gmm truth needs weights".into()))?;
                if proportions.len() != x_tree.num_leaves() {
                    return Err(Error::Contract("one proportion vector per x-leaf".into()));
                }
                let var = t.variance.unwrap_or(1.0);
                let p = means[0].len();
                let components: Vec<GaussianComponent> = means
                    .iter()
                    .map(|mu| GaussianComponent {
                        mu: nalgebra::DVector::from_vec(mu.clone()),
                        volume: var,
                        basis: nalgebra::DMatrix::identity(p, p),
                        shape: nalgebra::DVector::from_element(p, 1.0),
                    })
                    .collect();
                TruthDensity::Gmm(SpatialGmm {
                    k: components.len(),
                    components,
                    x_tree,
                    proportions,
                    e_indices: (0..p).collect(),
                    complement: None,
                    d_y: p,
                })
            }
            other => return Err(Error::Contract(format!("unknown truth kind `{other}`"))),
        };
        GroundTruth::new(density, design, None)
    }

    /// The estimator grid for `hist_grid` scenarios: one histogram model per
    /// `(x_depth, y_depth)` pair.
    pub fn hist_grid(&self) -> Result<Vec<(String, (PartitionTree, PartitionTree))>> {
        let xs = self.estimator.x_depths.clone().unwrap_or_else(|| vec![0, 1, 2]);
        let ys = self.estimator.y_depths.clone().unwrap_or_else(|| vec![0, 1, 2, 3]);
        let rule_n = 1usize << 20;
        let mut out = Vec::new();
        for &jx in &xs {
            for &jy in &ys {
                out.push((
                    format!("hist[x_depth={jx},y_depth={jy}]"),
                    (
                        PartitionTree::uniform(PartitionKind::Udp, rule_n, 1, jx),
                        PartitionTree::uniform(PartitionKind::Udp, rule_n, 1, jy),
                    ),
                ));
            }
        }
        Ok(out)
    }

    /// Fits one histogram-grid model.
    pub fn fit_hist(
        pair: &(PartitionTree, PartitionTree),
        data: &Dataset,
    ) -> Result<(TruthDensity, usize)> {
        let (x_tree, y_tree) = pair;
        let y_trees = vec![y_tree.clone(); x_tree.num_leaves()];
        let degree = DegreeVector::constant(data.d_y);
        let model = crate::polydens::fit(data, x_tree, &y_trees, &degree, &FitOptions::default())?;
        let (dim, _) = model.dimension();
        Ok((TruthDensity::Poly(model), dim))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn histogram_scenario_builds() {
        let text = r#"
[truth]
kind = "piecewise_constant"
x_depth = 1
y_depth = 2
weights = [[0.7, 0.1, 0.1, 0.1], [0.1, 0.1, 0.1, 0.7]]

[estimator]
kind = "hist_grid"
x_depths = [0, 1]
y_depths = [0, 1, 2]

[risk]
ns = [200]
replicates = 4
"#;
        let cfg = ScenarioConfig::from_toml_str(text).unwrap();
        let truth = cfg.build_truth().unwrap();
        assert_eq!(truth.x_dim(), 1);
        let grid = cfg.hist_grid().unwrap();
        assert_eq!(grid.len(), 6);
        let data = crate::simulate::sample(&truth, 50, 3).unwrap();
        let (fitted, dim) = ScenarioConfig::fit_hist(&grid[5].1, &data).unwrap();
        assert!(dim > 0);
        match fitted {
            TruthDensity::Poly(_) => {}
            _ => panic!("expected a histogram fit"),
        }
    }

    #[test]
    fn gmm_scenario_builds() {
        let text = r#"
[truth]
kind = "spatial_gmm"
d_x = 2
x_depth = 1
means = [[-3.0], [3.0]]
variance = 1.0
weights = [[0.8, 0.2], [0.2, 0.8], [0.2, 0.8], [0.8, 0.2]]

[estimator]
kind = "gmm_select"
k_range = [1, 2, 3]

[risk]
ns = [400]
replicates = 3
"#;
        let cfg = ScenarioConfig::from_toml_str(text).unwrap();
        let truth = cfg.build_truth().unwrap();
        assert_eq!(truth.x_dim(), 2);
        let data = crate::simulate::sample(&truth, 100, 9).unwrap();
        assert_eq!(data.d_y, 1);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ScenarioConfig::from_toml_str("[truth]\nbogus = 1\n").is_err());
    }

    #[test]
    fn piecewise_poly_scenario_builds_and_samples() {
        let text = r#"
[truth]
kind = "piecewise_poly"
d_x = 2
x_depth = 1
y_depth = 0
degree = [1, 1]
weights = [[1.0], [1.0], [1.0], [1.0]]
coeffs = [
  [[0.96, 0.28, 0.0, 0.0]],
  [[0.96, 0.0, 0.28, 0.0]],
  [[0.96, 0.0, -0.28, 0.0]],
  [[0.96, -0.28, 0.0, 0.0]],
]
"#;
        let cfg = ScenarioConfig::from_toml_str(text).unwrap();
        let truth = cfg.build_truth().unwrap();
        assert_eq!(truth.y_dim(), 2);
        let data = crate::simulate::sample(&truth, 400, 17).unwrap();
        assert!(data.y.iter().all(|y| y.iter().all(|v| (0.0..=1.0).contains(v))));
        // Unit-norm coefficient blocks are enforced.
        let bad = text.replace("0.96, 0.28", "0.9, 0.28");
        let cfg = ScenarioConfig::from_toml_str(&bad).unwrap();
        assert!(cfg.build_truth().is_err());
    }
}
