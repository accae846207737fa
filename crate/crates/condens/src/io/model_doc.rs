//! Model persistence: a single JSON document, schema version "1".
//!
//! Documents are emitted with a fixed field order and shortest-round-trip
//! float formatting, so `save -> load -> save` is byte-identical. Loading
//! re-validates every structural invariant (growth rules, simplex
//! proportions, unit-norm coefficients, orthogonal bases), since documents
//! may come from untrusted sources.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::geometry::{PartitionKind, PartitionTree, Split, SplitSpec, SplitTree};
use crate::polydens::{CellPoly, DegreeVector, PolyModel};
use crate::spatial_gmm::{GaussianComponent, SpatialGmm};
use crate::{Error, Result};

pub const SCHEMA_VERSION: &str = "1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub schema_version: String,
    pub meta: FitMeta,
    pub model: ModelPayload,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ModelPayload {
    #[serde(rename = "poly")]
    Poly(PolyDoc),
    #[serde(rename = "gmm")]
    Gmm(GmmDoc),
}

/// Fit metadata carried alongside the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitMeta {
    pub n: usize,
    pub loglik: f64,
    pub penalty: f64,
    pub score: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeDoc {
    pub collection: String,
    pub rule_n: usize,
    pub dim: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub root: Option<NodeDoc>,
    /// Flat cell list for the collection without tree structure.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cells: Option<Vec<CellDoc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeDoc {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub children: Option<Vec<NodeDoc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitDoc {
    pub kind: String, // "dyadic" | "axis"
    #[serde(skip_serializing_if = "Option::is_none")]
    pub axis: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub at: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellDoc {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolyDoc {
    pub x_tree: TreeDoc,
    pub y_trees: Vec<TreeDoc>,
    pub degree: Vec<usize>,
    /// `cells[x_leaf][y_leaf]`.
    pub cells: Vec<Vec<CellPolyDoc>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellPolyDoc {
    pub coeffs: Vec<f64>,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmmDoc {
    pub x_tree: TreeDoc,
    pub k: usize,
    pub d_y: usize,
    pub e_indices: Vec<usize>,
    pub components: Vec<ComponentDoc>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub complement: Option<ComponentDoc>,
    /// One probability vector per X-leaf.
    pub proportions: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentDoc {
    pub mu: Vec<f64>,
    pub volume: f64,
    /// Row-major orthogonal matrix.
    pub basis: Vec<Vec<f64>>,
    pub shape: Vec<f64>,
}

impl ModelDocument {
    pub fn from_poly(model: &PolyModel, meta: FitMeta) -> Self {
        ModelDocument {
            schema_version: SCHEMA_VERSION.to_string(),
            meta,
            model: ModelPayload::Poly(PolyDoc {
                x_tree: tree_to_doc(&model.x_tree),
                y_trees: model.y_trees.iter().map(tree_to_doc).collect(),
                degree: model.degree.0.clone(),
                cells: model
                    .cells
                    .iter()
                    .map(|row| {
                        row.iter()
                            .map(|c| CellPolyDoc { coeffs: c.coeffs.clone(), weight: c.weight })
                            .collect()
                    })
                    .collect(),
            }),
        }
    }

    pub fn from_gmm(model: &SpatialGmm, meta: FitMeta) -> Self {
        ModelDocument {
            schema_version: SCHEMA_VERSION.to_string(),
            meta,
            model: ModelPayload::Gmm(GmmDoc {
                x_tree: tree_to_doc(&model.x_tree),
                k: model.k,
                d_y: model.d_y,
                e_indices: model.e_indices.clone(),
                components: model.components.iter().map(component_to_doc).collect(),
                complement: model.complement.as_ref().map(component_to_doc),
                proportions: model.proportions.clone(),
            }),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("document serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ModelDocument =
            serde_json::from_str(text).map_err(|e| Error::Format(format!("model document: {e}")))?;
        if doc.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "unsupported schema_version `{}`",
                doc.schema_version
            )));
        }
        Ok(doc)
    }

    /// Rebuilds the polynomial model, re-validating every invariant.
    pub fn to_poly(&self) -> Result<PolyModel> {
        let ModelPayload::Poly(doc) = &self.model else {
            return Err(Error::Format("document does not hold a poly model".into()));
        };
        let x_tree = tree_from_doc(&doc.x_tree)?;
        if doc.y_trees.len() != x_tree.num_leaves() || doc.cells.len() != doc.y_trees.len() {
            return Err(Error::Format("one y-tree and cell row per x-leaf required".into()));
        }
        let degree = DegreeVector(doc.degree.clone());
        degree.validate(16)?;
        let per_cell = degree.dims_per_cell();
        let mut y_trees = Vec::with_capacity(doc.y_trees.len());
        let mut cells = Vec::with_capacity(doc.cells.len());
        for (tree_doc, row) in doc.y_trees.iter().zip(&doc.cells) {
            let tree = tree_from_doc(tree_doc)?;
            if tree.dim() != degree.0.len() {
                return Err(Error::Format("y-tree dimension does not match the degree vector".into()));
            }
            if row.len() != tree.num_leaves() {
                return Err(Error::Format("cell row length must match the y-partition".into()));
            }
            let mut weight_sum = 0.0;
            let mut parsed = Vec::with_capacity(row.len());
            for cell in row {
                if cell.coeffs.len() != per_cell {
                    return Err(Error::Format("coefficient block has the wrong size".into()));
                }
                if !cell.coeffs.iter().all(|c| c.is_finite()) || !cell.weight.is_finite() {
                    return Err(Error::Format("non-finite cell parameters".into()));
                }
                if cell.weight < 0.0 || cell.weight > 1.0 + 1e-10 {
                    return Err(Error::Format("cell weight outside [0,1]".into()));
                }
                let norm: f64 = cell.coeffs.iter().map(|c| c * c).sum();
                if (norm - 1.0).abs() > 1e-8 {
                    return Err(Error::Format("coefficients are not unit-norm".into()));
                }
                weight_sum += cell.weight;
                parsed.push(CellPoly { coeffs: cell.coeffs.clone(), weight: cell.weight });
            }
            if (weight_sum - 1.0).abs() > 1e-8 {
                return Err(Error::Format("leaf cell weights do not sum to 1".into()));
            }
            y_trees.push(tree);
            cells.push(parsed);
        }
        Ok(PolyModel { x_tree, y_trees, cells, degree })
    }

    /// Rebuilds the mixture model, re-validating every invariant.
    pub fn to_gmm(&self) -> Result<SpatialGmm> {
        let ModelPayload::Gmm(doc) = &self.model else {
            return Err(Error::Format("document does not hold a gmm model".into()));
        };
        let x_tree = tree_from_doc(&doc.x_tree)?;
        if doc.k == 0 || doc.components.len() != doc.k {
            return Err(Error::Format("component count mismatch".into()));
        }
        if doc.proportions.len() != x_tree.num_leaves() {
            return Err(Error::Format("one proportion vector per x-leaf required".into()));
        }
        let p = doc.e_indices.len();
        if p == 0 || p > doc.d_y {
            return Err(Error::Format("invalid discriminant index set".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for &j in &doc.e_indices {
            if j >= doc.d_y || !seen.insert(j) {
                return Err(Error::Format("invalid discriminant index set".into()));
            }
        }
        for pi in &doc.proportions {
            if pi.len() != doc.k {
                return Err(Error::Format("proportion vector length mismatch".into()));
            }
            if pi.iter().any(|v| !v.is_finite() || *v < 0.0) {
                return Err(Error::Format("proportions must be nonnegative".into()));
            }
            if (pi.iter().sum::<f64>() - 1.0).abs() > 1e-10 {
                return Err(Error::Format("proportions must sum to 1".into()));
            }
        }
        let components = doc
            .components
            .iter()
            .map(|c| component_from_doc(c, p))
            .collect::<Result<Vec<_>>>()?;
        let complement = match &doc.complement {
            Some(c) => {
                if doc.d_y == p {
                    return Err(Error::Format("complement block with a full discriminant set".into()));
                }
                Some(component_from_doc(c, doc.d_y - p)?)
            }
            None => {
                if doc.d_y != p {
                    return Err(Error::Format("missing complement block".into()));
                }
                None
            }
        };
        Ok(SpatialGmm {
            k: doc.k,
            components,
            x_tree,
            proportions: doc.proportions.clone(),
            e_indices: doc.e_indices.clone(),
            complement,
            d_y: doc.d_y,
        })
    }
}

fn component_to_doc(c: &GaussianComponent) -> ComponentDoc {
    let p = c.dim();
    ComponentDoc {
        mu: c.mu.iter().copied().collect(),
        volume: c.volume,
        basis: (0..p).map(|i| (0..p).map(|j| c.basis[(i, j)]).collect()).collect(),
        shape: c.shape.iter().copied().collect(),
    }
}

fn component_from_doc(doc: &ComponentDoc, p: usize) -> Result<GaussianComponent> {
    if doc.mu.len() != p || doc.shape.len() != p || doc.basis.len() != p {
        return Err(Error::Format("component dimension mismatch".into()));
    }
    if doc.basis.iter().any(|row| row.len() != p) {
        return Err(Error::Format("basis is not square".into()));
    }
    let all = doc.mu.iter().chain(doc.shape.iter()).chain(doc.basis.iter().flatten());
    if all.clone().any(|v| !v.is_finite()) || !doc.volume.is_finite() {
        return Err(Error::Format("non-finite component parameters".into()));
    }
    if doc.volume <= 0.0 || doc.shape.iter().any(|&v| v <= 0.0) {
        return Err(Error::Format("volume and shape must be positive".into()));
    }
    let det: f64 = doc.shape.iter().product();
    if (det - 1.0).abs() > 1e-8 {
        return Err(Error::Format("shape determinant must be 1".into()));
    }
    let basis = DMatrix::from_fn(p, p, |i, j| doc.basis[i][j]);
    let orth = (basis.transpose() * &basis - DMatrix::identity(p, p)).abs().max();
    if orth > 1e-8 {
        return Err(Error::Format("basis is not orthogonal".into()));
    }
    Ok(GaussianComponent {
        mu: DVector::from_vec(doc.mu.clone()),
        volume: doc.volume,
        basis,
        shape: DVector::from_vec(doc.shape.clone()),
    })
}

fn tree_to_doc(tree: &PartitionTree) -> TreeDoc {
    fn node_to_doc(node: &crate::geometry::Node) -> NodeDoc {
        match &node.split {
            None => NodeDoc { split: None, children: None },
            Some((split, children)) => NodeDoc {
                split: Some(match split {
                    Split::Dyadic => SplitDoc { kind: "dyadic".into(), axis: None, at: None },
                    Split::Axis { axis, at } => {
                        SplitDoc { kind: "axis".into(), axis: Some(*axis), at: Some(*at) }
                    }
                }),
                children: Some(children.iter().map(node_to_doc).collect()),
            },
        }
    }
    match tree.as_node() {
        Some(node) => TreeDoc {
            collection: tree.kind().as_str().to_string(),
            rule_n: tree.rule_n(),
            dim: tree.dim(),
            root: Some(node_to_doc(node)),
            cells: None,
        },
        None => {
            let cells = tree
                .flat_cells()
                .expect("flat partition")
                .iter()
                .map(|c| CellDoc { lower: c.lower().to_vec(), upper: c.upper().to_vec() })
                .collect();
            TreeDoc {
                collection: tree.kind().as_str().to_string(),
                rule_n: tree.rule_n(),
                dim: tree.flat_cells().expect("flat partition")[0].dim(),
                root: None,
                cells: Some(cells),
            }
        }
    }
}

fn tree_from_doc(doc: &TreeDoc) -> Result<PartitionTree> {
    let kind = PartitionKind::parse(&doc.collection)?;
    if doc.rule_n == 0 || doc.dim == 0 {
        return Err(Error::Format("rule_n and dim must be positive".into()));
    }
    match kind {
        PartitionKind::Hrp => {
            let cells =
                doc.cells.as_ref().ok_or_else(|| Error::Format("hrp document needs cells".into()))?;
            if doc.root.is_some() {
                return Err(Error::Format("hrp document cannot carry a tree".into()));
            }
            hrp_from_cells(cells, doc.rule_n, doc.dim)
        }
        _ => {
            let root =
                doc.root.as_ref().ok_or_else(|| Error::Format("tree document needs a root".into()))?;
            if doc.cells.is_some() {
                return Err(Error::Format("tree document cannot carry flat cells".into()));
            }
            let split_tree = node_to_split_tree(root, 0)?;
            PartitionTree::from_splits(kind, doc.rule_n, doc.dim, &split_tree)
                .map_err(|e| Error::Format(format!("invalid partition tree: {e}")))
        }
    }
}

fn node_to_split_tree(node: &NodeDoc, depth: usize) -> Result<SplitTree> {
    if depth > 64 {
        return Err(Error::Format("partition tree deeper than 64 levels".into()));
    }
    match (&node.split, &node.children) {
        (None, None) => Ok(SplitTree::Leaf),
        (Some(split), Some(children)) => {
            if children.is_empty() {
                return Err(Error::Format("split node without children".into()));
            }
            let spec = match split.kind.as_str() {
                "dyadic" => SplitSpec::Dyadic,
                "axis" => {
                    let axis = split.axis.ok_or_else(|| Error::Format("axis split needs an axis".into()))?;
                    let at = split.at.ok_or_else(|| Error::Format("axis split needs a position".into()))?;
                    if !at.is_finite() {
                        return Err(Error::Format("non-finite split position".into()));
                    }
                    SplitSpec::Axis { axis, at }
                }
                other => return Err(Error::Format(format!("unknown split kind `{other}`"))),
            };
            let children = children
                .iter()
                .map(|c| node_to_split_tree(c, depth + 1))
                .collect::<Result<Vec<_>>>()?;
            Ok(SplitTree::Split { split: spec, children })
        }
        _ => Err(Error::Format("node must have both split and children or neither".into())),
    }
}

fn hrp_from_cells(cells: &[CellDoc], n: usize, d: usize) -> Result<PartitionTree> {
    if cells.is_empty() {
        return Err(Error::Format("empty cell list".into()));
    }
    let mut rects = Vec::with_capacity(cells.len());
    for c in cells {
        if c.lower.len() != d || c.upper.len() != d {
            return Err(Error::Format("cell dimension mismatch".into()));
        }
        for (lo, hi) in c.lower.iter().zip(&c.upper) {
            for v in [lo, hi] {
                let scaled = v * n as f64;
                if !v.is_finite() || (scaled - scaled.round()).abs() > 1e-9 || *v < 0.0 || *v > 1.0 {
                    return Err(Error::Format("cell corners must lie on the 1/n grid in [0,1]".into()));
                }
            }
            if lo >= hi {
                return Err(Error::Format("degenerate cell".into()));
            }
        }
        let rect = crate::geometry::Hyperrectangle::new(c.lower.clone(), c.upper.clone())
            .map_err(|e| Error::Format(format!("{e}")))?;
        if rect.volume() < 1.0 / n as f64 - 1e-12 {
            return Err(Error::Format("cell volume under 1/n".into()));
        }
        rects.push(rect);
    }
    // Tiling check on the integer grid.
    let total: u64 = (n as u64).pow(d as u32);
    if total > (1 << 30) {
        return Err(Error::Format("hrp grid too large to validate".into()));
    }
    let mut covered = vec![false; total as usize];
    for rect in &rects {
        let lo: Vec<u64> = rect.lower().iter().map(|v| (v * n as f64).round() as u64).collect();
        let hi: Vec<u64> = rect.upper().iter().map(|v| (v * n as f64).round() as u64).collect();
        let mut idx = lo.clone();
        loop {
            let flat = idx.iter().fold(0u64, |acc, &c| acc * n as u64 + c);
            let slot = &mut covered[flat as usize];
            if *slot {
                return Err(Error::Format("overlapping cells".into()));
            }
            *slot = true;
            let mut j = d;
            loop {
                if j == 0 {
                    break;
                }
                j -= 1;
                idx[j] += 1;
                if idx[j] < hi[j] {
                    break;
                }
                idx[j] = lo[j];
            }
            if idx == lo {
                break;
            }
        }
    }
    if covered.iter().any(|c| !c) {
        return Err(Error::Format("cells do not tile the unit cube".into()));
    }
    Ok(PartitionTree::from_cells(n, rects))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PartitionKind;

    fn sample_poly() -> PolyModel {
        let x_tree = PartitionTree::uniform(PartitionKind::Rdp, 16, 1, 1);
        let y_tree = PartitionTree::uniform(PartitionKind::Rdp, 16, 1, 1);
        PolyModel::histogram(x_tree, vec![y_tree.clone(), y_tree], vec![vec![0.25, 0.75], vec![0.5, 0.5]])
            .unwrap()
    }

    fn meta() -> FitMeta {
        FitMeta { n: 100, loglik: -12.5, penalty: 3.0, score: 15.5, seed: 7 }
    }

    #[test]
    fn poly_round_trip_bytes() {
        let doc = ModelDocument::from_poly(&sample_poly(), meta());
        let json = doc.to_json();
        let back = ModelDocument::from_json(&json).unwrap();
        assert_eq!(back.to_json(), json);
        let model = back.to_poly().unwrap();
        assert_eq!(model.cells[0][1].weight, 0.75);
        assert_eq!(model.x_tree.num_leaves(), 2);
    }

    #[test]
    fn rejects_tampered_documents() {
        let doc = ModelDocument::from_poly(&sample_poly(), meta());
        let json = doc.to_json();
        // Unknown field.
        let bad = json.replacen("\"schema_version\"", "\"extra\": 1, \"schema_version\"", 1);
        assert!(ModelDocument::from_json(&bad).is_err());
        // Broken weights.
        let bad = json.replace("0.75", "0.95");
        let doc = ModelDocument::from_json(&bad).unwrap();
        assert!(doc.to_poly().is_err());
        // Wrong version.
        let bad = json.replace("\"schema_version\": \"1\"", "\"schema_version\": \"2\"");
        assert!(ModelDocument::from_json(&bad).is_err());
    }

    #[test]
    fn tree_doc_validates_growth_rules() {
        // A dyadic split below the admissible volume must be rejected.
        let deep = TreeDoc {
            collection: "rdp".into(),
            rule_n: 2,
            dim: 1,
            root: Some(NodeDoc {
                split: Some(SplitDoc { kind: "dyadic".into(), axis: None, at: None }),
                children: Some(vec![
                    NodeDoc {
                        split: Some(SplitDoc { kind: "dyadic".into(), axis: None, at: None }),
                        children: Some(vec![
                            NodeDoc { split: None, children: None },
                            NodeDoc { split: None, children: None },
                        ]),
                    },
                    NodeDoc { split: None, children: None },
                ]),
            }),
            cells: None,
        };
        assert!(tree_from_doc(&deep).is_err());
    }

    #[test]
    fn gmm_round_trip() {
        use nalgebra::{DMatrix, DVector};
        let model = SpatialGmm {
            k: 2,
            components: vec![
                GaussianComponent {
                    mu: DVector::from_vec(vec![-1.0]),
                    volume: 1.5,
                    basis: DMatrix::identity(1, 1),
                    shape: DVector::from_element(1, 1.0),
                },
                GaussianComponent {
                    mu: DVector::from_vec(vec![2.0]),
                    volume: 0.5,
                    basis: DMatrix::identity(1, 1),
                    shape: DVector::from_element(1, 1.0),
                },
            ],
            x_tree: PartitionTree::uniform(PartitionKind::Rdp, 16, 2, 1),
            proportions: vec![vec![0.9, 0.1]; 4],
            e_indices: vec![0],
            complement: None,
            d_y: 1,
        };
        let doc = ModelDocument::from_gmm(&model, meta());
        let json = doc.to_json();
        let back = ModelDocument::from_json(&json).unwrap();
        assert_eq!(back.to_json(), json);
        let restored = back.to_gmm().unwrap();
        assert_eq!(restored.k, 2);
        assert_eq!(restored.proportions.len(), 4);
        // Log density agrees exactly: parameters are stored losslessly.
        let x = [0.3, 0.7];
        let y = [0.4];
        assert_eq!(
            model.log_density_checked(&x, &y).unwrap(),
            restored.log_density_checked(&x, &y).unwrap()
        );
    }

    #[test]
    fn hrp_document_round_trip_and_tiling() {
        let cells = vec![
            CellDoc { lower: vec![0.0], upper: vec![0.5] },
            CellDoc { lower: vec![0.5], upper: vec![1.0] },
        ];
        let tree = hrp_from_cells(&cells, 4, 1).unwrap();
        assert_eq!(tree.num_leaves(), 2);
        // Overlap is rejected.
        let bad = vec![
            CellDoc { lower: vec![0.0], upper: vec![0.75] },
            CellDoc { lower: vec![0.5], upper: vec![1.0] },
        ];
        assert!(hrp_from_cells(&bad, 4, 1).is_err());
        // Gap is rejected.
        let bad = vec![CellDoc { lower: vec![0.0], upper: vec![0.5] }];
        assert!(hrp_from_cells(&bad, 4, 1).is_err());
    }
}
