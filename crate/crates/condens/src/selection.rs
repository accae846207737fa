//! Penalized model selection.
//!
//! The selected model minimizes `-log-likelihood + pen` over a collection.
//! Additive penalties (one unit per cell) let tree-structured partition
//! collections be optimized exactly by bottom-up dynamic programming:
//! `cost(node) = min(leaf cost, sum of children costs)`. An exhaustive
//! fitter over explicit candidate lists doubles as the DP oracle. The
//! penalty constant comes from theory-mode bounds, the caller, or the slope
//! heuristic (robust line fit of `-loglik` against dimension over the
//! largest-dimension half, with the recommendation `2 * kappa_hat`).

use std::collections::HashMap;

use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::geometry::{
    admissible_splits, coding_constants, CellShape, Hyperrectangle, Node, PartitionKind,
    PartitionTree,
};
use crate::polydens::{self, DegreeVector, FitOptions, PolyModel};
use crate::spatial_gmm::{
    self, component_log_densities, em_fit, optimal_proportions, CovarianceSpec, EmFit, EmInit,
    EmOptions, SubspaceMode,
};
use crate::{Error, Result};

/// How the penalty constant is chosen.
#[derive(Debug, Clone, PartialEq)]
pub enum PenaltyMode {
    /// Theory-mode bound scaled by a user-supplied `kappa`.
    Theoretical { kappa: f64 },
    /// Data-driven slope calibration.
    Slope,
    /// Direct `kappa_tilde`.
    Manual { kappa_tilde: f64 },
}

/// A concrete penalty: an additive per-cell unit plus named non-additive
/// terms.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltySpec {
    pub per_leaf_unit: f64,
    pub extra_terms: Vec<(String, f64)>,
}

impl PenaltySpec {
    pub fn additive(per_leaf_unit: f64) -> Self {
        PenaltySpec { per_leaf_unit, extra_terms: Vec::new() }
    }

    /// Total penalty for a model with `n_cells` penalized cells.
    pub fn total(&self, n_cells: usize) -> f64 {
        self.per_leaf_unit * n_cells as f64 + self.extra_terms.iter().map(|(_, v)| v).sum::<f64>()
    }
}

/// Inputs of the complexity formula.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ComplexitySpec {
    /// Bracketing dimension.
    pub d: f64,
    /// Log-volume term.
    pub v: f64,
    pub n: usize,
    /// Localized entropy bound (equality) versus global bound.
    pub localized: bool,
}

/// Model complexity from the entropy constants:
/// `D = 0` gives `V`; localized gives `C* D` with `C* = (sqrt(V/D)+sqrt(pi))^2`;
/// the global bound adds `1 + (ln(n / (e C* D)))_+` inside the factor.
pub fn complexity(spec: &ComplexitySpec) -> f64 {
    if spec.d == 0.0 {
        return spec.v;
    }
    let c_star = ((spec.v / spec.d).sqrt() + std::f64::consts::PI.sqrt()).powi(2);
    if spec.localized {
        c_star * spec.d
    } else {
        let log_term = (spec.n as f64 / (std::f64::consts::E * c_star * spec.d)).ln().max(0.0);
        (2.0 * c_star + 1.0 + log_term) * spec.d
    }
}

/// Theory-mode bound on the per-dimension constant for the squared-polynomial
/// family: `C* <= ln(8 pi e)/2 + sum_d ln(sqrt(2)(r_d + 1))`.
pub fn c_star_poly_bound(degree: &DegreeVector) -> f64 {
    let base = 0.5 * (8.0 * std::f64::consts::PI * std::f64::consts::E).ln();
    base + degree.0.iter().map(|&r| (2f64.sqrt() * (r as f64 + 1.0)).ln()).sum::<f64>()
}

const C_STAR_CODING: f64 = 2.0 * std::f64::consts::LN_2;

/// Additive penalty for the squared-polynomial family. The per-cell unit is
/// `kappa_tilde * prod(r_d + 1)`; in theory mode
/// `kappa_tilde = kappa (C* + c*(A0x + B0x + A0y + B0y) + 2 ln n)`, and the
/// `2 ln n` term drops when both partitions are uniform-dyadic with a shared
/// Y-partition.
pub fn penalty_poly(
    degree: &DegreeVector,
    kind_x: PartitionKind,
    kind_y: PartitionKind,
    n: usize,
    d_x: usize,
    mode: &PenaltyMode,
    shared_udp_y: bool,
) -> Result<PenaltySpec> {
    if n < 2 {
        return Err(Error::Contract("penalty needs n >= 2".into()));
    }
    let d_y = degree.0.len();
    let per_cell_params = degree.dims_per_cell() as f64;
    let kappa_tilde = match mode {
        PenaltyMode::Manual { kappa_tilde } => *kappa_tilde,
        PenaltyMode::Slope => {
            return Err(Error::Contract("slope mode defers the constant to calibration".into()))
        }
        PenaltyMode::Theoretical { kappa } => {
            let cx = coding_constants(kind_x, n, d_x);
            let cy = coding_constants(kind_y, n, d_y);
            let log_term = if shared_udp_y
                && kind_x == PartitionKind::Udp
                && kind_y == PartitionKind::Udp
            {
                0.0
            } else {
                2.0 * (n as f64).ln()
            };
            kappa
                * (c_star_poly_bound(degree)
                    + C_STAR_CODING * (cx.a0 + cx.b0 + cy.a0 + cy.b0)
                    + log_term)
        }
    };
    Ok(PenaltySpec::additive(kappa_tilde * per_cell_params))
}

/// The weaker, non-additive penalty requirement for the squared-polynomial
/// family, evaluated at an explicit shape. Not usable by the optimizer (it
/// is not additive); exposed for theory-mode reporting.
pub fn penalty_poly_weak(
    degree: &DegreeVector,
    kind_x: PartitionKind,
    kind_y: PartitionKind,
    n: usize,
    d_x: usize,
    kappa: f64,
    x_leaves: usize,
    y_leaf_counts: &[usize],
) -> f64 {
    let d_y = degree.0.len();
    let cx = coding_constants(kind_x, n, d_x);
    let cy = coding_constants(kind_y, n, d_y);
    let total_cells: usize = y_leaf_counts.iter().sum();
    let dim_upper = total_cells as f64 * degree.dims_per_cell() as f64;
    let complexity_part = (c_star_poly_bound(degree)
        + 2.0 * (n as f64 / (total_cells.max(1) as f64).sqrt()).ln())
        * dim_upper;
    let coding_part =
        C_STAR_CODING * (cx.a0 + (cx.b0 + cy.a0) * x_leaves as f64 + cy.b0 * total_cells as f64);
    kappa * (complexity_part + coding_part)
}

/// Penalty for the spatial Gaussian mixture family:
/// `kappa1 dim + kappa2 D_E`, with the additive part `kappa1 (K-1)` per leaf
/// and the component block as a named extra term.
#[allow(clippy::too_many_arguments)]
pub fn penalty_gmm(
    k: usize,
    spec: &CovarianceSpec,
    e_mode: SubspaceMode,
    e_dim: usize,
    p: usize,
    d_y: usize,
    n: usize,
    kind_x: PartitionKind,
    d_x: usize,
    mode: &PenaltyMode,
    kappa2: f64,
) -> Result<PenaltySpec> {
    let kappa1 = match mode {
        PenaltyMode::Manual { kappa_tilde } => *kappa_tilde,
        PenaltyMode::Slope => {
            return Err(Error::Contract("slope mode defers the constant to calibration".into()))
        }
        PenaltyMode::Theoretical { kappa } => {
            let cx = coding_constants(kind_x, n, d_x);
            let c_star = std::f64::consts::PI; // the family constant exceeds pi
            let log_term = (n as f64 / (std::f64::consts::E * c_star)).ln().max(0.0);
            kappa * (2.0 * c_star + 1.0 + log_term + C_STAR_CODING * (cx.a0 + cx.b0 + 1.0))
        }
    };
    // Component parameters are independent of the partition size; count them
    // via a zero-leaf call so the per-leaf part stays purely additive.
    let theta_dim = spatial_gmm::dimension(0, k, spec, e_dim, d_y);
    let mut extra = vec![("theta".to_string(), kappa1 * theta_dim as f64)];
    let e_term = kappa2 * spatial_gmm::variable_selection_weight(e_mode, e_dim, p);
    if e_term != 0.0 {
        extra.push(("subspace".to_string(), e_term));
    }
    Ok(PenaltySpec { per_leaf_unit: kappa1 * (k as f64 - 1.0), extra_terms: extra })
}

/// One scored candidate.
#[derive(Debug, Clone)]
pub struct ModelRecord {
    pub id: String,
    pub dim: usize,
    pub neg_loglik: f64,
    pub penalty: f64,
    pub score: f64,
}

/// Slope-calibration output.
#[derive(Debug, Clone)]
pub struct SlopeDiagnostics {
    pub kappa_hat: f64,
    /// `(dim, -loglik)` pairs the line was fitted on.
    pub fitted_pairs: Vec<(f64, f64)>,
    /// Selected dimension along the kappa sweep `[kappa_hat, 4 kappa_hat]`.
    pub sweep: Vec<(f64, usize)>,
    /// Location of the largest dimension jump in the sweep.
    pub jump_kappa: f64,
}

/// Full report of a selection run.
#[derive(Debug, Clone)]
pub struct SelectionReport {
    pub records: Vec<ModelRecord>,
    /// Index of the chosen record.
    pub chosen: usize,
    pub slope: Option<SlopeDiagnostics>,
}

impl SelectionReport {
    pub fn chosen_record(&self) -> &ModelRecord {
        &self.records[self.chosen]
    }
}

/// Argmin of score with deterministic tie-breaking: scores within 1e-12
/// (relative) are tied; ties prefer the lower dimension, then the
/// lexicographically smaller identifier.
fn choose(records: &[ModelRecord]) -> Result<usize> {
    if records.is_empty() {
        return Err(Error::Selection("no admissible candidate".into()));
    }
    let min_score = records.iter().map(|r| r.score).fold(f64::INFINITY, f64::min);
    if !min_score.is_finite() {
        return Err(Error::Selection("all candidate scores are non-finite".into()));
    }
    let tol = 1e-12 * (1.0 + min_score.abs());
    let mut best: Option<usize> = None;
    for (i, r) in records.iter().enumerate() {
        if r.score <= min_score + tol {
            let better = match best {
                None => true,
                Some(b) => {
                    let rb = &records[b];
                    (r.dim, &r.id) < (rb.dim, &rb.id)
                }
            };
            if better {
                best = Some(i);
            }
        }
    }
    Ok(best.expect("nonempty"))
}

/// Fits and scores every candidate, returning the argmin of the penalized
/// score. `fitter` returns `(-loglik, dim, penalized cells)` per candidate;
/// fits run in parallel but the report keeps input order.
pub fn exhaustive_select<M: Sync>(
    models: &[(String, M)],
    fitter: impl Fn(&M) -> Result<(f64, usize, usize)> + Sync,
    penalty: &PenaltySpec,
) -> Result<SelectionReport> {
    if models.is_empty() {
        return Err(Error::Selection("empty model list".into()));
    }
    let fitted: Vec<Result<(f64, usize, usize)>> =
        models.par_iter().map(|(_, m)| fitter(m)).collect();
    let mut records = Vec::with_capacity(models.len());
    for ((id, _), fit) in models.iter().zip(fitted) {
        let (neg_loglik, dim, n_cells) = fit?;
        let pen = penalty.total(n_cells);
        records.push(ModelRecord {
            id: id.clone(),
            dim,
            neg_loglik,
            penalty: pen,
            score: neg_loglik + pen,
        });
    }
    let chosen = choose(&records)?;
    Ok(SelectionReport { records, chosen, slope: None })
}

/// Robust slope calibration from `(dim, -loglik)` pairs.
///
/// Requires at least 6 models spanning a fourfold dimension range. The fit
/// is Theil-Sen (median of pairwise slopes) over the largest-dimension half,
/// so small-dimension outliers cannot tilt it. Returns `kappa_hat = -slope`;
/// the usable penalty constant is `2 * kappa_hat`.
pub fn slope_calibrate(pairs: &[(f64, f64)]) -> Result<(f64, SlopeDiagnostics)> {
    if pairs.len() < 6 {
        return Err(Error::Calibration(format!(
            "need at least 6 models for slope calibration, got {}; widen the model grid",
            pairs.len()
        )));
    }
    let mut sorted: Vec<(f64, f64)> = pairs.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let min_dim = sorted.first().unwrap().0;
    let max_dim = sorted.last().unwrap().0;
    if max_dim <= 0.0 || max_dim < 4.0 * min_dim.max(1.0) {
        return Err(Error::Calibration(format!(
            "model dimensions [{min_dim}, {max_dim}] span less than a fourfold range; widen the model grid"
        )));
    }
    let upper = &sorted[sorted.len() / 2..];
    let mut slopes = Vec::new();
    for i in 0..upper.len() {
        for j in i + 1..upper.len() {
            let (d1, l1) = upper[i];
            let (d2, l2) = upper[j];
            if d2 > d1 {
                slopes.push((l2 - l1) / (d2 - d1));
            }
        }
    }
    if slopes.is_empty() {
        return Err(Error::Calibration(
            "largest-dimension half is degenerate; widen the model grid".into(),
        ));
    }
    slopes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = slopes.len() / 2;
    let slope =
        if slopes.len() % 2 == 1 { slopes[mid] } else { 0.5 * (slopes[mid - 1] + slopes[mid]) };
    let kappa_hat = (-slope).max(0.0);

    // Dimension of the selected model as kappa sweeps [kappa_hat, 4 kappa_hat].
    let mut sweep = Vec::new();
    let mut jump_kappa = kappa_hat;
    let mut largest_jump = 0usize;
    let mut prev_dim: Option<usize> = None;
    for step in 0..=64 {
        let kappa = kappa_hat * (1.0 + 3.0 * step as f64 / 64.0);
        let mut best = (f64::INFINITY, 0usize);
        for &(d, l) in &sorted {
            let score = l + kappa * d;
            if score < best.0 - 1e-12 {
                best = (score, d.round() as usize);
            }
        }
        if let Some(p) = prev_dim {
            let drop = p.saturating_sub(best.1);
            if drop > largest_jump {
                largest_jump = drop;
                jump_kappa = kappa;
            }
        }
        prev_dim = Some(best.1);
        sweep.push((kappa, best.1));
    }
    let diag = SlopeDiagnostics { kappa_hat, fitted_pairs: upper.to_vec(), sweep, jump_kappa };
    Ok((kappa_hat, diag))
}

/// Budget knobs for the partition DP.
#[derive(Debug, Clone)]
pub struct DpOptions {
    /// Maximum number of distinct cells the DP may memoize.
    pub cell_budget: usize,
    pub fit: FitOptions,
}

impl Default for DpOptions {
    fn default() -> Self {
        DpOptions { cell_budget: 200_000, fit: FitOptions::default() }
    }
}

/// Bottom-up DP over one tree-structured partition collection.
///
/// `leaf_cost(cell, rows)` is the cost of stopping at `cell` (fit term plus
/// any per-cell penalty); the optimal tree minimizes the sum over leaves.
/// Ties prefer the leaf, then the earlier split in canonical order. Rows
/// are routed to children by the same half-open convention as `leaf_of`.
fn dp_best_tree(
    kind: PartitionKind,
    n: usize,
    d: usize,
    points: &[Vec<f64>],
    leaf_cost: &mut dyn FnMut(&Hyperrectangle, &[usize]) -> Result<f64>,
    budget: usize,
) -> Result<(Node, f64)> {
    struct Ctx<'a> {
        kind: PartitionKind,
        n: usize,
        points: &'a [Vec<f64>],
        domain_upper: Vec<f64>,
        memo: HashMap<Vec<u64>, (f64, Option<usize>)>,
        budget: usize,
    }

    fn solve(
        ctx: &mut Ctx,
        cell: &Hyperrectangle,
        shape: &CellShape,
        rows: &[usize],
        leaf_cost: &mut dyn FnMut(&Hyperrectangle, &[usize]) -> Result<f64>,
    ) -> Result<f64> {
        let key = cell.byte_key();
        if let Some(hit) = ctx.memo.get(&key) {
            return Ok(hit.0);
        }
        if ctx.memo.len() >= ctx.budget {
            return Err(Error::Resource(format!(
                "partition DP visited more than {} cells",
                ctx.budget
            )));
        }
        let mut best = (leaf_cost(cell, rows)?, None);
        for (si, (_, children)) in admissible_splits(ctx.kind, ctx.n, cell, shape).iter().enumerate()
        {
            let mut total = 0.0;
            for (child, child_shape) in children {
                let child_rows: Vec<usize> = rows
                    .iter()
                    .copied()
                    .filter(|&i| child.contains(&ctx.points[i], &ctx.domain_upper))
                    .collect();
                total += solve(ctx, child, child_shape, &child_rows, leaf_cost)?;
            }
            if total < best.0 - 1e-12 {
                best = (total, Some(si));
            }
        }
        ctx.memo.insert(key, best);
        Ok(best.0)
    }

    fn rebuild(ctx: &Ctx, cell: &Hyperrectangle, shape: &CellShape) -> Node {
        let (_, choice) = ctx.memo[&cell.byte_key()];
        match choice {
            None => Node::leaf(cell.clone()),
            Some(si) => {
                let splits = admissible_splits(ctx.kind, ctx.n, cell, shape);
                let (split, children) = &splits[si];
                let nodes = children.iter().map(|(c, s)| rebuild(ctx, c, s)).collect();
                Node::internal(cell.clone(), split.clone(), nodes)
            }
        }
    }

    let root = Hyperrectangle::unit_cube(d);
    let shape = CellShape::root(kind, n, d);
    let rows: Vec<usize> = (0..points.len()).collect();
    let mut ctx = Ctx {
        kind,
        n,
        points,
        domain_upper: vec![1.0; d],
        memo: HashMap::new(),
        budget,
    };
    let score = solve(&mut ctx, &root, &shape, &rows, leaf_cost)?;
    let node = rebuild(&ctx, &root, &CellShape::root(kind, n, d));
    Ok((node, score))
}

fn member_rows(points: &[Vec<f64>], tree: &PartitionTree) -> Result<Vec<Vec<usize>>> {
    let mut rows = vec![Vec::new(); tree.num_leaves()];
    for (i, x) in points.iter().enumerate() {
        rows[tree.leaf_of(x)?.0].push(i);
    }
    Ok(rows)
}

fn member_rows_subset(
    points: &[Vec<f64>],
    rows: &[usize],
    tree: &PartitionTree,
) -> Result<Vec<Vec<usize>>> {
    let mut out = vec![Vec::new(); tree.num_leaves()];
    for &i in rows {
        out[tree.leaf_of(&points[i])?.0].push(i);
    }
    Ok(out)
}

/// `-sum_i ln(w Q^2(Y_i))` for the ML fit on one cell; closed form at
/// degree 0.
fn cell_neg_loglik(
    ys: &[Vec<f64>],
    rows: &[usize],
    n_leaf: usize,
    cell: &Hyperrectangle,
    degree: &DegreeVector,
    fit_opts: &FitOptions,
) -> f64 {
    let m = rows.len();
    if m == 0 {
        return 0.0;
    }
    let w = m as f64 / n_leaf as f64;
    if degree.dims_per_cell() == 1 {
        return -(m as f64) * (w / cell.volume()).ln();
    }
    let pts: Vec<&[f64]> = rows.iter().map(|&i| ys[i].as_slice()).collect();
    let fitted = polydens::fit_cell(&pts, n_leaf, cell, degree, fit_opts);
    let mut buf = Vec::new();
    let mut total = -(m as f64) * w.ln();
    for y in &pts {
        polydens::basis_values(cell, degree, y, &mut buf);
        let q: f64 = buf.iter().zip(&fitted.coeffs).map(|(b, c)| b * c).sum();
        total -= (q * q).max(1e-300).ln();
    }
    total
}

/// Best Y-partition for one X-leaf: inner DP (or a depth loop for the
/// uniform collection) over `-loglik + unit` per Y-cell.
fn best_y_partition(
    ys: &[Vec<f64>],
    rows: &[usize],
    n_leaf: usize,
    kind_y: PartitionKind,
    n: usize,
    d_y: usize,
    degree: &DegreeVector,
    unit: f64,
    opts: &DpOptions,
) -> Result<(PartitionTree, f64)> {
    if kind_y == PartitionKind::Udp {
        let mut best: Option<(PartitionTree, f64)> = None;
        for tree in crate::geometry::enumerate_partitions(kind_y, n, d_y, usize::MAX >> 1)? {
            let rows_per = member_rows_subset(ys, rows, &tree)?;
            let mut total = 0.0;
            for (leaf, leaf_rows) in tree.leaves().iter().zip(&rows_per) {
                total += cell_neg_loglik(ys, leaf_rows, n_leaf, leaf, degree, &opts.fit) + unit;
            }
            if best.as_ref().map_or(true, |(_, s)| total < s - 1e-12) {
                best = Some((tree, total));
            }
        }
        return best.ok_or_else(|| Error::Selection("empty uniform collection".into()));
    }
    let row_points: Vec<Vec<f64>> = rows.iter().map(|&i| ys[i].clone()).collect();
    let (node, score) = dp_best_tree(
        kind_y,
        n,
        d_y,
        &row_points,
        &mut |cell, local_rows| {
            let global: Vec<usize> = local_rows.iter().map(|&r| rows[r]).collect();
            Ok(cell_neg_loglik(ys, &global, n_leaf, cell, degree, &opts.fit) + unit)
        },
        opts.cell_budget,
    )?;
    Ok((PartitionTree::from_node(kind_y, n, node), score))
}

/// Two-level dynamic programming selection for the squared-polynomial family.
///
/// Outer DP on the X-partition; the cost of stopping at an X-cell is the
/// inner DP over its Y-partition of per-cell `-loglik + unit`. Degrees from
/// `r_candidates` are compared exhaustively. Slope mode sweeps the penalty
/// constant, calibrates on the traced-out models and refits at
/// `2 kappa_hat`.
pub fn dp_select_poly(
    data: &Dataset,
    kind_x: PartitionKind,
    kind_y: PartitionKind,
    r_candidates: &[DegreeVector],
    mode: &PenaltyMode,
    n: usize,
    opts: &DpOptions,
) -> Result<(SelectionReport, PolyModel)> {
    if !kind_x.is_tree_structured() || !kind_y.is_tree_structured() {
        return Err(Error::Contract("hrp requires exhaustive selection".into()));
    }
    if r_candidates.is_empty() {
        return Err(Error::Contract("need at least one degree candidate".into()));
    }
    if let PenaltyMode::Slope = mode {
        let pairs = dp_trace_models(data, kind_x, kind_y, r_candidates, n, opts)?;
        let (kappa_hat, diag) = slope_calibrate(&pairs)?;
        let manual = PenaltyMode::Manual { kappa_tilde: 2.0 * kappa_hat };
        let (mut report, model) =
            dp_select_poly(data, kind_x, kind_y, r_candidates, &manual, n, opts)?;
        report.slope = Some(diag);
        return Ok((report, model));
    }
    let mut records = Vec::new();
    let mut models = Vec::new();
    for degree in r_candidates {
        let pen = penalty_poly(degree, kind_x, kind_y, n, data.d_x, mode, false)?;
        let (model, record) = dp_run(data, kind_x, kind_y, degree, pen.per_leaf_unit, n, opts)?;
        records.push(record);
        models.push(model);
    }
    let chosen = choose(&records)?;
    let model = models.swap_remove(chosen);
    Ok((SelectionReport { records, chosen, slope: None }, model))
}

/// One DP run at a fixed degree and per-cell unit.
fn dp_run(
    data: &Dataset,
    kind_x: PartitionKind,
    kind_y: PartitionKind,
    degree: &DegreeVector,
    unit: f64,
    n: usize,
    opts: &DpOptions,
) -> Result<(PolyModel, ModelRecord)> {
    let mut leaf_cost = |_cell: &Hyperrectangle, rows: &[usize]| -> Result<f64> {
        let (_, cost) =
            best_y_partition(&data.y, rows, rows.len(), kind_y, n, data.d_y, degree, unit, opts)?;
        Ok(cost)
    };
    let (x_tree, score) = if kind_x == PartitionKind::Udp {
        let mut best: Option<(PartitionTree, f64)> = None;
        for tree in crate::geometry::enumerate_partitions(kind_x, n, data.d_x, usize::MAX >> 1)? {
            let rows_per = member_rows(&data.x, &tree)?;
            let mut total = 0.0;
            for (leaf, rows) in tree.leaves().iter().zip(&rows_per) {
                total += leaf_cost(leaf, rows)?;
            }
            if best.as_ref().map_or(true, |(_, s)| total < s - 1e-12) {
                best = Some((tree, total));
            }
        }
        best.ok_or_else(|| Error::Selection("empty uniform collection".into()))?
    } else {
        let (node, score) =
            dp_best_tree(kind_x, n, data.d_x, &data.x, &mut leaf_cost, opts.cell_budget)?;
        (PartitionTree::from_node(kind_x, n, node), score)
    };

    // Materialize the model with the chosen Y-partition per leaf.
    let rows_per = member_rows(&data.x, &x_tree)?;
    let mut y_trees = Vec::with_capacity(x_tree.num_leaves());
    for rows in &rows_per {
        let (tree, _) =
            best_y_partition(&data.y, rows, rows.len(), kind_y, n, data.d_y, degree, unit, opts)?;
        y_trees.push(tree);
    }
    let model = polydens::fit(data, &x_tree, &y_trees, degree, &opts.fit)?;
    let neg_loglik = model.neg_loglik(data)?;
    let (dim, _) = model.dimension();
    let n_cells: usize = y_trees.iter().map(|t| t.num_leaves()).sum();
    let record = ModelRecord {
        id: model.id_string(),
        dim,
        neg_loglik,
        penalty: unit * n_cells as f64,
        score,
    };
    Ok((model, record))
}

/// Runs the DP across a geometric sweep of penalty constants and returns the
/// distinct `(dim, -loglik)` pairs traced out, for slope calibration.
fn dp_trace_models(
    data: &Dataset,
    kind_x: PartitionKind,
    kind_y: PartitionKind,
    r_candidates: &[DegreeVector],
    n: usize,
    opts: &DpOptions,
) -> Result<Vec<(f64, f64)>> {
    let mut pairs: HashMap<String, (f64, f64)> = HashMap::new();
    let scale = (data.len() as f64).ln().max(1.0);
    for step in 0..12 {
        let kappa = scale * 2f64.powi(step - 5);
        for degree in r_candidates {
            let unit = kappa * degree.dims_per_cell() as f64;
            let (model, record) = dp_run(data, kind_x, kind_y, degree, unit, n, opts)?;
            pairs.entry(model.id_string()).or_insert((record.dim as f64, record.neg_loglik));
        }
    }
    Ok(pairs.into_values().collect())
}

/// Exhaustive candidate shapes for the polynomial family (every X-tree in
/// the collection crossed with every per-leaf assignment of Y-trees); the
/// DP oracle in tests.
#[allow(clippy::too_many_arguments)]
pub fn enumerate_poly_shapes(
    kind_x: PartitionKind,
    kind_y: PartitionKind,
    n: usize,
    d_x: usize,
    d_y: usize,
    max_x_leaves: usize,
    max_y_leaves: usize,
    budget: usize,
) -> Result<Vec<(PartitionTree, Vec<PartitionTree>)>> {
    let x_trees =
        crate::geometry::enumerate_partitions_budgeted(kind_x, n, d_x, max_x_leaves, budget)?;
    let y_options =
        crate::geometry::enumerate_partitions_budgeted(kind_y, n, d_y, max_y_leaves, budget)?;
    let mut out = Vec::new();
    for x_tree in x_trees {
        let leaves = x_tree.num_leaves();
        let combos = y_options.len().pow(leaves as u32);
        if out.len() + combos > budget {
            return Err(Error::Resource(format!("more than {budget} candidate shapes")));
        }
        for combo in 0..combos {
            let mut pick = combo;
            let mut ys = Vec::with_capacity(leaves);
            for _ in 0..leaves {
                ys.push(y_options[pick % y_options.len()].clone());
                pick /= y_options.len();
            }
            out.push((x_tree.clone(), ys));
        }
    }
    Ok(out)
}

/// Alternating selection for the mixture family: EM with the partition
/// fixed, then a partition DP with the components fixed (per-leaf optimal
/// proportions give additive scores), until the penalized score stops
/// improving; at most 10 rounds. Candidates over `(K, spec, E)` are
/// compared exhaustively.
#[allow(clippy::too_many_arguments)]
pub fn dp_select_gmm(
    data: &Dataset,
    kind_x: PartitionKind,
    k_range: &[usize],
    specs: &[CovarianceSpec],
    e_candidates: &[(SubspaceMode, Vec<usize>)],
    mode: &PenaltyMode,
    n: usize,
    em_opts: &EmOptions,
    dp_opts: &DpOptions,
) -> Result<(SelectionReport, EmFit)> {
    if k_range.is_empty() || specs.is_empty() {
        return Err(Error::Contract("need candidate component counts and specs".into()));
    }
    let e_list: Vec<(SubspaceMode, Vec<usize>)> = if e_candidates.is_empty() {
        vec![(SubspaceMode::Known, (0..data.d_y).collect())]
    } else {
        e_candidates.to_vec()
    };

    if matches!(mode, PenaltyMode::Slope) {
        let mut pairs: HashMap<String, (f64, f64)> = HashMap::new();
        let scale = (data.len() as f64).ln().max(1.0);
        for step in 0..10 {
            let kappa = scale * 2f64.powi(step - 4);
            let manual = PenaltyMode::Manual { kappa_tilde: kappa };
            let (report, _) =
                dp_select_gmm(data, kind_x, k_range, specs, &e_list, &manual, n, em_opts, dp_opts)?;
            for r in &report.records {
                pairs.entry(r.id.clone()).or_insert((r.dim as f64, r.neg_loglik));
            }
        }
        let flat: Vec<(f64, f64)> = pairs.into_values().collect();
        let (kappa_hat, diag) = slope_calibrate(&flat)?;
        let manual = PenaltyMode::Manual { kappa_tilde: 2.0 * kappa_hat };
        let (mut report, fit) =
            dp_select_gmm(data, kind_x, k_range, specs, &e_list, &manual, n, em_opts, dp_opts)?;
        report.slope = Some(diag);
        return Ok((report, fit));
    }

    let mut records = Vec::new();
    let mut fits = Vec::new();
    let mut failures = Vec::new();
    for &k in k_range {
        for spec in specs {
            for (e_mode, e_indices) in &e_list {
                let kappa = match mode {
                    PenaltyMode::Manual { kappa_tilde } => *kappa_tilde,
                    PenaltyMode::Theoretical { kappa } => *kappa,
                    PenaltyMode::Slope => unreachable!(),
                };
                let pen = penalty_gmm(
                    k,
                    spec,
                    *e_mode,
                    e_indices.len(),
                    data.d_y,
                    data.d_y,
                    n,
                    kind_x,
                    data.d_x,
                    mode,
                    kappa,
                )?;
                match alternate_one_candidate(
                    data, kind_x, k, spec, e_indices, &pen, n, em_opts, dp_opts,
                ) {
                    Ok((fit, record)) => {
                        records.push(record);
                        fits.push(fit);
                    }
                    Err(Error::Degenerate { component, message }) => {
                        failures.push(format!(
                            "K={k} {}: component {component}: {message}",
                            spec.id_string()
                        ));
                    }
                    Err(e) => return Err(e),
                }
            }
        }
    }
    if records.is_empty() {
        return Err(Error::Selection(format!(
            "all candidates degenerate: {}",
            failures.join("; ")
        )));
    }
    let chosen = choose(&records)?;
    let fit = fits.swap_remove(chosen);
    Ok((SelectionReport { records, chosen, slope: None }, fit))
}

#[allow(clippy::too_many_arguments)]
fn alternate_one_candidate(
    data: &Dataset,
    kind_x: PartitionKind,
    k: usize,
    spec: &CovarianceSpec,
    e_indices: &[usize],
    pen: &PenaltySpec,
    n: usize,
    em_opts: &EmOptions,
    dp_opts: &DpOptions,
) -> Result<(EmFit, ModelRecord)> {
    let mut opts = em_opts.clone();
    opts.e_indices = Some(e_indices.to_vec());
    let mut x_tree = PartitionTree::root_only(kind_x, n, data.d_x);
    let mut fit = em_fit(data, &x_tree, k, spec, &opts)?;
    let mut score = -fit.loglik() + pen.total(x_tree.num_leaves());

    for _round in 0..10 {
        // Partition step: components fixed, per-cell optimal proportions.
        let ys_e: Vec<Vec<f64>> =
            data.y.iter().map(|y| e_indices.iter().map(|&j| y[j]).collect()).collect();
        let log_dens = component_log_densities(&fit.model.components, &ys_e);
        let mut leaf_cost = |_cell: &Hyperrectangle, rows: &[usize]| -> Result<f64> {
            let (_, nll) = optimal_proportions(&log_dens, rows, k);
            Ok(nll + pen.per_leaf_unit)
        };
        let cand_tree = if kind_x == PartitionKind::Udp {
            let mut best: Option<(PartitionTree, f64)> = None;
            for tree in crate::geometry::enumerate_partitions(kind_x, n, data.d_x, usize::MAX >> 1)?
            {
                let rows_per = member_rows(&data.x, &tree)?;
                let mut total = 0.0;
                for (leaf, rows) in tree.leaves().iter().zip(&rows_per) {
                    total += leaf_cost(leaf, rows)?;
                }
                if best.as_ref().map_or(true, |(_, s)| total < s - 1e-12) {
                    best = Some((tree, total));
                }
            }
            best.map(|(t, _)| t).ok_or_else(|| Error::Selection("empty collection".into()))?
        } else {
            let (node, _) =
                dp_best_tree(kind_x, n, data.d_x, &data.x, &mut leaf_cost, dp_opts.cell_budget)?;
            PartitionTree::from_node(kind_x, n, node)
        };
        if cand_tree == x_tree {
            break;
        }
        // EM warm-started from the DP proportions and current components.
        let rows_per = member_rows(&data.x, &cand_tree)?;
        let proportions: Vec<Vec<f64>> =
            rows_per.iter().map(|rows| optimal_proportions(&log_dens, rows, k).0).collect();
        let warm = EmOptions {
            init: EmInit::Warm { components: fit.model.components.clone(), proportions },
            e_indices: Some(e_indices.to_vec()),
            ..em_opts.clone()
        };
        let cand_fit = em_fit(data, &cand_tree, k, spec, &warm)?;
        let cand_score = -cand_fit.loglik() + pen.total(cand_tree.num_leaves());
        if cand_score < score - 1e-9 {
            x_tree = cand_tree;
            fit = cand_fit;
            score = cand_score;
        } else {
            break;
        }
    }

    let dim = spatial_gmm::dimension(x_tree.num_leaves(), k, spec, e_indices.len(), data.d_y);
    let record = ModelRecord {
        id: format!("{};spec={}", fit.model.id_string(), spec.id_string()),
        dim,
        neg_loglik: -fit.loglik(),
        penalty: pen.total(x_tree.num_leaves()),
        score,
    };
    Ok((fit, record))
}
