//! Piecewise squared-polynomial conditional densities on product partitions.
//!
//! A model is an X-partition, one Y-partition per X-leaf, and on every
//! (X-leaf, Y-cell) product a polynomial `Q` of unit L2 norm on the cell
//! together with a weight `w` (the leaf-conditional mass of the cell); the
//! conditional density is `s(y|x) = w Q^2(y)` on the matching cell, so each
//! leaf conditional integrates to one. Fitting decomposes cell by cell: `w`
//! is the count ratio and `Q` maximizes `sum_i ln Q^2(Y_i)` over the unit
//! sphere of orthonormal-basis coefficients.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::dataset::Dataset;
use crate::divergence::ConditionalDensity;
use crate::geometry::{Hyperrectangle, LeafId, PartitionTree};
use crate::{derive_seed, Error, Result};

/// Maximum polynomial degree per response axis.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DegreeVector(pub Vec<usize>);

impl DegreeVector {
    pub fn constant(d_y: usize) -> Self {
        DegreeVector(vec![0; d_y])
    }

    pub fn dims_per_cell(&self) -> usize {
        self.0.iter().map(|r| r + 1).product()
    }

    pub fn validate(&self, max_degree: usize) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::Contract("degree vector must be nonempty".into()));
        }
        if self.0.iter().any(|&r| r > max_degree) {
            return Err(Error::Contract(format!("degree above the configured maximum {max_degree}")));
        }
        Ok(())
    }

    pub fn id_string(&self) -> String {
        let parts: Vec<String> = self.0.iter().map(|r| r.to_string()).collect();
        format!("({})", parts.join(","))
    }
}

/// Values of the orthonormal (rescaled shifted-Legendre) basis on `[0,1]`:
/// `G_k = sqrt(2k+1) L_k`, `int_0^1 G_j G_k = delta_jk`.
fn legendre_values(max_degree: usize, t: f64, out: &mut Vec<f64>) {
    out.clear();
    let u = 2.0 * t - 1.0;
    let mut prev = 1.0f64;
    let mut cur = u;
    out.push(1.0);
    if max_degree == 0 {
        return;
    }
    out.push(3f64.sqrt() * cur);
    for k in 1..max_degree {
        let next = ((2 * k + 1) as f64 * u * cur - k as f64 * prev) / (k + 1) as f64;
        prev = cur;
        cur = next;
        out.push(((2 * (k + 1) + 1) as f64).sqrt() * cur);
    }
}

/// All product-basis values on a cell at `y`, flattened row-major with the
/// last axis fastest; includes the `1/sqrt(|cell|)` rescaling that makes the
/// family orthonormal on the cell.
pub(crate) fn basis_values(cell: &Hyperrectangle, degree: &DegreeVector, y: &[f64], out: &mut Vec<f64>) {
    let d = degree.0.len();
    let mut per_axis: Vec<Vec<f64>> = Vec::with_capacity(d);
    for j in 0..d {
        let width = cell.upper()[j] - cell.lower()[j];
        let t = ((y[j] - cell.lower()[j]) / width).clamp(0.0, 1.0);
        let mut vals = Vec::with_capacity(degree.0[j] + 1);
        legendre_values(degree.0[j], t, &mut vals);
        per_axis.push(vals);
    }
    let scale = 1.0 / cell.volume().sqrt();
    out.clear();
    out.resize(degree.dims_per_cell(), 0.0);
    let mut idx = vec![0usize; d];
    for slot in out.iter_mut() {
        let mut v = scale;
        for j in 0..d {
            v *= per_axis[j][idx[j]];
        }
        *slot = v;
        let mut j = d;
        loop {
            if j == 0 {
                break;
            }
            j -= 1;
            idx[j] += 1;
            if idx[j] <= degree.0[j] {
                break;
            }
            idx[j] = 0;
        }
    }
}

/// One (X-leaf, Y-cell) block: unit-norm coefficients of `Q` in the cell's
/// orthonormal basis, and the leaf-conditional mass of the cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellPoly {
    pub coeffs: Vec<f64>,
    pub weight: f64,
}

impl CellPoly {
    fn uniform(degree: &DegreeVector, weight: f64) -> Self {
        let mut coeffs = vec![0.0; degree.dims_per_cell()];
        coeffs[0] = 1.0;
        CellPoly { coeffs, weight }
    }
}

/// Options for the per-cell sphere solver.
#[derive(Debug, Clone)]
pub struct FitOptions {
    pub max_degree: usize,
    pub restarts: usize,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { max_degree: 4, restarts: 8, max_iter: 500, grad_tol: 1e-8, seed: 0 }
    }
}

const LOG_FLOOR: f64 = -690.775527898213_f64; // ln 1e-300

/// `sum_i ln Q^2(Y_i)` with the objective clipped at `ln 1e-300` per point.
fn sphere_objective(basis: &[Vec<f64>], beta: &[f64]) -> f64 {
    basis
        .iter()
        .map(|b| {
            let q: f64 = b.iter().zip(beta).map(|(bi, ci)| bi * ci).sum();
            let q2 = q * q;
            if q2 < 1e-300 {
                LOG_FLOOR
            } else {
                q2.ln()
            }
        })
        .sum()
}

fn sphere_gradient(basis: &[Vec<f64>], beta: &[f64], grad: &mut [f64]) {
    grad.iter_mut().for_each(|g| *g = 0.0);
    for b in basis {
        let q: f64 = b.iter().zip(beta.iter()).map(|(bi, ci)| bi * ci).sum();
        if q.abs() < 1e-150 {
            continue;
        }
        let f = 2.0 / q;
        for (g, bi) in grad.iter_mut().zip(b) {
            *g += f * bi;
        }
    }
}

fn normalize(beta: &mut [f64]) {
    let norm = beta.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        beta.iter_mut().for_each(|v| *v /= norm);
    }
}

/// Projected gradient ascent on the unit sphere from one start.
fn sphere_ascend(basis: &[Vec<f64>], start: Vec<f64>, opts: &FitOptions) -> (Vec<f64>, f64) {
    let dim = start.len();
    let mut beta = start;
    normalize(&mut beta);
    let mut obj = sphere_objective(basis, &beta);
    let mut step = 1.0 / (1.0 + basis.len() as f64);
    let mut grad = vec![0.0; dim];
    for _ in 0..opts.max_iter {
        sphere_gradient(basis, &beta, &mut grad);
        let radial: f64 = grad.iter().zip(&beta).map(|(g, b)| g * b).sum();
        let mut tangent = vec![0.0; dim];
        let mut tnorm = 0.0;
        for j in 0..dim {
            tangent[j] = grad[j] - radial * beta[j];
            tnorm += tangent[j] * tangent[j];
        }
        if tnorm.sqrt() <= opts.grad_tol {
            break;
        }
        let mut improved = false;
        for _ in 0..40 {
            let mut cand: Vec<f64> = beta.iter().zip(&tangent).map(|(b, t)| b + step * t).collect();
            normalize(&mut cand);
            let cand_obj = sphere_objective(basis, &cand);
            if cand_obj > obj {
                beta = cand;
                obj = cand_obj;
                step *= 1.5;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    (beta, obj)
}

/// Maximum likelihood fit on one cell.
///
/// `points` are the responses falling in the cell; `n_leaf` is the number of
/// covariates in the enclosing X-leaf. Empty cells fall back to a flat `Q`
/// with weight zero.
pub fn fit_cell(
    points: &[&[f64]],
    n_leaf: usize,
    cell: &Hyperrectangle,
    degree: &DegreeVector,
    opts: &FitOptions,
) -> CellPoly {
    let weight = if n_leaf == 0 { 0.0 } else { points.len() as f64 / n_leaf as f64 };
    let dim = degree.dims_per_cell();
    if points.is_empty() || dim == 1 {
        return CellPoly::uniform(degree, weight);
    }
    let mut basis = Vec::with_capacity(points.len());
    let mut buf = Vec::new();
    for y in points {
        basis_values(cell, degree, y, &mut buf);
        basis.push(buf.clone());
    }
    // Restarts: the flat polynomial plus random unit vectors; ties break
    // toward the first start found.
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut uniform = vec![0.0; dim];
    uniform[0] = 1.0;
    let cell_seed = cell.byte_key().iter().fold(opts.seed, |acc, b| derive_seed(acc, *b));
    let mut rng = ChaCha12Rng::seed_from_u64(cell_seed);
    let mut starts = vec![uniform];
    for _ in 0..opts.restarts {
        let v: Vec<f64> = (0..dim).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        starts.push(v);
    }
    for start in starts {
        let (beta, obj) = sphere_ascend(&basis, start, opts);
        if best.as_ref().map_or(true, |(_, b)| obj > *b) {
            best = Some((beta, obj));
        }
    }
    let (mut coeffs, _) = best.expect("at least one start");
    // Canonical sign: leading coefficient nonnegative (Q and -Q coincide).
    if let Some(first) = coeffs.iter().find(|c| c.abs() > 1e-12) {
        if *first < 0.0 {
            coeffs.iter_mut().for_each(|c| *c = -*c);
        }
    }
    CellPoly { coeffs, weight }
}

/// A fitted piecewise squared-polynomial conditional density.
#[derive(Debug, Clone, PartialEq)]
pub struct PolyModel {
    pub x_tree: PartitionTree,
    pub y_trees: Vec<PartitionTree>,
    /// `cells[x_leaf][y_leaf]`.
    pub cells: Vec<Vec<CellPoly>>,
    pub degree: DegreeVector,
}

impl PolyModel {
    /// Builds a degree-0 model directly from per-leaf cell weights.
    pub fn histogram(x_tree: PartitionTree, y_trees: Vec<PartitionTree>, weights: Vec<Vec<f64>>) -> Result<Self> {
        if y_trees.len() != x_tree.num_leaves() || weights.len() != y_trees.len() {
            return Err(Error::Contract("one y-partition and weight vector per x-leaf".into()));
        }
        let d_y = y_trees[0].dim();
        let degree = DegreeVector::constant(d_y);
        let mut cells = Vec::with_capacity(weights.len());
        for (tree, ws) in y_trees.iter().zip(&weights) {
            if ws.len() != tree.num_leaves() {
                return Err(Error::Contract("weight count must match the y-partition".into()));
            }
            let total: f64 = ws.iter().sum();
            if ws.iter().any(|w| *w < 0.0) || (total - 1.0).abs() > 1e-10 {
                return Err(Error::Contract("cell weights must be a probability vector".into()));
            }
            cells.push(ws.iter().map(|&w| CellPoly { coeffs: vec![1.0], weight: w }).collect());
        }
        Ok(PolyModel { x_tree, y_trees, cells, degree })
    }

    /// `ln s(y|x)`; `-inf` where the fitted density vanishes.
    pub fn log_density_checked(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        let xid = self.x_tree.leaf_of(x)?;
        let y_tree = &self.y_trees[xid.0];
        let yid = y_tree.leaf_of(y)?;
        Ok(self.cell_log_density(xid, yid, y))
    }

    fn cell_log_density(&self, xid: LeafId, yid: LeafId, y: &[f64]) -> f64 {
        let cell = &self.cells[xid.0][yid.0];
        if cell.weight <= 0.0 {
            return f64::NEG_INFINITY;
        }
        let rect = self.y_trees[xid.0].leaf_cell(yid);
        if cell.coeffs.len() == 1 {
            // Histogram fast path: Q^2 = 1 / |cell|.
            return (cell.weight / rect.volume()).ln();
        }
        let mut buf = Vec::with_capacity(cell.coeffs.len());
        basis_values(rect, &self.degree, y, &mut buf);
        let q: f64 = buf.iter().zip(&cell.coeffs).map(|(b, c)| b * c).sum();
        let val = cell.weight * q * q;
        if val <= 0.0 {
            f64::NEG_INFINITY
        } else {
            val.ln()
        }
    }

    /// Total `-log-likelihood` of a dataset; equals the sum of the per-cell
    /// contributions, which is what the selection DP exploits.
    pub fn neg_loglik(&self, data: &Dataset) -> Result<f64> {
        let mut total = 0.0;
        for (x, y) in data.x.iter().zip(&data.y) {
            total -= self.log_density_checked(x, y)?;
        }
        Ok(total)
    }

    /// `(dim, upper bound)` parameter counts of the model shape.
    pub fn dimension(&self) -> (usize, usize) {
        let y_leaves: Vec<usize> = self.y_trees.iter().map(|t| t.num_leaves()).collect();
        shape_dimension(&y_leaves, &self.degree)
    }

    pub fn id_string(&self) -> String {
        let ys: Vec<String> = self.y_trees.iter().map(|t| t.id_string()).collect();
        format!("x={};y=[{}];r={}", self.x_tree.id_string(), ys.join("|"), self.degree.id_string())
    }

    /// Draws a response: pick a Y-cell by weight, then sample `Q^2` inside
    /// it (uniform for degree 0, rejection otherwise).
    pub fn sample_response(&self, x: &[f64], rng: &mut ChaCha12Rng) -> Result<Vec<f64>> {
        let xid = self.x_tree.leaf_of(x)?;
        let cells = &self.cells[xid.0];
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = cells.len() - 1;
        for (k, cell) in cells.iter().enumerate() {
            acc += cell.weight;
            if u < acc {
                chosen = k;
                break;
            }
        }
        let rect = self.y_trees[xid.0].leaf_cell(LeafId(chosen));
        let cell = &cells[chosen];
        let d = rect.dim();
        let draw_uniform = |rng: &mut ChaCha12Rng| -> Vec<f64> {
            (0..d).map(|j| rng.random_range(rect.lower()[j]..rect.upper()[j])).collect()
        };
        if self.degree.dims_per_cell() == 1 {
            return Ok(draw_uniform(rng));
        }
        // sup Q^2 <= (sum_k |beta_k| ||g_k||_inf)^2
        let sup_norms = basis_sup_norms(rect, &self.degree);
        let bound: f64 = cell
            .coeffs
            .iter()
            .zip(&sup_norms)
            .map(|(c, s)| c.abs() * s)
            .sum::<f64>()
            .powi(2);
        let expected_tries = bound * rect.volume();
        if expected_tries > 1000.0 {
            return Err(Error::Sampler(format!(
                "rejection acceptance below 1e-3 on a cell (bound {expected_tries:.1})"
            )));
        }
        let mut buf = Vec::new();
        for _ in 0..200_000 {
            let y = draw_uniform(rng);
            basis_values(rect, &self.degree, &y, &mut buf);
            let q: f64 = buf.iter().zip(&cell.coeffs).map(|(b, c)| b * c).sum();
            if rng.random::<f64>() * bound <= q * q {
                return Ok(y);
            }
        }
        Err(Error::Sampler("rejection sampling exhausted its draw budget".into()))
    }
}

impl ConditionalDensity for PolyModel {
    fn x_dim(&self) -> usize {
        self.x_tree.dim()
    }

    fn y_dim(&self) -> usize {
        self.degree.0.len()
    }

    fn log_density(&self, x: &[f64], y: &[f64]) -> f64 {
        self.log_density_checked(x, y).unwrap_or(f64::NEG_INFINITY)
    }

    fn sample_y(&self, x: &[f64], rng: &mut ChaCha12Rng) -> Option<Vec<f64>> {
        self.sample_response(x, rng).ok()
    }
}

fn basis_sup_norms(cell: &Hyperrectangle, degree: &DegreeVector) -> Vec<f64> {
    let d = degree.0.len();
    let scale = 1.0 / cell.volume().sqrt();
    let mut out = vec![scale; degree.dims_per_cell()];
    let mut idx = vec![0usize; d];
    for slot in out.iter_mut() {
        for j in 0..d {
            *slot *= ((2 * idx[j] + 1) as f64).sqrt();
        }
        let mut j = d;
        loop {
            if j == 0 {
                break;
            }
            j -= 1;
            idx[j] += 1;
            if idx[j] <= degree.0[j] {
                break;
            }
            idx[j] = 0;
        }
    }
    out
}

/// `dim = sum_l (|P_y_l| prod(r_d + 1) - 1)` and the upper bound
/// `D = |P_cross| prod(r_d + 1)`.
pub fn shape_dimension(y_leaf_counts: &[usize], degree: &DegreeVector) -> (usize, usize) {
    let per_cell = degree.dims_per_cell();
    let dim = y_leaf_counts.iter().map(|k| k * per_cell - 1).sum();
    let total_cells: usize = y_leaf_counts.iter().sum();
    (dim, total_cells * per_cell)
}

/// Fits the model on `data` for fixed partitions and degree.
///
/// X-leaves with no data get the uniform conditional density on the unit
/// cube, contributing nothing to the log-likelihood.
pub fn fit(
    data: &Dataset,
    x_tree: &PartitionTree,
    y_trees: &[PartitionTree],
    degree: &DegreeVector,
    opts: &FitOptions,
) -> Result<PolyModel> {
    degree.validate(opts.max_degree)?;
    if y_trees.len() != x_tree.num_leaves() {
        return Err(Error::Contract("need one y-partition per x-leaf".into()));
    }
    if degree.0.len() != data.d_y {
        return Err(Error::Contract("degree vector length must equal the response dimension".into()));
    }
    let n_x_leaves = x_tree.num_leaves();
    let mut member: Vec<Vec<usize>> = vec![Vec::new(); n_x_leaves];
    for (i, x) in data.x.iter().enumerate() {
        member[x_tree.leaf_of(x)?.0].push(i);
    }
    let mut cells = Vec::with_capacity(n_x_leaves);
    for (l, idxs) in member.iter().enumerate() {
        let y_tree = &y_trees[l];
        let leaves = y_tree.leaves();
        if idxs.is_empty() {
            // Empty X-leaf: the uniform conditional density (cell mass equal
            // to cell volume), so the leaf conditional still integrates to 1.
            let fitted: Vec<CellPoly> = leaves
                .iter()
                .map(|cell| CellPoly { weight: cell.volume(), ..CellPoly::uniform(degree, 0.0) })
                .collect();
            cells.push(fitted);
            continue;
        }
        let mut per_cell: Vec<Vec<&[f64]>> = vec![Vec::new(); y_tree.num_leaves()];
        for &i in idxs {
            let yid = y_tree.leaf_of(&data.y[i])?;
            per_cell[yid.0].push(data.y[i].as_slice());
        }
        let fitted: Vec<CellPoly> = per_cell
            .iter()
            .zip(&leaves)
            .map(|(pts, cell)| fit_cell(pts, idxs.len(), cell, degree, opts))
            .collect();
        cells.push(fitted);
    }
    Ok(PolyModel { x_tree: x_tree.clone(), y_trees: y_trees.to_vec(), cells, degree: degree.clone() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::PartitionKind;

    fn dataset(xs: Vec<Vec<f64>>, ys: Vec<Vec<f64>>) -> Dataset {
        let d_x = xs[0].len();
        let d_y = ys[0].len();
        Dataset { x: xs, y: ys, d_x, d_y }
    }

    #[test]
    fn legendre_orthonormal_on_unit_interval() {
        // Midpoint quadrature of G_j G_k over [0,1].
        let m = 20_000;
        for j in 0..=3usize {
            for k in 0..=3usize {
                let mut acc = 0.0;
                let mut buf = Vec::new();
                for i in 0..m {
                    let t = (i as f64 + 0.5) / m as f64;
                    legendre_values(3, t, &mut buf);
                    acc += buf[j] * buf[k] / m as f64;
                }
                let expect = if j == k { 1.0 } else { 0.0 };
                assert!((acc - expect).abs() < 1e-6, "G_{j} G_{k} -> {acc}");
            }
        }
    }

    #[test]
    fn histogram_cell_density() {
        // 3 of 10 leaf points in a cell of volume 0.25 -> density 1.2.
        let cell = Hyperrectangle::new(vec![0.0], vec![0.25]).unwrap();
        let pts: Vec<Vec<f64>> = vec![vec![0.1], vec![0.2], vec![0.15]];
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let fitted = fit_cell(&refs, 10, &cell, &DegreeVector::constant(1), &FitOptions::default());
        assert_eq!(fitted.weight, 0.3);
        assert_eq!(fitted.coeffs, vec![1.0]);
        // density = w / |cell| = 0.3 / 0.25 = 1.2
        let mut buf = Vec::new();
        basis_values(&cell, &DegreeVector::constant(1), &[0.1], &mut buf);
        let dens = fitted.weight * buf[0] * buf[0];
        assert!((dens - 1.2).abs() < 1e-12);
    }

    #[test]
    fn all_points_in_one_cell() {
        let cell = Hyperrectangle::new(vec![0.0], vec![1.0]).unwrap();
        let pts: Vec<Vec<f64>> = (0..5).map(|i| vec![i as f64 / 5.0]).collect();
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let fitted = fit_cell(&refs, 5, &cell, &DegreeVector::constant(1), &FitOptions::default());
        assert_eq!(fitted.weight, 1.0);
    }

    #[test]
    fn sphere_solver_matches_circle_scan() {
        let cell = Hyperrectangle::new(vec![0.0], vec![0.5]).unwrap();
        let pts: Vec<Vec<f64>> = vec![vec![0.1], vec![0.2], vec![0.15]];
        let refs: Vec<&[f64]> = pts.iter().map(|p| p.as_slice()).collect();
        let degree = DegreeVector(vec![1]);
        let fitted = fit_cell(&refs, 3, &cell, &degree, &FitOptions::default());
        let norm: f64 = fitted.coeffs.iter().map(|c| c * c).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-10);

        let mut basis = Vec::new();
        let mut buf = Vec::new();
        for y in &pts {
            basis_values(&cell, &degree, y, &mut buf);
            basis.push(buf.clone());
        }
        let solver_obj = sphere_objective(&basis, &fitted.coeffs);
        let mut grid_best = f64::NEG_INFINITY;
        let m = 100_000;
        for i in 0..m {
            let theta = std::f64::consts::PI * i as f64 / m as f64;
            let beta = [theta.cos(), theta.sin()];
            grid_best = grid_best.max(sphere_objective(&basis, &beta));
        }
        assert!((solver_obj - grid_best).abs() < 1e-6, "{solver_obj} vs {grid_best}");

        // KKT: projected gradient vanishes at the solution.
        let mut grad = vec![0.0; 2];
        sphere_gradient(&basis, &fitted.coeffs, &mut grad);
        let radial: f64 = grad.iter().zip(&fitted.coeffs).map(|(g, b)| g * b).sum();
        let residual: f64 = grad
            .iter()
            .zip(&fitted.coeffs)
            .map(|(g, b)| (g - radial * b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(residual < 1e-6, "KKT residual {residual}");
    }

    #[test]
    fn fit_uniform_on_single_leaf() {
        let data = dataset(vec![vec![0.2], vec![0.8]], vec![vec![0.3], vec![0.6]]);
        let x_tree = PartitionTree::root_only(PartitionKind::Rdp, 2, 1);
        let y_trees = vec![PartitionTree::root_only(PartitionKind::Rdp, 2, 1)];
        let model = fit(&data, &x_tree, &y_trees, &DegreeVector::constant(1), &FitOptions::default()).unwrap();
        assert_eq!(model.neg_loglik(&data).unwrap(), 0.0);
        assert_eq!(model.log_density_checked(&[0.5], &[0.5]).unwrap(), 0.0);
        assert_eq!(model.dimension(), (0, 1));
    }

    #[test]
    fn fit_two_leaf_histogram() {
        // X split at 0.5, Y split at 0.5, counts (3,7) / (4,6).
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for i in 0..10 {
            xs.push(vec![0.25]);
            ys.push(vec![if i < 3 { 0.25 } else { 0.75 }]);
        }
        for i in 0..10 {
            xs.push(vec![0.75]);
            ys.push(vec![if i < 4 { 0.25 } else { 0.75 }]);
        }
        let data = dataset(xs, ys);
        let x_tree = PartitionTree::uniform(PartitionKind::Rdp, 32, 1, 1);
        let y_trees = vec![
            PartitionTree::uniform(PartitionKind::Rdp, 32, 1, 1),
            PartitionTree::uniform(PartitionKind::Rdp, 32, 1, 1),
        ];
        let model = fit(&data, &x_tree, &y_trees, &DegreeVector::constant(1), &FitOptions::default()).unwrap();
        assert_eq!(model.cells[0][0].weight, 0.3);
        assert_eq!(model.cells[0][1].weight, 0.7);
        assert_eq!(model.cells[1][0].weight, 0.4);
        assert_eq!(model.cells[1][1].weight, 0.6);
        // ln density in the (x<0.5, y<0.5) cell: w / |cell| = 0.3/0.5.
        let ld = model.log_density_checked(&[0.1], &[0.1]).unwrap();
        assert!((ld - (0.6f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn dimension_examples() {
        let r1 = DegreeVector(vec![1]);
        assert_eq!(shape_dimension(&[2, 2], &r1), (6, 8));
        let r0 = DegreeVector(vec![0]);
        assert_eq!(shape_dimension(&[1], &r0), (0, 1));
        assert_eq!(shape_dimension(&[5], &r0), (4, 5)); // K cells -> K-1
    }

    #[test]
    fn empty_leaf_falls_back_to_uniform() {
        let data = dataset(vec![vec![0.1]], vec![vec![0.5]]);
        let x_tree = PartitionTree::uniform(PartitionKind::Rdp, 32, 1, 1);
        let y_trees = vec![
            PartitionTree::root_only(PartitionKind::Rdp, 32, 1),
            PartitionTree::uniform(PartitionKind::Rdp, 32, 1, 1),
        ];
        let model = fit(&data, &x_tree, &y_trees, &DegreeVector::constant(1), &FitOptions::default()).unwrap();
        // The empty leaf carries the uniform density: cell mass = cell volume.
        assert_eq!(model.cells[1][0].weight, 0.5);
        assert_eq!(model.cells[1][1].weight, 0.5);
        assert!(model.log_density_checked(&[0.9], &[0.5]).unwrap().abs() < 1e-12);
        assert!(model.neg_loglik(&data).unwrap().abs() < 1e-12);
    }

    #[test]
    fn normalization_after_fit() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let xs: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.random::<f64>()]).collect();
        let ys: Vec<Vec<f64>> = (0..40).map(|_| vec![rng.random::<f64>()]).collect();
        let data = dataset(xs, ys);
        let x_tree = PartitionTree::uniform(PartitionKind::Rdp, 64, 1, 1);
        let y_trees = vec![
            PartitionTree::uniform(PartitionKind::Rdp, 64, 1, 1),
            PartitionTree::root_only(PartitionKind::Rdp, 64, 1),
        ];
        let model = fit(&data, &x_tree, &y_trees, &DegreeVector(vec![1]), &FitOptions::default()).unwrap();
        for x in [[0.2], [0.7]] {
            let m = 4096;
            let mut mass = 0.0;
            for i in 0..m {
                let y = [(i as f64 + 0.5) / m as f64];
                let ld = model.log_density_checked(&x, &y).unwrap();
                mass += ld.exp() / m as f64;
            }
            assert!((mass - 1.0).abs() < 1e-6, "mass {mass}");
        }
    }

    #[test]
    fn refit_recovers_weights_at_scale() {
        // Law of large numbers check at n = 1e5 on a 2-cell histogram truth.
        let x_tree = PartitionTree::root_only(PartitionKind::Rdp, 1 << 17, 1);
        let y_tree = PartitionTree::uniform(PartitionKind::Rdp, 1 << 17, 1, 1);
        let truth =
            PolyModel::histogram(x_tree.clone(), vec![y_tree.clone()], vec![vec![0.3, 0.7]]).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let n = 100_000;
        let xs: Vec<Vec<f64>> = (0..n).map(|_| vec![rng.random::<f64>()]).collect();
        let ys: Vec<Vec<f64>> =
            xs.iter().map(|x| truth.sample_response(x, &mut rng).unwrap()).collect();
        let data = dataset(xs, ys);
        let refit =
            fit(&data, &x_tree, &[y_tree], &DegreeVector::constant(1), &FitOptions::default()).unwrap();
        assert!((refit.cells[0][0].weight - 0.3).abs() < 0.02);
        assert!((refit.cells[0][1].weight - 0.7).abs() < 0.02);
    }
}
