//! Synthetic ground truths, samplers, and the risk/oracle harness.
//!
//! A [`GroundTruth`] couples a conditional density (histogram/polynomial
//! model, spatial mixture, or a custom evaluator) with a design law for the
//! covariates. [`risk`] measures an estimator's mean tensorized divergence
//! from the truth over independent replicates; [`oracle_table`] reports
//! per-model true risks next to empirical penalized scores so selection can
//! be compared against the best model in hindsight.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::dataset::Dataset;
use crate::divergence::{tensorized, ConditionalDensity, DivKind, DivergenceConfig};
use crate::geometry::Hyperrectangle;
use crate::polydens::PolyModel;
use crate::spatial_gmm::SpatialGmm;
use crate::{derive_seed, Error, Result};

/// Law of the covariates.
pub enum DesignLaw {
    IidUniform,
    /// `d_x = 1`: `X_i = (i - 0.5)/n`; higher dimensions use the row-major
    /// centers of the smallest covering grid.
    FixedGrid,
    IidCustom(Box<dyn Fn(&mut ChaCha12Rng) -> Vec<f64> + Send + Sync>),
}

impl std::fmt::Debug for DesignLaw {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DesignLaw::IidUniform => write!(f, "IidUniform"),
            DesignLaw::FixedGrid => write!(f, "FixedGrid"),
            DesignLaw::IidCustom(_) => write!(f, "IidCustom(..)"),
        }
    }
}

/// The conditional density of a ground truth.
pub enum TruthDensity {
    Poly(PolyModel),
    Gmm(SpatialGmm),
    Custom(Box<dyn ConditionalDensity + Send + Sync>),
}

impl std::fmt::Debug for TruthDensity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TruthDensity::Poly(_) => write!(f, "Poly(..)"),
            TruthDensity::Gmm(_) => write!(f, "Gmm(..)"),
            TruthDensity::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl ConditionalDensity for TruthDensity {
    fn x_dim(&self) -> usize {
        match self {
            TruthDensity::Poly(m) => m.x_dim(),
            TruthDensity::Gmm(m) => m.x_dim(),
            TruthDensity::Custom(c) => c.x_dim(),
        }
    }

    fn y_dim(&self) -> usize {
        match self {
            TruthDensity::Poly(m) => m.y_dim(),
            TruthDensity::Gmm(m) => m.y_dim(),
            TruthDensity::Custom(c) => c.y_dim(),
        }
    }

    fn log_density(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            TruthDensity::Poly(m) => ConditionalDensity::log_density(m, x, y),
            TruthDensity::Gmm(m) => ConditionalDensity::log_density(m, x, y),
            TruthDensity::Custom(c) => c.log_density(x, y),
        }
    }

    fn sample_y(&self, x: &[f64], rng: &mut ChaCha12Rng) -> Option<Vec<f64>> {
        match self {
            TruthDensity::Poly(m) => m.sample_y(x, rng),
            TruthDensity::Gmm(m) => m.sample_y(x, rng),
            TruthDensity::Custom(c) => c.sample_y(x, rng),
        }
    }
}

/// A synthetic data-generating process.
#[derive(Debug)]
pub struct GroundTruth {
    pub density: TruthDensity,
    pub design: DesignLaw,
}

impl GroundTruth {
    /// Wraps a density and design; spot-checks the conditional normalization
    /// by quadrature at a few covariates when the response domain is given.
    pub fn new(density: TruthDensity, design: DesignLaw, y_domain: Option<&Hyperrectangle>) -> Result<Self> {
        if let Some(domain) = y_domain {
            let d_x = density.x_dim();
            for probe in 0..3 {
                let x = vec![(probe as f64 + 0.5) / 3.0; d_x];
                let mass = quadrature_mass(&density, &x, domain, 512);
                if (mass - 1.0).abs() > 1e-3 {
                    return Err(Error::Contract(format!(
                        "conditional density integrates to {mass:.6} at x = {x:?}"
                    )));
                }
            }
        }
        Ok(GroundTruth { density, design })
    }

    pub fn x_dim(&self) -> usize {
        self.density.x_dim()
    }

    pub fn y_dim(&self) -> usize {
        self.density.y_dim()
    }
}

fn quadrature_mass(density: &TruthDensity, x: &[f64], domain: &Hyperrectangle, per_axis: usize) -> f64 {
    let d = domain.dim();
    let total = per_axis.pow(d as u32);
    let steps: Vec<f64> =
        (0..d).map(|j| (domain.upper()[j] - domain.lower()[j]) / per_axis as f64).collect();
    let w: f64 = steps.iter().product();
    let mut idx = vec![0usize; d];
    let mut mass = 0.0;
    for _ in 0..total {
        let y: Vec<f64> =
            (0..d).map(|j| domain.lower()[j] + (idx[j] as f64 + 0.5) * steps[j]).collect();
        mass += density.log_density(x, &y).exp() * w;
        let mut j = d;
        loop {
            if j == 0 {
                break;
            }
            j -= 1;
            idx[j] += 1;
            if idx[j] < per_axis {
                break;
            }
            idx[j] = 0;
        }
    }
    mass
}

/// Draws the design of size `n`.
pub fn sample_design(law: &DesignLaw, d_x: usize, n: usize, rng: &mut ChaCha12Rng) -> Vec<Vec<f64>> {
    match law {
        DesignLaw::IidUniform => (0..n).map(|_| (0..d_x).map(|_| rng.random::<f64>()).collect()).collect(),
        DesignLaw::FixedGrid => {
            if d_x == 1 {
                (0..n).map(|i| vec![(i as f64 + 0.5) / n as f64]).collect()
            } else {
                let side = (n as f64).powf(1.0 / d_x as f64).ceil() as usize;
                let mut out = Vec::with_capacity(n);
                let mut idx = vec![0usize; d_x];
                for _ in 0..n {
                    out.push((0..d_x).map(|j| (idx[j] as f64 + 0.5) / side as f64).collect());
                    let mut j = d_x;
                    loop {
                        if j == 0 {
                            break;
                        }
                        j -= 1;
                        idx[j] += 1;
                        if idx[j] < side {
                            break;
                        }
                        idx[j] = 0;
                    }
                }
                out
            }
        }
        DesignLaw::IidCustom(f) => (0..n).map(|_| f(rng)).collect(),
    }
}

/// Draws `n` pairs from the truth; bit-reproducible for a given seed.
pub fn sample(truth: &GroundTruth, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Contract("need n >= 1".into()));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let xs = sample_design(&truth.design, truth.x_dim(), n, &mut rng);
    let mut ys = Vec::with_capacity(n);
    for x in &xs {
        let y = match &truth.density {
            TruthDensity::Poly(m) => m.sample_response(x, &mut rng)?,
            TruthDensity::Gmm(m) => m.sample_response(x, &mut rng)?,
            TruthDensity::Custom(c) => c
                .sample_y(x, &mut rng)
                .ok_or_else(|| Error::Sampler("custom truth is not sampleable".into()))?,
        };
        ys.push(y);
    }
    Dataset::new(xs, ys)
}

/// An estimator under risk evaluation.
pub enum Estimator {
    /// The truth itself; its risk is zero by definition and short-circuits.
    Truth,
    /// Any fitting procedure.
    Fit(Box<dyn Fn(&Dataset) -> Result<TruthDensity> + Send + Sync>),
}

impl Estimator {
    pub fn poly_fixed(
        x_tree: crate::geometry::PartitionTree,
        y_trees: Vec<crate::geometry::PartitionTree>,
        degree: crate::polydens::DegreeVector,
        opts: crate::polydens::FitOptions,
    ) -> Self {
        Estimator::Fit(Box::new(move |data| {
            Ok(TruthDensity::Poly(crate::polydens::fit(data, &x_tree, &y_trees, &degree, &opts)?))
        }))
    }
}

/// One row of a risk curve.
#[derive(Debug, Clone, PartialEq)]
pub struct RiskRow {
    pub n: usize,
    pub label: String,
    pub mean_risk: f64,
    pub std_error: f64,
    pub replicates: usize,
}

/// A risk curve across sample sizes or models.
#[derive(Debug, Clone, Default)]
pub struct RiskCurve {
    pub rows: Vec<RiskRow>,
}

/// Mean tensorized divergence between the truth and the fitted estimate over
/// `replicates` independent draws of size `n`, evaluated on each replicate's
/// own design. Replicates run in parallel under derived seeds.
#[allow(clippy::too_many_arguments)]
pub fn risk(
    truth: &GroundTruth,
    estimator: &Estimator,
    n: usize,
    replicates: usize,
    div_kind: DivKind,
    div_cfg: &DivergenceConfig,
    y_domain: &Hyperrectangle,
    seed: u64,
) -> Result<RiskRow> {
    if replicates < 3 {
        return Err(Error::Contract("need at least 3 replicates".into()));
    }
    let label = match estimator {
        Estimator::Truth => "truth".to_string(),
        Estimator::Fit(_) => "fitted".to_string(),
    };
    if matches!(estimator, Estimator::Truth) {
        return Ok(RiskRow { n, label, mean_risk: 0.0, std_error: 0.0, replicates });
    }
    let values: Vec<Result<f64>> = (0..replicates)
        .into_par_iter()
        .map(|rep| {
            let rep_seed = derive_seed(seed, rep as u64);
            let data = sample(truth, n, rep_seed)?;
            let fitted = match estimator {
                Estimator::Fit(f) => f(&data)?,
                Estimator::Truth => unreachable!(),
            };
            let est = tensorized(div_kind, &truth.density, &fitted, &data.x, y_domain, div_cfg)?;
            Ok(est.value)
        })
        .collect();
    let mut vals = Vec::with_capacity(replicates);
    for v in values {
        vals.push(v?);
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        / ((vals.len() - 1) as f64 * vals.len() as f64);
    Ok(RiskRow { n, label, mean_risk: mean, std_error: var.sqrt(), replicates })
}

/// Per-model oracle comparison on a fixed grid of fitting procedures.
#[derive(Debug, Clone)]
pub struct OracleRow {
    pub id: String,
    pub dim: usize,
    pub mean_risk: f64,
    pub risk_std_error: f64,
    pub mean_neg_loglik: f64,
    pub mean_score: f64,
}

#[derive(Debug, Clone)]
pub struct OracleTable {
    pub rows: Vec<OracleRow>,
    /// Mean risk of the slope-selected model across replicates.
    pub selected_risk: f64,
    pub selected_risk_std_error: f64,
    /// `selected_risk / min over rows of mean_risk`.
    pub ratio_to_oracle: f64,
}

/// Fits every model of a grid on each replicate, reporting Monte-Carlo true
/// risks, empirical scores, and the selected-to-oracle risk ratio under
/// slope calibration.
#[allow(clippy::too_many_arguments)]
pub fn oracle_table<M: Sync>(
    truth: &GroundTruth,
    grid: &[(String, M)],
    fit_one: impl Fn(&M, &Dataset) -> Result<(TruthDensity, usize)> + Sync,
    n: usize,
    replicates: usize,
    div_cfg: &DivergenceConfig,
    y_domain: &Hyperrectangle,
    seed: u64,
) -> Result<OracleTable> {
    if grid.is_empty() {
        return Err(Error::Contract("empty model grid".into()));
    }
    struct RepOutcome {
        risks: Vec<f64>,
        neg_logliks: Vec<f64>,
        selected_risk: f64,
    }
    let reps: Vec<Result<RepOutcome>> = (0..replicates)
        .into_par_iter()
        .map(|rep| {
            let rep_seed = derive_seed(seed, rep as u64);
            let data = sample(truth, n, rep_seed)?;
            let mut risks = Vec::with_capacity(grid.len());
            let mut neg_logliks = Vec::with_capacity(grid.len());
            let mut dims = Vec::with_capacity(grid.len());
            let mut fitted_models = Vec::with_capacity(grid.len());
            for (_, m) in grid {
                let (fitted, dim) = fit_one(m, &data)?;
                let nll = neg_loglik_of(&fitted, &data);
                let est =
                    tensorized(DivKind::Jkl, &truth.density, &fitted, &data.x, y_domain, div_cfg)?;
                risks.push(est.value);
                neg_logliks.push(nll);
                dims.push(dim as f64);
                fitted_models.push(fitted);
            }
            let pairs: Vec<(f64, f64)> =
                dims.iter().copied().zip(neg_logliks.iter().copied()).collect();
            let (kappa_hat, _) = crate::selection::slope_calibrate(&pairs)?;
            let kappa = 2.0 * kappa_hat;
            let mut best = 0usize;
            let mut best_score = f64::INFINITY;
            for i in 0..grid.len() {
                let score = neg_logliks[i] + kappa * dims[i];
                if score < best_score - 1e-12 {
                    best_score = score;
                    best = i;
                }
            }
            let selected_risk = risks[best];
            Ok(RepOutcome { risks, neg_logliks, selected_risk })
        })
        .collect();

    let mut all = Vec::with_capacity(replicates);
    for r in reps {
        all.push(r?);
    }
    let m = grid.len();
    let rep_count = all.len() as f64;
    let mut rows = Vec::with_capacity(m);
    for i in 0..m {
        let risks: Vec<f64> = all.iter().map(|r| r.risks[i]).collect();
        let mean_risk = risks.iter().sum::<f64>() / rep_count;
        let var = risks.iter().map(|v| (v - mean_risk) * (v - mean_risk)).sum::<f64>()
            / ((rep_count - 1.0) * rep_count);
        let mean_nll = all.iter().map(|r| r.neg_logliks[i]).sum::<f64>() / rep_count;
        rows.push(OracleRow {
            id: grid[i].0.clone(),
            dim: 0, // filled below from a probe fit
            mean_risk,
            risk_std_error: var.sqrt(),
            mean_neg_loglik: mean_nll,
            mean_score: f64::NAN,
        });
    }
    // Dimensions come from fitting once on a fresh draw.
    {
        let data = sample(truth, n, derive_seed(seed, 0xdead))?;
        for (row, (_, m)) in rows.iter_mut().zip(grid) {
            let (_, dim) = fit_one(m, &data)?;
            row.dim = dim;
        }
    }
    let sel: Vec<f64> = all.iter().map(|r| r.selected_risk).collect();
    let selected_risk = sel.iter().sum::<f64>() / rep_count;
    let sel_var = sel.iter().map(|v| (v - selected_risk) * (v - selected_risk)).sum::<f64>()
        / ((rep_count - 1.0) * rep_count);
    let oracle = rows.iter().map(|r| r.mean_risk).fold(f64::INFINITY, f64::min);
    Ok(OracleTable {
        rows,
        selected_risk,
        selected_risk_std_error: sel_var.sqrt(),
        ratio_to_oracle: if oracle > 0.0 { selected_risk / oracle } else { f64::INFINITY },
    })
}

fn neg_loglik_of(density: &TruthDensity, data: &Dataset) -> f64 {
    data.x
        .iter()
        .zip(&data.y)
        .map(|(x, y)| -density.log_density(x, y))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{PartitionKind, PartitionTree};
    use crate::polydens::DegreeVector;

    fn uniform_truth() -> GroundTruth {
        let x_tree = PartitionTree::root_only(PartitionKind::Rdp, 64, 1);
        let y_tree = PartitionTree::root_only(PartitionKind::Rdp, 64, 1);
        let model = PolyModel::histogram(x_tree, vec![y_tree], vec![vec![1.0]]).unwrap();
        GroundTruth::new(
            TruthDensity::Poly(model),
            DesignLaw::IidUniform,
            Some(&Hyperrectangle::unit_cube(1)),
        )
        .unwrap()
    }

    fn two_cell_truth() -> GroundTruth {
        // One X split, skewed 2-cell histograms per leaf.
        let x_tree = PartitionTree::uniform(PartitionKind::Rdp, 64, 1, 1);
        let y_tree = PartitionTree::uniform(PartitionKind::Rdp, 64, 1, 1);
        let model = PolyModel::histogram(
            x_tree,
            vec![y_tree.clone(), y_tree],
            vec![vec![0.8, 0.2], vec![0.3, 0.7]],
        )
        .unwrap();
        GroundTruth::new(
            TruthDensity::Poly(model),
            DesignLaw::IidUniform,
            Some(&Hyperrectangle::unit_cube(1)),
        )
        .unwrap()
    }

    /// Kolmogorov-Smirnov p-value (asymptotic) for uniformity on [0,1].
    fn ks_uniform_p(samples: &mut [f64]) -> f64 {
        samples.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = samples.len() as f64;
        let mut d: f64 = 0.0;
        for (i, &v) in samples.iter().enumerate() {
            let hi = (i as f64 + 1.0) / n - v;
            let lo = v - i as f64 / n;
            d = d.max(hi.max(lo));
        }
        let lambda = (n.sqrt() + 0.12 + 0.11 / n.sqrt()) * d;
        2.0 * (1..=100)
            .map(|k| {
                let k = k as f64;
                (-1.0f64).powi(k as i32 - 1) * (-2.0 * k * k * lambda * lambda).exp()
            })
            .sum::<f64>()
            .clamp(0.0, 1.0)
    }

    #[test]
    fn uniform_sampler_passes_ks() {
        let truth = uniform_truth();
        let data = sample(&truth, 10_000, 7).unwrap();
        let mut ys: Vec<f64> = data.y.iter().map(|y| y[0]).collect();
        assert!(ks_uniform_p(&mut ys) > 0.01);
        let mut xs: Vec<f64> = data.x.iter().map(|x| x[0]).collect();
        assert!(ks_uniform_p(&mut xs) > 0.01);
    }

    #[test]
    fn fixed_grid_design() {
        let truth = GroundTruth::new(
            match uniform_truth().density {
                d @ TruthDensity::Poly(_) => d,
                _ => unreachable!(),
            },
            DesignLaw::FixedGrid,
            None,
        )
        .unwrap();
        let data = sample(&truth, 100, 3).unwrap();
        for (i, x) in data.x.iter().enumerate() {
            assert!((x[0] - (i as f64 + 0.5) / 100.0).abs() < 1e-15);
        }
    }

    #[test]
    fn seed_determinism() {
        let truth = two_cell_truth();
        let a = sample(&truth, 500, 42).unwrap();
        let b = sample(&truth, 500, 42).unwrap();
        assert_eq!(a, b);
        let c = sample(&truth, 500, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn gmm_truth_with_degenerate_leaf_proportions() {
        use nalgebra::{DMatrix, DVector};
        let x_tree = PartitionTree::uniform(PartitionKind::Rdp, 64, 1, 1);
        let comp = |mu: f64| crate::spatial_gmm::GaussianComponent {
            mu: DVector::from_vec(vec![mu]),
            volume: 1.0,
            basis: DMatrix::identity(1, 1),
            shape: DVector::from_element(1, 1.0),
        };
        // Means far enough apart that a wrong-sign draw has negligible mass
        // (P(z > 6) ~ 1e-9 over 2000 draws).
        let gmm = SpatialGmm {
            k: 2,
            components: vec![comp(-6.0), comp(6.0)],
            x_tree,
            proportions: vec![vec![1.0, 0.0], vec![0.5, 0.5]],
            e_indices: vec![0],
            complement: None,
            d_y: 1,
        };
        let truth =
            GroundTruth::new(TruthDensity::Gmm(gmm), DesignLaw::IidUniform, None).unwrap();
        let data = sample(&truth, 2000, 5).unwrap();
        for (x, y) in data.x.iter().zip(&data.y) {
            if x[0] < 0.5 {
                // pi = (1, 0): every response comes from the first component.
                assert!(y[0] < 0.0, "leaf-1 response {} from component 2", y[0]);
            }
        }
    }

    #[test]
    fn truth_risk_is_zero() {
        let truth = two_cell_truth();
        let row = risk(
            &truth,
            &Estimator::Truth,
            100,
            5,
            DivKind::Jkl,
            &DivergenceConfig::default(),
            &Hyperrectangle::unit_cube(1),
            1,
        )
        .unwrap();
        assert_eq!(row.mean_risk, 0.0);
        assert_eq!(row.std_error, 0.0);
    }

    #[test]
    fn sampler_frequencies_match_cell_masses() {
        let truth = two_cell_truth();
        let n = 4000;
        let data = sample(&truth, n, 11).unwrap();
        // Cells of a 2x2 grid; compare empirical frequency with expected mass.
        let mut counts = [[0usize; 2]; 2];
        for (x, y) in data.x.iter().zip(&data.y) {
            let i = usize::from(x[0] >= 0.5);
            let j = usize::from(y[0] >= 0.5);
            counts[i][j] += 1;
        }
        let expected = [[0.5 * 0.8, 0.5 * 0.2], [0.5 * 0.3, 0.5 * 0.7]];
        for i in 0..2 {
            for j in 0..2 {
                let p = expected[i][j];
                let tol = 4.0 * (p * (1.0 - p) / n as f64).sqrt();
                let freq = counts[i][j] as f64 / n as f64;
                assert!((freq - p).abs() < tol, "cell ({i},{j}): {freq} vs {p}");
            }
        }
    }

    #[test]
    fn histogram_estimator_risk_decreases_with_n() {
        let truth = two_cell_truth();
        let x_tree = PartitionTree::uniform(PartitionKind::Rdp, 1 << 13, 1, 1);
        let y_tree = PartitionTree::uniform(PartitionKind::Rdp, 1 << 13, 1, 1);
        let estimator = Estimator::poly_fixed(
            x_tree.clone(),
            vec![y_tree.clone(), y_tree],
            DegreeVector::constant(1),
            Default::default(),
        );
        let cfg = DivergenceConfig::default();
        let domain = Hyperrectangle::unit_cube(1);
        let r200 = risk(&truth, &estimator, 200, 8, DivKind::Jkl, &cfg, &domain, 21).unwrap();
        let r3200 = risk(&truth, &estimator, 3200, 8, DivKind::Jkl, &cfg, &domain, 22).unwrap();
        let gap = r200.mean_risk - r3200.mean_risk;
        let se = (r200.std_error.powi(2) + r3200.std_error.powi(2)).sqrt();
        assert!(gap > 2.0 * se, "risk did not decrease: {} -> {}", r200.mean_risk, r3200.mean_risk);
    }
}
