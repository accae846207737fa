//! Divergences between densities and conditional densities.
//!
//! Kullback-Leibler, the Jensen-Kullback-Leibler variant `JKL_rho`, squared
//! Hellinger and squared L1, evaluated either on a tensor midpoint grid or by
//! Monte Carlo sampling from the first argument. The tensorized versions
//! average the per-covariate divergence over a design. Closed forms for
//! Gaussian pairs (Hellinger distance, density-ratio bound) are provided for
//! cross-checking.
//!
//! `+infinity` is a first-class result value for KL, not an error.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::derive_seed;
use crate::geometry::Hyperrectangle;
use crate::{Error, Result};

/// Evaluation scheme for divergence integrals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Quadrature {
    /// Tensor midpoint grid with this many points per axis.
    Grid { points_per_axis: usize },
    /// Monte Carlo with samples drawn from the first density.
    MonteCarlo { samples: usize, seed: u64 },
}

/// Configuration shared by all divergence evaluations.
#[derive(Debug, Clone)]
pub struct DivergenceConfig {
    /// The `rho` of `JKL_rho`, in (0,1).
    pub rho: f64,
    pub quadrature: Quadrature,
    /// Density values below this floor count as zero when testing absolute
    /// continuity; distinguishes genuine support failure from underflow.
    pub epsilon_floor: f64,
}

impl Default for DivergenceConfig {
    fn default() -> Self {
        DivergenceConfig { rho: 0.5, quadrature: Quadrature::Grid { points_per_axis: 512 }, epsilon_floor: 1e-300 }
    }
}

impl DivergenceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::Contract(format!("rho must lie in (0,1), got {}", self.rho)));
        }
        if let Quadrature::MonteCarlo { samples, .. } = self.quadrature {
            if samples < 100 {
                return Err(Error::Contract("monte carlo sample count must be >= 100".into()));
            }
        }
        if !(self.epsilon_floor > 0.0) {
            return Err(Error::Contract("epsilon_floor must be positive".into()));
        }
        Ok(())
    }

    fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        if let Quadrature::MonteCarlo { samples, .. } = cfg.quadrature {
            cfg.quadrature = Quadrature::MonteCarlo { samples, seed };
        }
        cfg
    }
}

/// A divergence value with the standard error of its estimate (0 for grid
/// evaluation).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DivergenceEstimate {
    pub value: f64,
    pub std_error: f64,
}

impl DivergenceEstimate {
    fn exact(value: f64) -> Self {
        DivergenceEstimate { value, std_error: 0.0 }
    }
}

/// A density on a box domain, evaluated in log scale. Implementations may
/// also be sampleable, which Monte Carlo quadrature requires of its first
/// argument.
pub trait Density: Sync {
    fn dim(&self) -> usize;
    /// `ln s(y)`; `-inf` where the density vanishes.
    fn log_density(&self, y: &[f64]) -> f64;
    fn sample(&self, _rng: &mut ChaCha12Rng) -> Option<Vec<f64>> {
        None
    }
}

/// A conditional density `s(. | x)`.
pub trait ConditionalDensity: Sync {
    fn x_dim(&self) -> usize;
    fn y_dim(&self) -> usize;
    fn log_density(&self, x: &[f64], y: &[f64]) -> f64;
    fn sample_y(&self, _x: &[f64], _rng: &mut ChaCha12Rng) -> Option<Vec<f64>> {
        None
    }
}

/// View of a conditional density at a fixed covariate.
pub struct AtCovariate<'a, C: ConditionalDensity + ?Sized> {
    pub cond: &'a C,
    pub x: &'a [f64],
}

impl<C: ConditionalDensity + ?Sized> Density for AtCovariate<'_, C> {
    fn dim(&self) -> usize {
        self.cond.y_dim()
    }

    fn log_density(&self, y: &[f64]) -> f64 {
        self.cond.log_density(self.x, y)
    }

    fn sample(&self, rng: &mut ChaCha12Rng) -> Option<Vec<f64>> {
        self.cond.sample_y(self.x, rng)
    }
}

/// Divergence selector for [`divergence`] and [`tensorized`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DivKind {
    Kl,
    Jkl,
    Hellinger2,
    L1Squared,
}

/// The constant `C_rho` of the sandwich `C_rho d^2 <= JKL_rho <= KL`.
pub fn c_rho(rho: f64) -> f64 {
    (1.0 / rho) * ((1.0 - rho) / rho).min(1.0) * ((1.0 + rho / (1.0 - rho)).ln() - rho)
}

/// Midpoint tensor grid over `domain`, flattened point-major.
fn grid_points(domain: &Hyperrectangle, per_axis: usize) -> (Vec<f64>, f64) {
    let d = domain.dim();
    let total = per_axis.pow(d as u32);
    let steps: Vec<f64> =
        (0..d).map(|j| (domain.upper()[j] - domain.lower()[j]) / per_axis as f64).collect();
    let weight: f64 = steps.iter().product();
    let mut pts = Vec::with_capacity(total * d);
    let mut idx = vec![0usize; d];
    loop {
        for j in 0..d {
            pts.push(domain.lower()[j] + (idx[j] as f64 + 0.5) * steps[j]);
        }
        let mut j = d;
        loop {
            if j == 0 {
                return (pts, weight);
            }
            j -= 1;
            idx[j] += 1;
            if idx[j] < per_axis {
                break;
            }
            idx[j] = 0;
        }
    }
}

struct GridEval {
    /// (weight, s, t) triplets over the grid.
    rows: Vec<(f64, f64, f64)>,
}

fn grid_eval(s: &dyn Density, t: &dyn Density, domain: &Hyperrectangle, per_axis: usize) -> Result<GridEval> {
    let d = domain.dim();
    if s.dim() != d || t.dim() != d {
        return Err(Error::Contract("density dimension does not match the domain".into()));
    }
    let (pts, w) = grid_points(domain, per_axis);
    // Small grids are cheaper sequentially, and the tensorized wrapper is
    // already parallel across design points.
    let eval = |y: &[f64]| (w, s.log_density(y).exp(), t.log_density(y).exp());
    let rows: Vec<(f64, f64, f64)> = if pts.len() / d >= 1 << 15 {
        pts.par_chunks_exact(d).map(eval).collect()
    } else {
        pts.chunks_exact(d).map(eval).collect()
    };
    let mass_s: f64 = rows.iter().map(|(w, sv, _)| w * sv).sum();
    let mass_t: f64 = rows.iter().map(|(w, _, tv)| w * tv).sum();
    if (mass_s - 1.0).abs() > 1e-6 || (mass_t - 1.0).abs() > 1e-6 {
        return Err(Error::Contract(format!(
            "densities must integrate to 1 over the domain (got {mass_s:.8} and {mass_t:.8})"
        )));
    }
    Ok(GridEval { rows })
}

fn mc_draws(s: &dyn Density, samples: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(samples);
    for _ in 0..samples {
        let y = s
            .sample(&mut rng)
            .ok_or_else(|| Error::Contract("monte carlo quadrature needs a sampleable first argument".into()))?;
        out.push(y);
    }
    Ok(out)
}

fn mean_and_se(vals: &[f64]) -> DivergenceEstimate {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    if !mean.is_finite() {
        return DivergenceEstimate { value: f64::INFINITY, std_error: f64::INFINITY };
    }
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n * (n - 1.0).max(1.0));
    DivergenceEstimate { value: mean, std_error: var.sqrt() }
}

/// `KL(s || t) = int s ln(s/t)`; `+inf` when s-mass sits where t is below the
/// epsilon floor.
pub fn kl(s: &dyn Density, t: &dyn Density, domain: &Hyperrectangle, cfg: &DivergenceConfig) -> Result<DivergenceEstimate> {
    cfg.validate()?;
    match cfg.quadrature {
        Quadrature::Grid { points_per_axis } => {
            let g = grid_eval(s, t, domain, points_per_axis)?;
            let mut acc = 0.0;
            let mut orphan_mass = 0.0;
            for (w, sv, tv) in g.rows {
                if sv <= 0.0 {
                    continue;
                }
                if tv < cfg.epsilon_floor {
                    orphan_mass += w * sv;
                } else {
                    acc += w * sv * (sv / tv).ln();
                }
            }
            if orphan_mass > 1e-12 {
                return Ok(DivergenceEstimate::exact(f64::INFINITY));
            }
            Ok(DivergenceEstimate::exact(acc.max(0.0)))
        }
        Quadrature::MonteCarlo { samples, seed } => {
            let draws = mc_draws(s, samples, seed)?;
            let mut vals = Vec::with_capacity(draws.len());
            for y in &draws {
                let sv = s.log_density(y);
                let tv = t.log_density(y);
                if tv.exp() < cfg.epsilon_floor {
                    return Ok(DivergenceEstimate { value: f64::INFINITY, std_error: f64::INFINITY });
                }
                vals.push(sv - tv);
            }
            Ok(mean_and_se(&vals))
        }
    }
}

/// `JKL_rho(s, t) = KL(s, (1-rho) s + rho t) / rho`; always finite because the
/// mixture dominates `s`.
pub fn jkl(s: &dyn Density, t: &dyn Density, domain: &Hyperrectangle, cfg: &DivergenceConfig) -> Result<DivergenceEstimate> {
    cfg.validate()?;
    let rho = cfg.rho;
    match cfg.quadrature {
        Quadrature::Grid { points_per_axis } => {
            let g = grid_eval(s, t, domain, points_per_axis)?;
            let mut acc = 0.0;
            for (w, sv, tv) in g.rows {
                if sv <= 0.0 {
                    continue;
                }
                let m = (1.0 - rho) * sv + rho * tv;
                acc += w * sv * (sv / m).ln();
            }
            Ok(DivergenceEstimate::exact((acc / rho).max(0.0)))
        }
        Quadrature::MonteCarlo { samples, seed } => {
            let draws = mc_draws(s, samples, seed)?;
            let vals: Vec<f64> = draws
                .iter()
                .map(|y| {
                    let sv = s.log_density(y).exp();
                    let tv = t.log_density(y).exp();
                    let m = (1.0 - rho) * sv + rho * tv;
                    (sv / m).ln() / rho
                })
                .collect();
            Ok(mean_and_se(&vals))
        }
    }
}

/// Squared Hellinger distance `int (sqrt s - sqrt t)^2`, in `[0, 2]`.
pub fn hellinger2(s: &dyn Density, t: &dyn Density, domain: &Hyperrectangle, cfg: &DivergenceConfig) -> Result<DivergenceEstimate> {
    cfg.validate()?;
    match cfg.quadrature {
        Quadrature::Grid { points_per_axis } => {
            let g = grid_eval(s, t, domain, points_per_axis)?;
            let affinity: f64 = g.rows.iter().map(|(w, sv, tv)| w * (sv * tv).sqrt()).sum();
            Ok(DivergenceEstimate::exact((2.0 - 2.0 * affinity).clamp(0.0, 2.0)))
        }
        Quadrature::MonteCarlo { samples, seed } => {
            let draws = mc_draws(s, samples, seed)?;
            let vals: Vec<f64> = draws
                .iter()
                .map(|y| {
                    let ls = s.log_density(y);
                    let lt = t.log_density(y);
                    2.0 - 2.0 * (0.5 * (lt - ls)).exp()
                })
                .collect();
            let mut est = mean_and_se(&vals);
            est.value = est.value.clamp(0.0, 2.0);
            Ok(est)
        }
    }
}

/// Squared L1 distance `(int |s - t|)^2`, in `[0, 4]`.
pub fn l1_squared(s: &dyn Density, t: &dyn Density, domain: &Hyperrectangle, cfg: &DivergenceConfig) -> Result<DivergenceEstimate> {
    cfg.validate()?;
    match cfg.quadrature {
        Quadrature::Grid { points_per_axis } => {
            let g = grid_eval(s, t, domain, points_per_axis)?;
            let l1: f64 = g.rows.iter().map(|(w, sv, tv)| w * (sv - tv).abs()).sum();
            Ok(DivergenceEstimate::exact((l1 * l1).clamp(0.0, 4.0)))
        }
        Quadrature::MonteCarlo { samples, seed } => {
            let draws = mc_draws(s, samples, seed)?;
            let vals: Vec<f64> = draws
                .iter()
                .map(|y| {
                    let ls = s.log_density(y);
                    let lt = t.log_density(y);
                    (1.0 - (lt - ls).exp()).abs()
                })
                .collect();
            let est = mean_and_se(&vals);
            // Delta method for the square of the mean.
            Ok(DivergenceEstimate {
                value: (est.value * est.value).clamp(0.0, 4.0),
                std_error: 2.0 * est.value.abs() * est.std_error,
            })
        }
    }
}

/// Dispatch by kind.
pub fn divergence(
    kind: DivKind,
    s: &dyn Density,
    t: &dyn Density,
    domain: &Hyperrectangle,
    cfg: &DivergenceConfig,
) -> Result<DivergenceEstimate> {
    match kind {
        DivKind::Kl => kl(s, t, domain, cfg),
        DivKind::Jkl => jkl(s, t, domain, cfg),
        DivKind::Hellinger2 => hellinger2(s, t, domain, cfg),
        DivKind::L1Squared => l1_squared(s, t, domain, cfg),
    }
}

/// Average over the design of the per-covariate divergence.
///
/// Monte Carlo substreams are derived from `cfg`'s seed and the design index,
/// so the result does not depend on evaluation order; per-point standard
/// errors aggregate as `sqrt(sum se_i^2) / n`.
pub fn tensorized(
    kind: DivKind,
    s: &dyn ConditionalDensity,
    t: &dyn ConditionalDensity,
    design: &[Vec<f64>],
    y_domain: &Hyperrectangle,
    cfg: &DivergenceConfig,
) -> Result<DivergenceEstimate> {
    if design.is_empty() {
        return Err(Error::Contract("tensorized divergence needs a nonempty design".into()));
    }
    cfg.validate()?;
    let per_point: Vec<Result<DivergenceEstimate>> = design
        .par_iter()
        .enumerate()
        .map(|(i, x)| {
            let cfg_i = match cfg.quadrature {
                Quadrature::MonteCarlo { samples: _, seed } => cfg.with_seed(derive_seed(seed, i as u64)),
                _ => cfg.clone(),
            };
            let sv = AtCovariate { cond: s, x };
            let tv = AtCovariate { cond: t, x };
            divergence(kind, &sv, &tv, y_domain, &cfg_i)
        })
        .collect();
    let mut value = 0.0;
    let mut var = 0.0;
    let n = design.len() as f64;
    for est in per_point {
        let est = est?;
        value += est.value;
        var += est.std_error * est.std_error;
    }
    Ok(DivergenceEstimate { value: value / n, std_error: var.sqrt() / n })
}

fn spd_cholesky(m: &DMatrix<f64>, what: &str) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>> {
    if m.nrows() != m.ncols() {
        return Err(Error::LinearAlgebra(format!("{what} must be square")));
    }
    if (m - m.transpose()).abs().max() > 1e-8 * (1.0 + m.abs().max()) {
        return Err(Error::LinearAlgebra(format!("{what} must be symmetric")));
    }
    nalgebra::Cholesky::new(m.clone())
        .ok_or_else(|| Error::LinearAlgebra(format!("{what} is not positive definite")))
}

fn chol_log_det(chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>) -> f64 {
    2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>()
}

/// Closed-form squared Hellinger distance between two full-rank Gaussians:
/// `2 (1 - 2^{D/2} |S1 S2|^{-1/4} |S1^{-1}+S2^{-1}|^{-1/2}
///      exp(-(mu1-mu2)' (S1+S2)^{-1} (mu1-mu2) / 4))`.
pub fn gaussian_hellinger2(mu1: &[f64], sigma1: &DMatrix<f64>, mu2: &[f64], sigma2: &DMatrix<f64>) -> Result<f64> {
    let p = mu1.len();
    if mu2.len() != p || sigma1.nrows() != p || sigma2.nrows() != p {
        return Err(Error::LinearAlgebra("dimension mismatch".into()));
    }
    let c1 = spd_cholesky(sigma1, "sigma1")?;
    let c2 = spd_cholesky(sigma2, "sigma2")?;
    let inv_sum = c1.inverse() + c2.inverse();
    let c_inv_sum = spd_cholesky(&inv_sum, "sigma1^-1 + sigma2^-1")?;
    let sum = sigma1 + sigma2;
    let c_sum = spd_cholesky(&sum, "sigma1 + sigma2")?;
    let delta = DVector::from_iterator(p, mu1.iter().zip(mu2).map(|(a, b)| a - b));
    let quad = delta.dot(&c_sum.solve(&delta));
    let log_affinity = 0.5 * p as f64 * std::f64::consts::LN_2
        - 0.25 * (chol_log_det(&c1) + chol_log_det(&c2))
        - 0.5 * chol_log_det(&c_inv_sum)
        - 0.25 * quad;
    Ok((2.0 - 2.0 * log_affinity.exp()).clamp(0.0, 2.0))
}

/// Uniform bound on the ratio of two Gaussian densities:
/// `sup_x phi1/phi2 <= sqrt(|S2|/|S1|) exp((mu1-mu2)' (S2-S1)^{-1} (mu1-mu2) / 2)`,
/// valid when `S1^{-1} - S2^{-1}` is positive definite.
pub fn gaussian_ratio_bound(mu1: &[f64], sigma1: &DMatrix<f64>, mu2: &[f64], sigma2: &DMatrix<f64>) -> Result<f64> {
    let p = mu1.len();
    if mu2.len() != p || sigma1.nrows() != p || sigma2.nrows() != p {
        return Err(Error::LinearAlgebra("dimension mismatch".into()));
    }
    let c1 = spd_cholesky(sigma1, "sigma1")?;
    let c2 = spd_cholesky(sigma2, "sigma2")?;
    let gap = c1.inverse() - c2.inverse();
    if nalgebra::Cholesky::new(gap).is_none() {
        return Err(Error::Domain("sigma1^-1 - sigma2^-1 must be positive definite".into()));
    }
    let diff = sigma2 - sigma1;
    let c_diff = spd_cholesky(&diff, "sigma2 - sigma1")?;
    let delta = DVector::from_iterator(p, mu1.iter().zip(mu2).map(|(a, b)| a - b));
    let quad = delta.dot(&c_diff.solve(&delta));
    Ok((0.5 * (chol_log_det(&c2) - chol_log_det(&c1)) + 0.5 * quad).exp())
}

/// A Gaussian density, usable on both sides of the divergence functions.
pub struct GaussianDensity {
    mu: DVector<f64>,
    inv: DMatrix<f64>,
    chol_l: DMatrix<f64>,
    log_norm: f64,
}

impl GaussianDensity {
    pub fn new(mu: Vec<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let p = mu.len();
        let chol = spd_cholesky(&sigma, "sigma")?;
        let log_norm = -0.5 * (p as f64 * (2.0 * std::f64::consts::PI).ln() + chol_log_det(&chol));
        let chol_l = chol.l().clone_owned();
        Ok(GaussianDensity { mu: DVector::from_vec(mu), inv: chol.inverse(), chol_l, log_norm })
    }
}

impl Density for GaussianDensity {
    fn dim(&self) -> usize {
        self.mu.len()
    }

    fn log_density(&self, y: &[f64]) -> f64 {
        let p = self.mu.len();
        let mut quad = 0.0;
        for i in 0..p {
            let di = y[i] - self.mu[i];
            for j in 0..p {
                quad += di * self.inv[(i, j)] * (y[j] - self.mu[j]);
            }
        }
        self.log_norm - 0.5 * quad
    }

    fn sample(&self, rng: &mut ChaCha12Rng) -> Option<Vec<f64>> {
        use rand_distr::{Distribution, StandardNormal};
        let z = DVector::from_iterator(self.mu.len(), (0..self.mu.len()).map(|_| StandardNormal.sample(rng)));
        Some((&self.mu + &self.chol_l * z).iter().copied().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct FnDensity<F: Fn(&[f64]) -> f64 + Sync> {
        d: usize,
        f: F,
    }

    impl<F: Fn(&[f64]) -> f64 + Sync> Density for FnDensity<F> {
        fn dim(&self) -> usize {
            self.d
        }

        fn log_density(&self, y: &[f64]) -> f64 {
            (self.f)(y).ln()
        }
    }

    fn unit_interval() -> Hyperrectangle {
        Hyperrectangle::unit_cube(1)
    }

    fn cfg_grid(points: usize) -> DivergenceConfig {
        DivergenceConfig { quadrature: Quadrature::Grid { points_per_axis: points }, ..Default::default() }
    }

    #[test]
    fn kl_of_identical_density_is_zero() {
        let u = FnDensity { d: 1, f: |_: &[f64]| 1.0 };
        let est = kl(&u, &u, &unit_interval(), &cfg_grid(512)).unwrap();
        assert!(est.value.abs() < 1e-12);
    }

    #[test]
    fn kl_gaussian_shift_is_half() {
        let s = GaussianDensity::new(vec![0.0], DMatrix::from_element(1, 1, 1.0)).unwrap();
        let t = GaussianDensity::new(vec![1.0], DMatrix::from_element(1, 1, 1.0)).unwrap();
        let domain = Hyperrectangle::new(vec![-8.0], vec![9.0]).unwrap();
        let est = kl(&s, &t, &domain, &cfg_grid(20_000)).unwrap();
        assert!((est.value - 0.5).abs() < 1e-6, "got {}", est.value);
    }

    #[test]
    fn kl_infinite_when_support_lost() {
        let s = FnDensity { d: 1, f: |_: &[f64]| 1.0 };
        let t = FnDensity { d: 1, f: |y: &[f64]| if y[0] < 0.5 { 0.0 } else { 2.0 } };
        let est = kl(&s, &t, &unit_interval(), &cfg_grid(512)).unwrap();
        assert!(est.value.is_infinite());
    }

    #[test]
    fn kl_rejects_unnormalized_input() {
        let s = FnDensity { d: 1, f: |_: &[f64]| 1.0 };
        let t = FnDensity { d: 1, f: |_: &[f64]| 1.7 };
        assert!(matches!(kl(&s, &t, &unit_interval(), &cfg_grid(128)), Err(Error::Contract(_))));
    }

    #[test]
    fn jkl_uniform_pair_closed_form() {
        // s uniform on [0,1], t uniform on [0.5,1], rho = 1/2:
        // 2 KL(s, (s+t)/2) = ln(4/3), by direct integration of the mixture.
        let s = FnDensity { d: 1, f: |_: &[f64]| 1.0 };
        let t = FnDensity { d: 1, f: |y: &[f64]| if y[0] >= 0.5 { 2.0 } else { 0.0 } };
        let est = jkl(&s, &t, &unit_interval(), &cfg_grid(1024)).unwrap();
        assert!((est.value - (4f64 / 3.0).ln()).abs() < 1e-9, "got {}", est.value);
        assert!(est.value.is_finite());
    }

    #[test]
    fn jkl_below_kl() {
        let s = GaussianDensity::new(vec![0.0], DMatrix::from_element(1, 1, 1.0)).unwrap();
        let t = GaussianDensity::new(vec![0.7], DMatrix::from_element(1, 1, 1.3)).unwrap();
        let domain = Hyperrectangle::new(vec![-9.0], vec![10.0]).unwrap();
        let cfg = cfg_grid(4096);
        let j = jkl(&s, &t, &domain, &cfg).unwrap().value;
        let k = kl(&s, &t, &domain, &cfg).unwrap().value;
        assert!(j <= k + 1e-9);
    }

    #[test]
    fn hellinger_examples() {
        let s = GaussianDensity::new(vec![0.0], DMatrix::from_element(1, 1, 1.0)).unwrap();
        let t = GaussianDensity::new(vec![1.0], DMatrix::from_element(1, 1, 1.0)).unwrap();
        let domain = Hyperrectangle::new(vec![-8.0], vec![9.0]).unwrap();
        let est = hellinger2(&s, &t, &domain, &cfg_grid(8192)).unwrap();
        let closed = 2.0 * (1.0 - (-0.125f64).exp());
        assert!((est.value - closed).abs() < 1e-6);

        let a = FnDensity { d: 1, f: |y: &[f64]| if y[0] < 0.5 { 2.0 } else { 0.0 } };
        let b = FnDensity { d: 1, f: |y: &[f64]| if y[0] >= 0.5 { 2.0 } else { 0.0 } };
        let est = hellinger2(&a, &b, &unit_interval(), &cfg_grid(512)).unwrap();
        assert!((est.value - 2.0).abs() < 1e-12);
    }

    #[test]
    fn gaussian_hellinger_closed_forms() {
        let sigma = DMatrix::from_element(1, 1, 1.0);
        assert!(gaussian_hellinger2(&[0.3], &sigma, &[0.3], &sigma).unwrap().abs() < 1e-14);
        let v = gaussian_hellinger2(&[0.0], &sigma, &[1.0], &sigma).unwrap();
        assert!((v - 2.0 * (1.0 - (-0.125f64).exp())).abs() < 1e-12);
        let eye = DMatrix::identity(2, 2);
        let v = gaussian_hellinger2(&[0.0, 0.0], &eye, &[2.0, 0.0], &eye).unwrap();
        assert!((v - 2.0 * (1.0 - (-0.5f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn gaussian_ratio_bound_examples() {
        let s2 = DMatrix::from_element(1, 1, 1.0);
        let s1 = DMatrix::from_element(1, 1, 0.5);
        let b = gaussian_ratio_bound(&[0.0], &s1, &[0.0], &s2).unwrap();
        assert!((b - 2f64.sqrt()).abs() < 1e-12);

        let delta = 0.3;
        let p = 3;
        let s1 = DMatrix::identity(p, p);
        let s2 = DMatrix::identity(p, p) * (1.0 + delta);
        let mu = vec![0.4, -0.2, 0.1];
        let b = gaussian_ratio_bound(&mu, &s1, &mu, &s2).unwrap();
        assert!((b - (1.0 + delta).powf(p as f64 / 2.0)).abs() < 1e-12);

        // Precondition violated: sigma1 larger than sigma2.
        assert!(gaussian_ratio_bound(&[0.0], &s2.clone_owned().resize(1, 1, 0.0).add_scalar(2.0), &[0.0], &DMatrix::from_element(1, 1, 1.0)).is_err());
    }

    #[test]
    fn ratio_bound_dominates_pointwise() {
        let mu1 = vec![0.2, -0.1];
        let mu2 = vec![-0.3, 0.4];
        let s1 = DMatrix::from_row_slice(2, 2, &[0.5, 0.1, 0.1, 0.4]);
        let s2 = DMatrix::from_row_slice(2, 2, &[1.2, 0.2, 0.2, 1.0]);
        let bound = gaussian_ratio_bound(&mu1, &s1, &mu2, &s2).unwrap();
        let g1 = GaussianDensity::new(mu1, s1).unwrap();
        let g2 = GaussianDensity::new(mu2, s2).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..10_000 {
            let y = g2.sample(&mut rng).unwrap();
            let ratio = (g1.log_density(&y) - g2.log_density(&y)).exp();
            assert!(ratio <= bound * (1.0 + 1e-10));
        }
    }

    #[test]
    fn gaussian_hellinger_closed_vs_monte_carlo() {
        let mu1 = vec![0.2, -0.4];
        let mu2 = vec![-0.5, 0.3];
        let s1 = DMatrix::from_row_slice(2, 2, &[1.1, 0.3, 0.3, 0.7]);
        let s2 = DMatrix::from_row_slice(2, 2, &[0.8, -0.2, -0.2, 1.4]);
        let closed = gaussian_hellinger2(&mu1, &s1, &mu2, &s2).unwrap();
        let g1 = GaussianDensity::new(mu1, s1).unwrap();
        let g2 = GaussianDensity::new(mu2, s2).unwrap();
        let cfg = DivergenceConfig {
            quadrature: Quadrature::MonteCarlo { samples: 200_000, seed: 5 },
            ..Default::default()
        };
        let domain = Hyperrectangle::new(vec![-12.0, -12.0], vec![12.0, 12.0]).unwrap();
        let mc = hellinger2(&g1, &g2, &domain, &cfg).unwrap();
        assert!(
            (mc.value - closed).abs() < 3.0 * mc.std_error,
            "closed {closed} vs mc {} +- {}",
            mc.value,
            mc.std_error
        );
    }

    #[test]
    fn mc_agrees_with_grid() {
        let s = GaussianDensity::new(vec![0.1], DMatrix::from_element(1, 1, 0.8)).unwrap();
        let t = GaussianDensity::new(vec![-0.4], DMatrix::from_element(1, 1, 1.1)).unwrap();
        let domain = Hyperrectangle::new(vec![-10.0], vec![10.0]).unwrap();
        let grid = kl(&s, &t, &domain, &cfg_grid(8192)).unwrap();
        let cfg = DivergenceConfig {
            quadrature: Quadrature::MonteCarlo { samples: 200_000, seed: 11 },
            ..Default::default()
        };
        let mc = kl(&s, &t, &domain, &cfg).unwrap();
        assert!((mc.value - grid.value).abs() < 4.0 * mc.std_error, "{} vs {}", mc.value, grid.value);
    }

    #[test]
    fn hellinger_grid_is_symmetric() {
        let s = FnDensity { d: 1, f: |y: &[f64]| 0.5 + y[0] };
        let t = FnDensity { d: 1, f: |y: &[f64]| 1.5 - y[0] };
        let a = hellinger2(&s, &t, &unit_interval(), &cfg_grid(512)).unwrap();
        let b = hellinger2(&t, &s, &unit_interval(), &cfg_grid(512)).unwrap();
        assert_eq!(a.value, b.value);
    }

    #[test]
    fn c_rho_at_half() {
        assert!((c_rho(0.5) - (2.0 * std::f64::consts::LN_2 - 1.0)).abs() < 1e-12);
    }

    struct ConstCond {
        inner: GaussianDensity,
    }

    impl ConditionalDensity for ConstCond {
        fn x_dim(&self) -> usize {
            1
        }

        fn y_dim(&self) -> usize {
            1
        }

        fn log_density(&self, _x: &[f64], y: &[f64]) -> f64 {
            self.inner.log_density(y)
        }
    }

    #[test]
    fn tensorized_reduces_to_plain_for_constant_conditionals() {
        let s = ConstCond { inner: GaussianDensity::new(vec![0.0], DMatrix::from_element(1, 1, 1.0)).unwrap() };
        let t = ConstCond { inner: GaussianDensity::new(vec![0.5], DMatrix::from_element(1, 1, 1.0)).unwrap() };
        let domain = Hyperrectangle::new(vec![-8.0], vec![9.0]).unwrap();
        let design: Vec<Vec<f64>> = (0..7).map(|i| vec![i as f64 / 7.0]).collect();
        let cfg = cfg_grid(2048);
        let tens = tensorized(DivKind::Kl, &s, &t, &design, &domain, &cfg).unwrap();
        let plain = kl(&s.inner, &t.inner, &domain, &cfg).unwrap();
        assert!((tens.value - plain.value).abs() < 1e-12);
    }
}
