//! Curvature of the clean loss: Hessian-vector products by central differences
//! of gradients, extreme eigenvalues by (shifted) power iteration.
//!
//! Only non-batch-norm parameters are differentiated; batch-norm entries of
//! every vector are held at zero.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Direction, ParamVector};

/// Anything that can report the loss gradient at given weights.
pub trait GradientSource: Sync {
    fn gradient(&self, weights: &ParamVector) -> Result<Direction>;
}

/// `(grad(w + h v) - grad(w - h v)) / 2h` with `h = 1e-4 / ||v||`.
pub fn hvp<G: GradientSource + ?Sized>(source: &G, weights: &ParamVector, v: &Direction) -> Result<Direction> {
    weights.check_layout(v)?;
    let mut v = v.clone();
    v.mask_batchnorm(weights);
    if !v.is_finite() {
        return Err(Error::NonFinite("Hessian-vector product input".into()));
    }
    let n = v.norm();
    if n == 0.0 {
        return Ok(weights.zeros_direction());
    }
    let h = 1e-4 / n;
    let plus = weights.perturbed(&v, h)?;
    let minus = weights.perturbed(&v, -h)?;
    let (gp, gm) = rayon::join(|| source.gradient(&plus), || source.gradient(&minus));
    let mut out = gp?;
    out.axpy(-1.0, &gm?);
    out.scale(0.5 / h);
    out.mask_batchnorm(weights);
    if !out.is_finite() {
        return Err(Error::NonFinite("Hessian-vector product".into()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerConfig {
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for PowerConfig {
    fn default() -> Self {
        Self { tol: 1e-4, max_iters: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Eigenpair {
    pub value: f64,
    pub vector: Direction,
    pub iterations: usize,
    /// `||H v - value v||` for the unit vector `v`.
    pub residual: f64,
    pub converged: bool,
}

fn random_unit(weights: &ParamVector, rng: &mut impl Rng) -> Result<Direction> {
    let mut v = weights.zeros_direction();
    for (p, e) in v.parts_mut().iter_mut().zip(weights.entries()) {
        if !e.role.is_batchnorm() {
            for x in p.data_mut() {
                *x = rng.sample(StandardNormal);
            }
        }
    }
    let n = v.norm();
    if n == 0.0 {
        return Err(Error::Breakdown("no parameters to take a Hessian over".into()));
    }
    v.scale(1.0 / n);
    Ok(v)
}

fn power_iteration<G: GradientSource + ?Sized>(
    source: &G,
    weights: &ParamVector,
    shift: f64,
    cfg: &PowerConfig,
    rng: &mut impl Rng,
) -> Result<Eigenpair> {
    if !(cfg.tol > 0.0) {
        return Err(Error::Config("power iteration tolerance must be > 0".into()));
    }
    let mut v = random_unit(weights, rng)?;
    let mut last = None;
    for it in 1..=cfg.max_iters.max(1) {
        let hv = hvp(source, weights, &v)?;
        let lambda = v.dot(&hv);
        let mut r = hv.clone();
        r.axpy(-lambda, &v);
        let residual = r.norm();
        // Iterate on (H - shift I).
        let mut next = hv;
        next.axpy(-shift, &v);
        let n = next.norm();
        if residual < cfg.tol {
            return Ok(Eigenpair { value: lambda, vector: v, iterations: it, residual, converged: true });
        }
        if n == 0.0 || !n.is_finite() {
            return Err(Error::Breakdown(format!("power iterate vanished at iteration {it}")));
        }
        last = Some((lambda, residual, it));
        next.scale(1.0 / n);
        v = next;
    }
    let (value, residual, iterations) = last.expect("at least one iteration");
    Ok(Eigenpair { value, vector: v, iterations, residual, converged: false })
}

/// Dominant (largest-magnitude) eigenvalue by power iteration.
pub fn max_eigenvalue<G: GradientSource + ?Sized>(
    source: &G,
    weights: &ParamVector,
    cfg: &PowerConfig,
    rng: &mut impl Rng,
) -> Result<Eigenpair> {
    power_iteration(source, weights, 0.0, cfg, rng)
}

/// The eigenvalue at the opposite end of the spectrum from `lambda_max`, by
/// power iteration on `H - lambda_max I`.
pub fn min_eigenvalue<G: GradientSource + ?Sized>(
    source: &G,
    weights: &ParamVector,
    lambda_max: f64,
    cfg: &PowerConfig,
    rng: &mut impl Rng,
) -> Result<Eigenpair> {
    power_iteration(source, weights, lambda_max, cfg, rng)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EigenReport {
    pub lambda_max: f64,
    pub lambda_min: f64,
    /// `|lambda_min| / |lambda_max|`.
    pub convexity_ratio: f64,
    pub iterations: [usize; 2],
    pub residuals: [f64; 2],
    pub converged: bool,
}

/// Both ends of the spectrum and the convexity ratio.
pub fn eigen_report<G: GradientSource + ?Sized>(
    source: &G,
    weights: &ParamVector,
    cfg: &PowerConfig,
    rng: &mut impl Rng,
) -> Result<EigenReport> {
    let top = max_eigenvalue(source, weights, cfg, rng)?;
    let other = min_eigenvalue(source, weights, top.value, cfg, rng)?;
    let (hi, lo) = if top.value >= other.value { (&top, &other) } else { (&other, &top) };
    Ok(EigenReport {
        lambda_max: hi.value,
        lambda_min: lo.value,
        convexity_ratio: lo.value.abs() / hi.value.abs(),
        iterations: [hi.iterations, lo.iterations],
        residuals: [hi.residual, lo.residual],
        converged: top.converged && other.converged,
    })
}

/// Loss `0.5 w^T A w` over all non-batch-norm coordinates, flattened in entry
/// order. A closed-form reference for the estimators above.
#[derive(Debug, Clone)]
pub struct QuadraticForm {
    pub matrix: Vec<Vec<f64>>,
}

impl QuadraticForm {
    pub fn diagonal(values: &[f64]) -> Self {
        let n = values.len();
        let matrix = (0..n).map(|i| (0..n).map(|j| if i == j { values[i] } else { 0.0 }).collect()).collect();
        Self { matrix }
    }

    pub fn loss(&self, weights: &ParamVector) -> f64 {
        let w = weights.flat();
        let aw = self.apply(&w);
        0.5 * crate::tensor::dot(&w, &aw)
    }

    fn apply(&self, w: &[f64]) -> Vec<f64> {
        self.matrix.iter().map(|row| crate::tensor::dot(row, w)).collect()
    }
}

impl GradientSource for QuadraticForm {
    fn gradient(&self, weights: &ParamVector) -> Result<Direction> {
        let w = weights.flat();
        if w.len() != self.matrix.len() {
            return Err(Error::Shape(format!("quadratic of size {} given {} weights", self.matrix.len(), w.len())));
        }
        let g = self.apply(&w);
        let mut out = weights.zeros_direction();
        let mut k = 0;
        for p in out.parts_mut() {
            for x in p.data_mut() {
                *x = g[k];
                k += 1;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamEntry, Role};
    use crate::rng;
    use crate::tensor::Tensor;

    fn point(values: &[f64]) -> ParamVector {
        ParamVector::new(vec![ParamEntry {
            layer: 0,
            role: Role::Weight,
            value: Tensor::matrix(1, values.len(), values.to_vec()).unwrap(),
        }])
    }

    #[test]
    fn zero_vector_gives_zero_product() {
        let q = QuadraticForm::diagonal(&[1.0, 2.0]);
        let w = point(&[0.3, -0.1]);
        let out = hvp(&q, &w, &w.zeros_direction()).unwrap();
        assert_eq!(out.flat(), vec![0.0, 0.0]);
    }

    #[test]
    fn zero_hessian_converges_to_zero() {
        let q = QuadraticForm::diagonal(&[0.0, 0.0]);
        let r = max_eigenvalue(&q, &point(&[1.0, 1.0]), &PowerConfig::default(), &mut rng::seeded(0)).unwrap();
        assert_eq!(r.value, 0.0);
        assert!(r.converged);
    }

    #[test]
    fn no_geometry_parameters_is_a_breakdown() {
        let w = ParamVector::new(vec![ParamEntry { layer: 1, role: Role::BnGamma, value: Tensor::full(vec![2], 1.0) }]);
        let q = QuadraticForm::diagonal(&[1.0, 1.0]);
        let r = max_eigenvalue(&q, &w, &PowerConfig::default(), &mut rng::seeded(0));
        assert!(matches!(r, Err(Error::Breakdown(_))));
    }
}
