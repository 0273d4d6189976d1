//! Weight-space direction arithmetic around a reference point `w`.
//!
//! Every operation works on groups of coordinates: one group per non-batch-norm
//! parameter entry (per-layer), or one group per output row of each weight
//! matrix (per-filter). Batch-norm entries of a direction are always zero.

use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};
use crate::nn::{Direction, NetworkSpec, ParamVector, Role};
use crate::tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    #[default]
    PerLayer,
    /// Each output row of a weight matrix is its own group; biases stay whole.
    PerFilter,
}

/// Radial law for random samples in the ball.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Radial {
    /// Uniform in the ball: radius scaled by `U^(1/n)`.
    #[default]
    UniformBall,
    /// Uniform on the sphere of radius `xi * ||w||`.
    Sphere,
}

/// The relative ball `{ nu : ||nu_g|| <= xi * ||w_g|| for every group g }`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BallSpec {
    pub xi: f64,
    #[serde(default)]
    pub granularity: Granularity,
    #[serde(default)]
    pub radial: Radial,
}

impl BallSpec {
    pub fn per_layer(xi: f64) -> Self {
        Self { xi, granularity: Granularity::PerLayer, radial: Radial::UniformBall }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.xi >= 0.0) || !self.xi.is_finite() {
            return Err(Error::Config(format!("ball radius xi must be >= 0, got {}", self.xi)));
        }
        Ok(())
    }
}

/// A contiguous block of coordinates inside one parameter entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Group {
    pub entry: usize,
    pub range: Range<usize>,
}

pub fn groups(reference: &ParamVector, granularity: Granularity) -> Vec<Group> {
    let mut out = Vec::new();
    for (entry, e) in reference.entries().iter().enumerate() {
        if e.role.is_batchnorm() {
            continue;
        }
        let len = e.value.len();
        match (granularity, e.role) {
            (Granularity::PerFilter, Role::Weight) if e.value.shape().len() == 2 => {
                let cols = e.value.cols();
                for r in 0..e.value.rows() {
                    out.push(Group { entry, range: r * cols..(r + 1) * cols });
                }
            }
            _ => out.push(Group { entry, range: 0..len }),
        }
    }
    out
}

fn slice<'a>(d: &'a Direction, g: &Group) -> &'a [f64] {
    &d.parts()[g.entry].data()[g.range.clone()]
}

fn slice_mut<'a>(d: &'a mut Direction, g: &Group) -> &'a mut [f64] {
    &mut d.parts_mut()[g.entry].data_mut()[g.range.clone()]
}

fn ref_norm(reference: &ParamVector, g: &Group) -> f64 {
    tensor::norm(&reference.entries()[g.entry].value.data()[g.range.clone()])
}

/// Scales `v` so that its norm does not exceed `radius`, absorbing rounding.
fn shrink_into(v: &mut [f64], radius: f64) {
    let mut n = tensor::norm(v);
    let mut factor = 1.0;
    while n > radius {
        factor *= radius / n * (1.0 - f64::EPSILON);
        let scaled: Vec<f64> = v.iter().map(|x| x * factor).collect();
        n = tensor::norm(&scaled);
        if n <= radius {
            v.copy_from_slice(&scaled);
            return;
        }
    }
}

/// Rescales each group of `dir` to the norm of the matching group of `reference`.
///
/// Groups whose reference norm is zero are set to zero (with a warning). A zero
/// direction group against a nonzero reference is an error.
pub fn normalize(dir: &Direction, reference: &ParamVector, granularity: Granularity) -> Result<Direction> {
    normalize_impl(dir, reference, granularity, true)
}

/// Like [`normalize`], but zero direction groups stay zero instead of failing.
/// Used to normalize gradients, where a layer may legitimately receive none.
pub fn normalize_or_zero(dir: &Direction, reference: &ParamVector, granularity: Granularity) -> Result<Direction> {
    normalize_impl(dir, reference, granularity, false)
}

fn normalize_impl(
    dir: &Direction,
    reference: &ParamVector,
    granularity: Granularity,
    strict: bool,
) -> Result<Direction> {
    reference.check_layout(dir)?;
    let mut out = dir.clone();
    out.mask_batchnorm(reference);
    for g in groups(reference, granularity) {
        let wn = ref_norm(reference, &g);
        let dn = tensor::norm(slice(&out, &g));
        let v = slice_mut(&mut out, &g);
        if wn == 0.0 {
            if dn != 0.0 {
                warn!(entry = g.entry, "zero-norm reference group; direction left at zero");
            }
            v.iter_mut().for_each(|x| *x = 0.0);
        } else if dn == 0.0 {
            if strict {
                return Err(Error::DegenerateDirection { entry: g.entry });
            }
        } else {
            let s = wn / dn;
            v.iter_mut().for_each(|x| *x *= s);
        }
    }
    Ok(out)
}

/// Draws a direction in the relative ball, independently per group.
pub fn sample_in_ball(reference: &ParamVector, ball: &BallSpec, rng: &mut impl Rng) -> Direction {
    let mut out = reference.zeros_direction();
    for g in groups(reference, ball.granularity) {
        let radius = ball.xi * ref_norm(reference, &g);
        let v = slice_mut(&mut out, &g);
        for x in v.iter_mut() {
            *x = rng.sample(StandardNormal);
        }
        let u: f64 = rng.random();
        let n = tensor::norm(v);
        if n == 0.0 || radius == 0.0 {
            v.iter_mut().for_each(|x| *x = 0.0);
            continue;
        }
        let r = match ball.radial {
            Radial::UniformBall => radius * u.powf(1.0 / v.len() as f64),
            Radial::Sphere => radius,
        };
        v.iter_mut().for_each(|x| *x *= r / n);
        shrink_into(v, radius);
    }
    out
}

/// Per-group Euclidean projection onto the relative ball.
pub fn project_to_ball(dir: &Direction, reference: &ParamVector, ball: &BallSpec) -> Result<Direction> {
    reference.check_layout(dir)?;
    let mut out = dir.clone();
    out.mask_batchnorm(reference);
    for g in groups(reference, ball.granularity) {
        let radius = ball.xi * ref_norm(reference, &g);
        let v = slice_mut(&mut out, &g);
        let n = tensor::norm(v);
        if n > radius {
            if radius == 0.0 {
                v.iter_mut().for_each(|x| *x = 0.0);
            } else {
                v.iter_mut().for_each(|x| *x *= radius / n);
                shrink_into(v, radius);
            }
        }
    }
    Ok(out)
}

/// Whether `dir` lies in the ball (batch-norm entries must be zero).
pub fn in_ball(dir: &Direction, reference: &ParamVector, ball: &BallSpec) -> bool {
    if reference.check_layout(dir).is_err() {
        return false;
    }
    let bn_zero = dir
        .parts()
        .iter()
        .zip(reference.entries())
        .filter(|(_, e)| e.role.is_batchnorm())
        .all(|(p, _)| p.data().iter().all(|v| *v == 0.0));
    bn_zero
        && groups(reference, ball.granularity)
            .iter()
            .all(|g| tensor::norm(slice(dir, g)) <= ball.xi * ref_norm(reference, g))
}

/// `w + s * dir`; batch-norm parameters are copied unchanged.
pub fn perturb(reference: &ParamVector, dir: &Direction, s: f64) -> Result<ParamVector> {
    reference.perturbed(dir, s)
}

/// Multiplies the weights and biases of the selected dense layers by `factor`.
///
/// Every selected layer must be immediately followed by batch normalization; the
/// running statistics of that batch norm are rescaled (mean by `factor`,
/// variance by `factor^2`) so that both train- and eval-mode predictions are
/// unchanged.
pub fn scale_layers(
    spec: &NetworkSpec,
    reference: &ParamVector,
    factor: f64,
    layers: &[usize],
) -> Result<ParamVector> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::Config(format!("scale factor must be positive, got {factor}")));
    }
    let mut out = reference.clone();
    for &layer in layers {
        let is_dense = matches!(spec.layers.get(layer), Some(crate::nn::LayerSpec::Dense { .. }));
        if !is_dense || !spec.followed_by_batchnorm(layer) {
            return Err(Error::NotBatchNormFollowed(layer));
        }
        let bn = layer + 1;
        for e in out.entries_mut() {
            match (e.layer, e.role) {
                (l, Role::Weight | Role::Bias) if l == layer => e.value.scale(factor),
                (l, Role::BnRunningMean) if l == bn => e.value.scale(factor),
                (l, Role::BnRunningVar) if l == bn => e.value.scale(factor * factor),
                _ => {}
            }
        }
    }
    Ok(out)
}

/// [`scale_layers`] applied to every batch-norm-followed dense layer.
pub fn scale_all_batchnorm_layers(spec: &NetworkSpec, reference: &ParamVector, factor: f64) -> Result<ParamVector> {
    let layers = spec.batchnorm_followed_layers();
    if layers.is_empty() {
        return Err(Error::Config("network has no batch-norm-followed dense layers to scale".into()));
    }
    scale_layers(spec, reference, factor, &layers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamEntry;
    use crate::rng;
    use crate::tensor::Tensor;

    fn two_layers() -> ParamVector {
        ParamVector::new(vec![
            ParamEntry { layer: 0, role: Role::Weight, value: Tensor::matrix(1, 2, vec![0.0, 3.0]).unwrap() },
            ParamEntry { layer: 0, role: Role::Bias, value: Tensor::new(vec![2], vec![4.0, 0.0]).unwrap() },
            ParamEntry { layer: 1, role: Role::BnGamma, value: Tensor::new(vec![1], vec![1.0]).unwrap() },
        ])
    }

    #[test]
    fn normalize_self_is_identity() {
        let p = two_layers();
        let d = Direction::new(p.entries().iter().map(|e| e.value.clone()).collect());
        let n = normalize(&d, &p, Granularity::PerLayer).unwrap();
        assert_eq!(n.parts()[0], p.entries()[0].value);
        assert_eq!(n.parts()[1], p.entries()[1].value);
        assert_eq!(n.parts()[2].data(), &[0.0]);
        let doubled = normalize(&d.scaled(2.0), &p, Granularity::PerLayer).unwrap();
        assert_eq!(doubled, n);
    }

    #[test]
    fn normalize_hits_layer_norms() {
        let p = two_layers();
        let d = sample_in_ball(&p, &BallSpec { radial: Radial::Sphere, ..BallSpec::per_layer(1.0) }, &mut rng::seeded(3));
        let n = normalize(&d, &p, Granularity::PerLayer).unwrap();
        assert!((n.parts()[0].norm() - 3.0).abs() < 3e-12);
        assert!((n.parts()[1].norm() - 4.0).abs() < 4e-12);
    }

    #[test]
    fn degenerate_direction_errors() {
        let p = two_layers();
        let mut d = p.zeros_direction();
        d.parts_mut()[1].data_mut()[0] = 1.0;
        assert!(matches!(
            normalize(&d, &p, Granularity::PerLayer),
            Err(Error::DegenerateDirection { entry: 0 })
        ));
        let lenient = normalize_or_zero(&d, &p, Granularity::PerLayer).unwrap();
        assert_eq!(lenient.parts()[0].norm(), 0.0);
        assert!((lenient.parts()[1].norm() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_reference_layer_leaves_zero() {
        let mut p = two_layers();
        p.entries_mut()[1].value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        let d = Direction::new(vec![
            Tensor::matrix(1, 2, vec![1.0, 1.0]).unwrap(),
            Tensor::new(vec![2], vec![1.0, 1.0]).unwrap(),
            Tensor::new(vec![1], vec![1.0]).unwrap(),
        ]);
        let n = normalize(&d, &p, Granularity::PerLayer).unwrap();
        assert_eq!(n.parts()[1].norm(), 0.0);
    }

    #[test]
    fn per_filter_groups_rows() {
        let p = ParamVector::new(vec![
            ParamEntry { layer: 0, role: Role::Weight, value: Tensor::matrix(2, 2, vec![3.0, 4.0, 0.0, 1.0]).unwrap() },
            ParamEntry { layer: 0, role: Role::Bias, value: Tensor::new(vec![2], vec![1.0, 1.0]).unwrap() },
        ]);
        assert_eq!(groups(&p, Granularity::PerFilter).len(), 3);
        let d = Direction::new(vec![
            Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 2.0]).unwrap(),
            Tensor::new(vec![2], vec![1.0, 0.0]).unwrap(),
        ]);
        let n = normalize(&d, &p, Granularity::PerFilter).unwrap();
        assert_eq!(n.parts()[0].data(), &[5.0, 0.0, 0.0, 1.0]);
        assert!((n.parts()[1].data()[0] - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn zero_radius_gives_zero() {
        let p = two_layers();
        let d = sample_in_ball(&p, &BallSpec::per_layer(0.0), &mut rng::seeded(1));
        assert_eq!(d.norm(), 0.0);
    }

    #[test]
    fn projection_scales_radially() {
        let p = ParamVector::new(vec![ParamEntry {
            layer: 0,
            role: Role::Weight,
            value: Tensor::matrix(1, 1, vec![2.0]).unwrap(),
        }]);
        let d = Direction::new(vec![Tensor::matrix(1, 1, vec![10.0]).unwrap()]);
        let q = project_to_ball(&d, &p, &BallSpec::per_layer(0.5)).unwrap();
        assert!((q.parts()[0].data()[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn scale_layers_requires_batchnorm() {
        let spec = NetworkSpec::mlp(&[2, 3, 2], crate::nn::Activation::Relu);
        let net = crate::nn::Network::new(spec.clone()).unwrap();
        let p = net.init_params(&mut rng::seeded(0));
        assert!(matches!(scale_layers(&spec, &p, 2.0, &[0]), Err(Error::NotBatchNormFollowed(0))));
        let bn = NetworkSpec::mlp_batchnorm(&[2, 3, 2], crate::nn::Activation::Relu);
        let net = crate::nn::Network::new(bn.clone()).unwrap();
        let p = net.init_params(&mut rng::seeded(0));
        assert!(matches!(scale_layers(&bn, &p, 0.0, &[0]), Err(Error::Config(_))));
        assert_eq!(scale_layers(&bn, &p, 1.0, &[0, 3]).unwrap(), p);
    }
}
