#![allow(dead_code)]

use rand::Rng;
use robflat::nn::{Activation, NetworkSpec, ParamVector};
use robflat::{rng, Batch, Network, Tensor};

pub fn random_batch(n: usize, d: usize, k: usize, seed: u64) -> Batch {
    let mut r = rng::seeded(seed);
    let data = (0..n * d).map(|_| r.random::<f64>()).collect();
    let labels = (0..n).map(|_| r.random_range(0..k)).collect();
    Batch::new(Tensor::matrix(n, d, data).unwrap(), labels).unwrap()
}

/// Randomizes every trainable entry (including biases and batch-norm affine
/// parameters) so that gradient checks exercise all of them.
pub fn randomize(params: &mut ParamVector, seed: u64) {
    let mut r = rng::seeded(seed);
    for e in params.entries_mut() {
        if e.role.is_trainable() {
            for v in e.value.data_mut() {
                *v = r.random_range(-0.8..0.8);
            }
            if e.role == robflat::nn::Role::BnGamma {
                for v in e.value.data_mut() {
                    *v += 1.0;
                }
            }
        } else if e.role == robflat::nn::Role::BnRunningVar {
            for v in e.value.data_mut() {
                *v = r.random_range(0.5..1.5);
            }
        } else {
            for v in e.value.data_mut() {
                *v = r.random_range(-0.2..0.2);
            }
        }
    }
}

pub fn seeded_net(spec: NetworkSpec, seed: u64) -> (Network, ParamVector) {
    let net = Network::new(spec).unwrap();
    let mut params = net.init_params(&mut rng::seeded(seed));
    randomize(&mut params, seed + 1000);
    (net, params)
}

/// A small zoo of architectures used by gradient checks.
pub fn zoo() -> Vec<NetworkSpec> {
    let mut with_bn_hidden = NetworkSpec::mlp(&[3, 6, 4], Activation::Gelu);
    with_bn_hidden.layers.insert(1, robflat::nn::LayerSpec::BatchNorm { features: 6 });
    vec![
        NetworkSpec::mlp(&[2, 4, 3], Activation::Silu),
        NetworkSpec::mlp(&[3, 5, 5, 4], Activation::Mish),
        NetworkSpec::mlp(&[4, 6, 2], Activation::Gelu),
        NetworkSpec::mlp_batchnorm(&[3, 5, 3], Activation::Silu),
        with_bn_hidden,
        NetworkSpec::mlp(&[5, 3], Activation::Relu),
    ]
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}
