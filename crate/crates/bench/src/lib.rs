//! Shared fixtures for the benchmarks.

use rand::Rng;
use robflat::{rng, Activation, Batch, Network, NetworkSpec, ParamVector, Tensor};

/// Uniform inputs in `[0, 1]` with uniform labels.
pub fn batch(n: usize, dim: usize, classes: usize, seed: u64) -> Batch {
    let mut r = rng::seeded(seed);
    let data = (0..n * dim).map(|_| r.random::<f64>()).collect();
    let labels = (0..n).map(|_| r.random_range(0..classes)).collect();
    Batch::new(Tensor::matrix(n, dim, data).expect("shape"), labels).expect("labels")
}

/// A two-layer MLP of the size used by the small training runs.
pub fn mlp(dim: usize, hidden: usize, classes: usize, batchnorm: bool) -> (Network, ParamVector) {
    let sizes = [dim, hidden, classes];
    let spec = if batchnorm {
        NetworkSpec::mlp_batchnorm(&sizes, Activation::Relu)
    } else {
        NetworkSpec::mlp(&sizes, Activation::Relu)
    };
    let net = Network::new(spec).expect("valid spec");
    let params = net.init_params(&mut rng::seeded(0));
    (net, params)
}
