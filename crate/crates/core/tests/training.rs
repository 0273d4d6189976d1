mod common;

use robflat::attacks::{self, AttackConfig};
use robflat::data::{make_synthetic, SyntheticKind, SyntheticSpec};
use robflat::flatness::QuadraticBowl;
use robflat::hessian::GradientSource;
use robflat::geometry::Granularity;
use robflat::nn::{Activation, Model, NetworkSpec, ParamEntry, Role};
use robflat::training::{
    self, awp_step, clip_weights, equivalent_smoothing, expected_noisy_distribution, inject_label_noise,
    pgd_tau_attack, smooth_labels, trades_loss, update_weight_average, Schedule, TrainConfig, Variant,
};
use robflat::{rng, Batch, Dataset, Mode, Network, ParamVector, Tensor};

fn dataset(seed: u64) -> Dataset {
    let spec = SyntheticSpec { kind: SyntheticKind::Gaussians, n: 48, dim: 4, classes: 3, margin: 0.4, noise: 0.1 };
    make_synthetic(&spec, &mut rng::seeded(seed)).unwrap().split_off_test(16).unwrap()
}

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        base_lr: 0.05,
        schedule: Schedule::Constant,
        momentum: 0.9,
        weight_decay: 0.0,
        attack: AttackConfig { epsilon: 0.05, steps: 3, step_size: 0.02, restarts: 1, signed_gradient: true, random_init: true },
        variant: Variant::PlainAt,
        label_smoothing: 0.0,
        label_noise: 0.0,
        weight_clip: None,
        clip_batchnorm: false,
        weight_average: None,
        early_stop: Default::default(),
        pgd_tau: None,
        augment: true,
        seed: 3,
    }
}

fn net() -> Network {
    Network::new(NetworkSpec::mlp(&[4, 8, 3], Activation::Relu)).unwrap()
}

fn no_hook(_: &robflat::Checkpoint) -> robflat::Result<()> {
    Ok(())
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let net = net();
    let init = net.init_params(&mut rng::seeded(3));
    let out = training::train(&net, &dataset(1), &config(0), None, no_hook).unwrap();
    assert_eq!(out.final_checkpoint.params, init);
    assert_eq!(out.metrics.len(), 1);
    assert_eq!(out.metrics[0].epoch, 0);
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let net = net();
    let cfg = TrainConfig { base_lr: 0.0, weight_decay: 0.1, ..config(3) };
    let out = training::train(&net, &dataset(1), &cfg, None, no_hook).unwrap();
    assert_eq!(out.final_checkpoint.params, net.init_params(&mut rng::seeded(3)));
    assert_eq!(out.metrics.len(), 4);
}

#[test]
fn training_is_deterministic_and_reduces_training_loss() {
    let net = net();
    let cfg = config(15);
    let mut seen = Vec::new();
    let a = training::train(&net, &dataset(2), &cfg, None, |ck| {
        seen.push(ck.epoch);
        Ok(())
    })
    .unwrap();
    let b = training::train(&net, &dataset(2), &cfg, None, no_hook).unwrap();
    assert_eq!(a, b);
    assert_eq!(seen, (0..=15).collect::<Vec<_>>());
    assert!(a.metrics[15].train_rce < a.metrics[0].train_rce);
    assert!(a.metrics[15].train_ce < a.metrics[0].train_ce);
}

#[test]
fn awp_with_zero_radius_is_plain_adversarial_training() {
    let net = net();
    let plain = training::train(&net, &dataset(4), &config(4), None, no_hook).unwrap();
    let cfg = TrainConfig { variant: Variant::Awp { xi: 0.0, inner_iters: 1 }, ..config(4) };
    let awp = training::train(&net, &dataset(4), &cfg, None, no_hook).unwrap();
    assert_eq!(plain.final_checkpoint.params, awp.final_checkpoint.params);
    assert_eq!(plain.metrics, awp.metrics);
}

#[test]
fn awp_perturbation_never_reaches_the_stored_weights() {
    // With a zero learning rate the update is a no-op, so any difference
    // from the initialization would have to be a leaked perturbation.
    let net = net();
    let cfg = TrainConfig { base_lr: 0.0, variant: Variant::Awp { xi: 0.05, inner_iters: 2 }, ..config(2) };
    let out = training::train(&net, &dataset(5), &cfg, None, no_hook).unwrap();
    assert_eq!(out.final_checkpoint.params, net.init_params(&mut rng::seeded(3)));
}

#[test]
fn awp_step_saturates_every_layer_with_a_gradient() {
    let net = net();
    let params = net.init_params(&mut rng::seeded(9));
    let batch = common::random_batch(10, 4, 3, 9);
    let xi = 0.02;
    let nu = awp_step(&params, xi, 1, Granularity::PerLayer, |w| net.grad_params(w, &batch, Mode::Train)).unwrap();
    for (part, e) in nu.parts().iter().zip(params.entries()) {
        let want = xi * e.value.norm();
        assert!((part.norm() - want).abs() <= 1e-12 * want.max(1.0), "{:?}: {} vs {want}", e.role, part.norm());
    }
    let none = awp_step(&params, 0.0, 1, Granularity::PerLayer, |w| net.grad_params(w, &batch, Mode::Train)).unwrap();
    assert_eq!(none.norm(), 0.0);
}

#[test]
fn awp_step_ascends_on_a_quadratic() {
    let center = ParamVector::new(vec![ParamEntry {
        layer: 0,
        role: Role::Weight,
        value: Tensor::matrix(1, 3, vec![0.0; 3]).unwrap(),
    }]);
    let bowl = QuadraticBowl::new(center, vec![1.0, 2.0, 0.5]).unwrap();
    let w = ParamVector::new(vec![ParamEntry {
        layer: 0,
        role: Role::Weight,
        value: Tensor::matrix(1, 3, vec![0.4, -0.3, 0.9]).unwrap(),
    }]);
    for iters in [1, 3] {
        let nu = awp_step(&w, 0.1, iters, Granularity::PerLayer, |p| bowl.gradient(p)).unwrap();
        assert!(bowl.loss(&w.perturbed(&nu, 1.0).unwrap()) > bowl.loss(&w));
        assert!(nu.norm() <= 0.1 * w.entries()[0].value.norm() * (1.0 + 1e-12));
    }
}

#[test]
fn trades_reduces_to_cross_entropy() {
    let net = net();
    let params = net.init_params(&mut rng::seeded(1));
    let batch = common::random_batch(12, 4, 3, 2);
    let ce = net.cross_entropy(&params, &batch, Mode::Eval).unwrap().mean;
    // The KL term has zero gradient at the clean point, so the attack needs a random start.
    let attack = AttackConfig { epsilon: 0.1, steps: 5, step_size: 0.03, random_init: true, ..AttackConfig::none() };

    let l0 = trades_loss(&net, &params, &batch, 0.0, &attack, Mode::Eval, &mut rng::seeded(0)).unwrap();
    assert!((l0 - ce).abs() < 1e-12);

    let frozen = AttackConfig { epsilon: 0.0, ..attack };
    let lz = trades_loss(&net, &params, &batch, 6.0, &frozen, Mode::Eval, &mut rng::seeded(0)).unwrap();
    assert!((lz - ce).abs() < 1e-12);

    for lambda in [0.5, 1.0, 6.0] {
        let l = trades_loss(&net, &params, &batch, lambda, &attack, Mode::Eval, &mut rng::seeded(0)).unwrap();
        assert!(l > ce, "lambda {lambda}: {l} <= {ce}");
    }
}

/// Two-class linear model on one input: class 1 wins for `x > 0.5`.
fn threshold_model() -> (Network, ParamVector) {
    let net = Network::new(NetworkSpec::mlp(&[1, 2], Activation::Relu)).unwrap();
    let mut p = net.init_params(&mut rng::seeded(0));
    for e in p.entries_mut() {
        let v = match e.role {
            Role::Weight => vec![-2.0, 2.0],
            Role::Bias => vec![1.0, -1.0],
            _ => continue,
        };
        e.value.data_mut().copy_from_slice(&v);
    }
    (net, p)
}

#[test]
fn pgd_tau_stops_tau_steps_after_the_flip() {
    let (net, p) = threshold_model();
    let model = Model::eval(&net, &p);
    let batch = Batch::new(Tensor::matrix(1, 1, vec![0.31]).unwrap(), vec![0]).unwrap();
    let cfg = AttackConfig { epsilon: 0.5, steps: 10, step_size: 0.04, restarts: 1, signed_gradient: true, random_init: false };
    // Iterates are 0.31 + 0.04 t; the first one past 0.5 is t = 5.
    for tau in 0..8 {
        let out = pgd_tau_attack(&model, &batch, tau, &cfg, &mut rng::seeded(0)).unwrap();
        let t = (5 + tau).min(10) as f64;
        assert!((out.inputs.data()[0] - (0.31 + 0.04 * t)).abs() < 1e-12, "tau {tau}");
    }
}

#[test]
fn pgd_tau_with_large_tau_is_plain_pgd() {
    let net = net();
    let p = net.init_params(&mut rng::seeded(4));
    let model = Model::eval(&net, &p);
    let batch = common::random_batch(16, 4, 3, 4);
    let cfg = AttackConfig { epsilon: 0.2, steps: 6, step_size: 0.05, restarts: 1, signed_gradient: true, random_init: true };
    let plain = attacks::pgd_linf(&model, &batch, &cfg, &mut rng::seeded(8)).unwrap();
    for tau in [6, 9] {
        let t = pgd_tau_attack(&model, &batch, tau, &cfg, &mut rng::seeded(8)).unwrap();
        assert_eq!(t.inputs, plain.inputs);
    }
}

#[test]
fn pgd_tau_zero_skips_misclassified_examples() {
    let (net, p) = threshold_model();
    let model = Model::eval(&net, &p);
    // The first example is already on the wrong side, the second is not.
    let batch = Batch::new(Tensor::matrix(2, 1, vec![0.7, 0.2]).unwrap(), vec![0, 0]).unwrap();
    let cfg = AttackConfig { epsilon: 0.1, steps: 5, step_size: 0.03, restarts: 1, signed_gradient: true, random_init: false };
    let out = pgd_tau_attack(&model, &batch, 0, &cfg, &mut rng::seeded(0)).unwrap();
    assert_eq!(out.inputs.data()[0], 0.7);
    assert!(out.inputs.data()[1] > 0.2);
}

#[test]
fn clipping() {
    let net = Network::new(NetworkSpec::mlp_batchnorm(&[3, 4, 2], Activation::Relu)).unwrap();
    let mut p = net.init_params(&mut rng::seeded(2));
    common::randomize(&mut p, 5);
    p.entries_mut()[0].value.data_mut()[0] = 0.3;

    let c = clip_weights(&p, 0.25, false);
    assert_eq!(c.entries()[0].value.data()[0], 0.25);
    assert_eq!(clip_weights(&c, 0.25, false), c);
    for (e, orig) in c.entries().iter().zip(p.entries()) {
        if e.role.is_batchnorm() {
            assert_eq!(e.value, orig.value);
        } else {
            assert!(e.value.data().iter().all(|v| v.abs() <= 0.25));
        }
    }
    assert!(clip_weights(&p, 0.25, true).entries().iter().all(|e| e.value.data().iter().all(|v| v.abs() <= 0.25)));
    assert_eq!(clip_weights(&p, 10.0, true), p);
}

#[test]
fn weight_average_is_an_exponential_moving_average() {
    let net = net();
    let a = net.init_params(&mut rng::seeded(1));
    let c = net.init_params(&mut rng::seeded(2));
    let same = update_weight_average(&a, &a, 0.9).unwrap();
    assert!(same.flat().iter().zip(a.flat()).all(|(x, y)| (x - y).abs() <= 1e-15));
    assert_eq!(update_weight_average(&a, &c, 0.0).unwrap(), c);

    let tau: f64 = 0.7;
    let mut avg = a.clone();
    for _ in 0..10 {
        avg = update_weight_average(&avg, &c, tau).unwrap();
    }
    for ((m, x0), x) in avg.flat().iter().zip(a.flat()).zip(c.flat()) {
        assert!((m - (x + tau.powi(10) * (x0 - x))).abs() < 1e-12);
    }

    let other = Network::new(NetworkSpec::mlp(&[4, 3], Activation::Relu)).unwrap().init_params(&mut rng::seeded(0));
    assert!(update_weight_average(&a, &other, 0.5).is_err());
}

#[test]
fn label_noise_matches_smoothing_in_expectation() {
    let (k, b, tau) = (5usize, 20usize, 0.3);
    let (p_label, p_other) = expected_noisy_distribution(tau, k, b);
    let smooth = smooth_labels(&[0], equivalent_smoothing(tau, k), k);
    assert!((p_label - smooth[0][0]).abs() < 1e-15);
    assert!((p_other - smooth[0][1]).abs() < 1e-15);

    let draws = 100_000 / b;
    let labels = vec![0usize; b];
    let mut r = rng::seeded(11);
    let mut kept = 0usize;
    for _ in 0..draws {
        kept += inject_label_noise(&labels, tau, k, &mut r).iter().filter(|&&y| y == 0).count();
    }
    let n = (draws * b) as f64;
    let sigma = (p_label * (1.0 - p_label) / n).sqrt();
    assert!((kept as f64 / n - p_label).abs() < 3.0 * sigma);
}

#[test]
fn label_noise_changes_exactly_the_rounded_count() {
    let mut r = rng::seeded(3);
    let labels: Vec<usize> = (0..10).collect();
    for _ in 0..50 {
        // With K huge, a resampled label almost surely differs from the original.
        let noisy = inject_label_noise(&labels, 0.25, 1_000_000_000, &mut r);
        assert_eq!(noisy.iter().zip(&labels).filter(|(a, b)| a != b).count(), 2);
    }
    assert_eq!(inject_label_noise(&labels, 0.0, 10, &mut r), labels);
}
