mod common;

use rand::Rng;
use robflat::attacks::AttackConfig;
use robflat::flatness::{
    self, DirectionKind, Evaluation, FlatnessConfig, FlatnessMode, Landscape, LossKind, NetworkObjective, ProfileConfig,
    QuadraticBowl,
};
use robflat::geometry::{self, BallSpec};
use robflat::nn::{Activation, NetworkSpec, ParamEntry, Role};
use robflat::{rng, Batch, Network, ParamVector, Result, Tensor};

fn bowl(a: f64, b: f64) -> QuadraticBowl {
    let center = ParamVector::new(vec![ParamEntry {
        layer: 0,
        role: Role::Weight,
        value: Tensor::matrix(1, 2, vec![0.6, 0.8]).unwrap(),
    }]);
    QuadraticBowl::new(center, vec![a, b]).unwrap()
}

fn toy_config(mode: FlatnessMode, xi: f64, samples: usize) -> FlatnessConfig {
    FlatnessConfig {
        ball: BallSpec::per_layer(xi),
        mode,
        loss_kind: LossKind::Clean,
        samples,
        joint_steps: 300,
        nu_step_size: 0.02,
        attack: AttackConfig::none(),
        batch_size: 1,
    }
}

/// Mean of `a x^2 + b y^2` over the disk of radius `r`, by rejection sampling.
fn brute_force_disk_mean(a: f64, b: f64, r: f64, n: usize, seed: u64) -> f64 {
    let mut g = rand::rngs::StdRng::seed_from_u64(seed);
    let mut sum = 0.0;
    let mut kept = 0;
    while kept < n {
        let x: f64 = g.random_range(-r..r);
        let y: f64 = g.random_range(-r..r);
        if x * x + y * y <= r * r {
            sum += a * x * x + b * y * y;
            kept += 1;
        }
    }
    sum / n as f64
}

use rand::SeedableRng;

#[test]
fn average_case_matches_closed_form_and_brute_force() {
    let (a, b, xi) = (1.0, 3.0, 0.5);
    let land = bowl(a, b);
    let n = 400_000;
    let report = flatness::average_case_flatness(&land, &land.center, &toy_config(FlatnessMode::Average, xi, n), &mut rng::seeded(1)).unwrap();
    let r = xi * 1.0;
    let analytic = (a + b) * r * r / 4.0;
    let standard_error = report.std / (n as f64).sqrt();
    assert!((report.value - analytic).abs() < 2.0 * standard_error, "{} vs {analytic} (se {standard_error})", report.value);
    let brute = brute_force_disk_mean(a, b, r, 1_000_000, 2024);
    assert!((report.value - brute).abs() < 1e-3, "{} vs brute {brute}", report.value);
    assert_eq!(report.reference_loss, 0.0);
}

#[test]
fn worst_case_matches_grid_search_over_the_ball() {
    let (a, b, xi) = (1.0, 3.0, 0.5);
    let land = bowl(a, b);
    let report = flatness::worst_case_flatness(&land, &land.center, &toy_config(FlatnessMode::Worst, xi, 10), &mut rng::seeded(3)).unwrap();
    let r = xi;
    let m = 2000;
    let mut grid = 0.0f64;
    for i in 0..=m {
        for j in 0..=m {
            let x = -r + 2.0 * r * i as f64 / m as f64;
            let y = -r + 2.0 * r * j as f64 / m as f64;
            if x * x + y * y <= r * r {
                grid = grid.max(a * x * x + b * y * y);
            }
        }
    }
    assert!((report.value - grid).abs() < 1e-3, "{} vs grid {grid}", report.value);
    assert!((report.value - a.max(b) * r * r).abs() < 1e-3);
}

#[test]
fn average_case_grows_with_radius() {
    let land = bowl(0.5, 2.0);
    let mut last = -1.0;
    for xi in [0.05, 0.1, 0.2, 0.4, 0.8] {
        let v = flatness::average_case_flatness(&land, &land.center, &toy_config(FlatnessMode::Average, xi, 200), &mut rng::seeded(5)).unwrap().value;
        assert!(v > last, "xi={xi}: {v} <= {last}");
        last = v;
    }
}

fn bn_fixture(seed: u64) -> (Network, ParamVector, Batch) {
    let (net, p) = common::seeded_net(NetworkSpec::mlp_batchnorm(&[4, 8, 3], Activation::Silu), seed);
    (net, p, common::random_batch(24, 4, 3, seed + 50))
}

fn net_config(mode: FlatnessMode, xi: f64) -> FlatnessConfig {
    let attack = AttackConfig { steps: 5, restarts: 3, ..AttackConfig::evaluation(0.05) };
    FlatnessConfig {
        ball: BallSpec::per_layer(xi),
        mode,
        loss_kind: LossKind::Robust,
        samples: 4,
        joint_steps: attack.steps,
        nu_step_size: 0.01,
        attack,
        batch_size: 12,
    }
}

#[test]
fn zero_radius_gives_exactly_zero() {
    let (net, p, data) = bn_fixture(1);
    for mode in [FlatnessMode::Average, FlatnessMode::Worst] {
        for kind in [LossKind::Robust, LossKind::Clean] {
            let cfg = FlatnessConfig { loss_kind: kind, ..net_config(mode, 0.0) };
            let r = flatness::network_flatness(&net, &p, &data, &cfg, &mut rng::seeded(9)).unwrap();
            assert_eq!(r.value, 0.0, "{mode:?} {kind:?}");
            assert!(r.per_sample.iter().all(|v| *v == 0.0));
        }
    }
    let r = flatness::clean_flatness(&net, &p, &data, &net_config(FlatnessMode::Average, 0.0), &mut rng::seeded(9)).unwrap();
    assert_eq!(r.loss_kind, LossKind::Clean);
    assert_eq!(r.value, 0.0);
}

#[test]
fn tiny_radius_is_continuous() {
    let (net, p, data) = bn_fixture(2);
    for mode in [FlatnessMode::Average, FlatnessMode::Worst] {
        let r = flatness::network_flatness(&net, &p, &data, &net_config(mode, 1e-8), &mut rng::seeded(4)).unwrap();
        assert!(r.value.abs() < 1e-4, "{mode:?}: {}", r.value);
    }
}

/// Adds a constant to every loss.
struct Shifted<'a> {
    inner: NetworkObjective<'a>,
    c: f64,
}

impl Landscape for Shifted<'_> {
    fn num_batches(&self) -> usize {
        self.inner.num_batches()
    }
    fn inner_max(&self, w: &ParamVector, b: usize, seed: u64) -> Result<Vec<f64>> {
        Ok(self.inner.inner_max(w, b, seed)?.into_iter().map(|l| l + self.c).collect())
    }
    fn initial_inputs(&self, b: usize, seed: u64, r: usize) -> Tensor {
        self.inner.initial_inputs(b, seed, r)
    }
    fn evaluate(&self, w: &ParamVector, b: usize, x: &Tensor) -> Result<Evaluation> {
        let mut e = self.inner.evaluate(w, b, x)?;
        e.losses.iter_mut().for_each(|l| *l += self.c);
        Ok(e)
    }
    fn step_inputs(&self, b: usize, x: &mut Tensor, g: &Tensor) {
        self.inner.step_inputs(b, x, g)
    }
}

#[test]
fn constant_shift_leaves_reports_unchanged() {
    let (net, p, data) = bn_fixture(3);
    for mode in [FlatnessMode::Average, FlatnessMode::Worst] {
        let cfg = net_config(mode, 0.3);
        let base = flatness::objective(&net, &data, &cfg);
        let plain = flatness::measure(&base, &p, &cfg, &mut rng::seeded(11)).unwrap();
        let shifted = flatness::measure(&Shifted { inner: base.clone(), c: 3.7 }, &p, &cfg, &mut rng::seeded(11)).unwrap();
        assert!((plain.value - shifted.value).abs() < 1e-12, "{mode:?}");
        assert!((plain.reference_loss + 3.7 - shifted.reference_loss).abs() < 1e-12);
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

#[test]
fn batchnorm_rescaling_leaves_flatness_and_profiles_unchanged() {
    let (net, p, data) = bn_fixture(4);
    let spec = net.spec().clone();
    for mode in [FlatnessMode::Average, FlatnessMode::Worst] {
        let cfg = net_config(mode, if mode == FlatnessMode::Worst { 0.01 } else { 0.3 });
        let base = flatness::network_flatness(&net, &p, &data, &cfg, &mut rng::seeded(21)).unwrap();
        for s in [0.5, 2.0] {
            let scaled = geometry::scale_all_batchnorm_layers(&spec, &p, s).unwrap();
            let r = flatness::network_flatness(&net, &scaled, &data, &cfg, &mut rng::seeded(21)).unwrap();
            assert!(rel(base.value, r.value) < 1e-6, "{mode:?} x{s}: {} vs {}", base.value, r.value);
            assert!(rel(base.reference_loss, r.reference_loss) < 1e-6);
        }
    }
    for kind in [DirectionKind::Random, DirectionKind::Adversarial] {
        let mut pc = ProfileConfig::new(kind, net_config(FlatnessMode::Worst, 0.01));
        pc.s_grid = flatness::profile::default_grid(7);
        pc.directions = 3;
        let obj = flatness::objective(&net, &data, &pc.flatness);
        let base = flatness::landscape_profile(&obj, &p, &pc, &mut rng::seeded(8)).unwrap();
        for s in [0.5, 2.0] {
            let scaled = geometry::scale_all_batchnorm_layers(&spec, &p, s).unwrap();
            let prof = flatness::landscape_profile(&obj, &scaled, &pc, &mut rng::seeded(8)).unwrap();
            for (x, y) in base.rows.iter().zip(&prof.rows) {
                assert!((x.loss - y.loss).abs() < 1e-8, "{kind:?} x{s} at {}: {} vs {}", x.s, x.loss, y.loss);
            }
        }
    }
}

#[test]
fn worst_case_dominates_average_case() {
    for seed in 0..6 {
        let (net, p, data) = bn_fixture(100 + seed);
        let avg = flatness::network_flatness(&net, &p, &data, &net_config(FlatnessMode::Average, 0.05), &mut rng::seeded(seed)).unwrap();
        let worst = flatness::network_flatness(&net, &p, &data, &net_config(FlatnessMode::Worst, 0.05), &mut rng::seeded(seed)).unwrap();
        assert!(worst.value >= avg.value, "seed {seed}: {} < {}", worst.value, avg.value);
        for (w, a) in worst.per_sample.iter().zip(&avg.per_sample) {
            assert!(w >= a);
        }
    }
}

#[test]
fn reports_are_reproducible_and_thread_independent() {
    let (net, p, data) = bn_fixture(6);
    let cfg = net_config(FlatnessMode::Worst, 0.05);
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| flatness::network_flatness(&net, &p, &data, &cfg, &mut rng::seeded(77)).unwrap())
    };
    let one = run(1);
    assert_eq!(one, run(1));
    assert_eq!(one, run(4));
}

#[test]
fn profile_rows_and_symmetry() {
    let land = bowl(2.0, 0.7);
    let mut pc = ProfileConfig::new(DirectionKind::Random, toy_config(FlatnessMode::Worst, 0.1, 1));
    pc.s_grid = flatness::profile::default_grid(21);
    let prof = flatness::landscape_profile(&land, &land.center, &pc, &mut rng::seeded(2)).unwrap();
    let n = prof.rows.len();
    for i in 0..n {
        assert!((prof.rows[i].loss - prof.rows[n - 1 - i].loss).abs() < 1e-10);
    }
    assert_eq!(prof.rows[n / 2].s, 0.0);
    assert_eq!(prof.rows[n / 2].loss, prof.reference_loss);
    assert!(prof.to_csv().starts_with("s,loss,direction_kind,aggregate\n-1,"));

    // Hessian-top on the bowl: the top eigenvector is the stiffer axis.
    let mut hc = pc.clone();
    hc.kind = DirectionKind::HessianTop;
    hc.power.tol = 1e-10;
    let top = flatness::landscape_profile(&land, &land.center, &hc, &mut rng::seeded(2)).unwrap();
    let end = top.rows.last().unwrap();
    // Direction scaled to ||w|| = 1, length 0.5 at s = 1: 2.0 * 0.5^2.
    assert!((end.loss - 0.5).abs() < 1e-6, "{}", end.loss);
    assert_eq!(end.aggregate, "single");
}

#[test]
fn single_point_profile_is_the_reference_robust_loss() {
    let (net, p, data) = bn_fixture(7);
    let mut pc = ProfileConfig::new(DirectionKind::Random, net_config(FlatnessMode::Average, 0.5));
    pc.s_grid = vec![0.0];
    let obj = flatness::objective(&net, &data, &pc.flatness);
    let prof = flatness::landscape_profile(&obj, &p, &pc, &mut rng::seeded(1)).unwrap();
    assert_eq!(prof.rows.len(), 1);
    assert_eq!(prof.rows[0].loss, prof.reference_loss);
    let avg = flatness::measure(&obj, &p, &pc.flatness, &mut rng::seeded(1)).unwrap();
    assert_eq!(avg.reference_loss, prof.reference_loss);

    // With a zero-radius attack the reference is the clean loss.
    pc.flatness.attack = AttackConfig::evaluation(0.0);
    let obj = flatness::objective(&net, &data, &pc.flatness);
    let prof = flatness::landscape_profile(&obj, &p, &pc, &mut rng::seeded(1)).unwrap();
    let clean = net.cross_entropy(&p, &data, robflat::Mode::Eval).unwrap().mean;
    assert!((prof.rows[0].loss - clean).abs() < 1e-12);
}
