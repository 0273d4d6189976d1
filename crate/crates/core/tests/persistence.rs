mod common;

use robflat::checkpoint::{self, decode, encode, load_checkpoint, save_checkpoint};
use robflat::config::{DataConfig, ModelConfig};
use robflat::nn::{Activation, NetworkSpec};
use robflat::rng::{self, RngState};
use robflat::training::{MetricsRow, Schedule};
use robflat::{AttackConfig, Checkpoint, Error, ExperimentConfig, FlatnessConfig, TrainConfig};

fn full_checkpoint() -> Checkpoint {
    let (net, params) = common::seeded_net(NetworkSpec::mlp_batchnorm(&[3, 5, 2], Activation::Gelu), 4);
    let (_, average) = common::seeded_net(net.spec().clone(), 5);
    let (_, other) = common::seeded_net(net.spec().clone(), 6);
    let momentum = other.perturbed(&other.zeros_direction(), 0.0).unwrap();
    let momentum = robflat::Direction::new(momentum.entries().iter().map(|e| e.value.clone()).collect());
    let mut r = rng::seeded(9);
    let _ = rand::Rng::random::<u64>(&mut r);
    Checkpoint {
        epoch: 17,
        spec: net.spec().clone(),
        params,
        average: Some(average),
        momentum: Some(momentum),
        rng: Some(RngState::capture(&r)),
        metrics: Some(MetricsRow {
            epoch: 17,
            lr: 0.005,
            train_ce: 0.1,
            train_rce: f64::NAN,
            test_ce: 1.0 / 3.0,
            test_rce: f64::INFINITY,
            train_err: 0.0,
            train_rerr: -0.0,
            test_err: 0.25,
            test_rerr: 5e-324,
        }),
    }
}

fn bits(ck: &Checkpoint) -> Vec<u64> {
    let mut out: Vec<u64> = ck.params.flat().iter().map(|v| v.to_bits()).collect();
    out.extend(ck.average.iter().flat_map(|a| a.flat()).map(f64::to_bits));
    out.extend(ck.momentum.iter().flat_map(|m| m.flat()).map(f64::to_bits));
    if let Some(m) = &ck.metrics {
        out.extend(
            [m.lr, m.train_ce, m.train_rce, m.test_ce, m.test_rce, m.train_err, m.train_rerr, m.test_err, m.test_rerr]
                .map(f64::to_bits),
        );
    }
    out
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let ck = full_checkpoint();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.ckpt");
    save_checkpoint(&path, &ck).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(bits(&back), bits(&ck));
    assert_eq!(back.epoch, ck.epoch);
    assert_eq!(back.spec, ck.spec);
    assert_eq!(back.rng, ck.rng);
    assert_eq!(back.params, ck.params);
    assert_eq!(encode(&back).unwrap(), encode(&ck).unwrap());

    // The restored generator continues the original stream.
    let mut a = ck.rng.as_ref().unwrap().restore().unwrap();
    let mut b = back.rng.as_ref().unwrap().restore().unwrap();
    assert_eq!(rand::Rng::random::<u64>(&mut a), rand::Rng::random::<u64>(&mut b));

    let minimal = Checkpoint::new(ck.spec.clone(), ck.params.clone());
    assert_eq!(decode(&encode(&minimal).unwrap(), &path).unwrap(), minimal);
}

#[test]
fn corrupted_byte_fails_the_checksum() {
    let bytes = encode(&full_checkpoint()).unwrap();
    let p = std::path::Path::new("x.ckpt");
    for at in [20, bytes.len() / 2, bytes.len() - 40, bytes.len() - 1] {
        let mut bad = bytes.clone();
        bad[at] ^= 0x10;
        assert!(matches!(decode(&bad, p), Err(Error::Checksum)), "byte {at}");
    }
}

#[test]
fn newer_version_is_reported_as_such() {
    let mut bytes = encode(&full_checkpoint()).unwrap();
    bytes[8..12].copy_from_slice(&(checkpoint::VERSION + 1).to_le_bytes());
    match decode(&bytes, std::path::Path::new("x.ckpt")) {
        Err(Error::UnsupportedVersion { found, supported }) => {
            assert_eq!(found, checkpoint::VERSION + 1);
            assert_eq!(supported, checkpoint::VERSION);
        }
        other => panic!("expected a version error, got {other:?}"),
    }
}

#[test]
fn malformed_checkpoints() {
    let p = std::path::Path::new("x.ckpt");
    let bytes = encode(&full_checkpoint()).unwrap();
    assert!(matches!(decode(&bytes[..10], p), Err(Error::Format { .. })));
    assert!(decode(b"", p).is_err());
    let mut wrong_magic = bytes.clone();
    wrong_magic[0] = b'X';
    assert!(matches!(decode(&wrong_magic, p), Err(Error::Format { .. })));
    assert!(load_checkpoint(std::path::Path::new("/nonexistent/x.ckpt")).is_err());
}

fn experiment() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed: 5,
        out_dir: None,
        model: ModelConfig { hidden: vec![16, 8], activation: Activation::Silu, batchnorm: true, whiten: true },
        data: DataConfig::Synthetic {
            kind: robflat::data::SyntheticKind::Spirals,
            n_train: 40,
            n_test: 20,
            dim: 3,
            classes: 2,
            margin: 0.5,
            noise: 0.05,
        },
        train: TrainConfig {
            epochs: 3,
            batch_size: 8,
            base_lr: 0.05,
            schedule: Schedule::MultiStep { milestones: vec![1, 2], factor: 0.1 },
            momentum: 0.9,
            weight_decay: 5e-3,
            attack: AttackConfig::training(0.1),
            variant: robflat::training::Variant::Awp { xi: 0.01, inner_iters: 1 },
            label_smoothing: 0.1,
            label_noise: 0.0,
            weight_clip: Some(0.5),
            clip_batchnorm: false,
            weight_average: Some(0.99),
            early_stop: Default::default(),
            pgd_tau: Some(2),
            augment: true,
            seed: 7,
        },
        flatness: Default::default(),
        attacks: Default::default(),
    };
    cfg.flatness.insert("fast".into(), FlatnessConfig { samples: 3, ..FlatnessConfig::average(0.1) });
    cfg.attacks.insert("eval".into(), AttackConfig::evaluation(0.1));
    cfg
}

#[test]
fn config_round_trip_is_a_fixed_point() {
    let cfg = experiment();
    let text = cfg.to_toml().unwrap();
    let parsed = ExperimentConfig::from_toml(&text).unwrap();
    assert_eq!(parsed, cfg);
    assert_eq!(parsed.to_toml().unwrap(), text);
    assert_eq!(parsed.hash().unwrap(), cfg.hash().unwrap());
}

#[test]
fn config_from_hand_written_toml() {
    let text = r#"
seed = 2

[model]
hidden = [8]
activation = "relu"

[data]
source = "synthetic"
kind = "gaussians"
n_train = 30
n_test = 10
dim = 4
classes = 3

[train]
epochs = 2
batch_size = 10
base_lr = 0.1
schedule = { kind = "cyclic", peak = 0.2, cycle = 30 }
attack = { epsilon = 0.1, steps = 7, step_size = 0.025 }
variant = { kind = "trades", lambda = 6.0 }

[flatness.wide]
mode = "average"
loss_kind = "clean"
samples = 4
ball = { xi = 0.25 }
attack = { epsilon = 0.1, steps = 20, step_size = 0.025, restarts = 3 }
"#;
    let cfg = ExperimentConfig::from_toml(text).unwrap();
    let data = cfg.dataset().unwrap();
    assert_eq!(data.len(), 40);
    assert_eq!(data.indices(robflat::data::Split::Test).len(), 10);
    assert_eq!(cfg.dataset().unwrap(), data);
    let spec = cfg.network_spec(&data).unwrap();
    assert_eq!(robflat::Network::new(spec).unwrap().input_dim(), 4);
    assert_eq!(cfg.flatness_preset("wide").unwrap().ball.xi, 0.25);
    assert_eq!(cfg.flatness_preset("worst").unwrap().ball.xi, 0.003);
    assert!(cfg.flatness_preset("nope").is_err());
}

#[test]
fn config_rejects_unknown_keys_and_bad_values() {
    let base = experiment().to_toml().unwrap();
    let unknown = base.replace("seed = 5", "seed = 5\ncolour = \"blue\"");
    assert!(matches!(ExperimentConfig::from_toml(&unknown), Err(Error::Config(_))));
    let nested = base.replace("batch_size = 8", "batch_size = 8\nbatch_sz = 9");
    assert!(ExperimentConfig::from_toml(&nested).is_err());
    let negative = base.replace("base_lr = 0.05", "base_lr = -0.05");
    assert!(ExperimentConfig::from_toml(&negative).is_err());
    assert!(ExperimentConfig::load(std::path::Path::new("/nonexistent/config.toml")).unwrap_err().is_config());
}
