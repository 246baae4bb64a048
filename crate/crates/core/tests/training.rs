//! Training runs, sweeps, checkpoints and the adversary suite on small
//! synthetic problems.

mod common;

use common::{balanced_labels, gaussian};
use privsphere::adversary::{
    accuracy, chance_level, fit_adversaries, privacy_score, utility_score, AdversaryKind, AdversarySuiteConfig,
    Representation,
};
use privsphere::data::{gen_synthetic, stratified_split, Dataset, PrivacyEncoding, SyntheticSpec};
use privsphere::models::FunnelKind;
use privsphere::objectives::PrivacyObjectiveKind;
use privsphere::tensor::one_hot;
use privsphere::trainer::{
    config_hash, evaluate, point_seeds, sweep, train, Checkpoint, ModelSpecs, TrainConfig, CHECKPOINT_VERSION,
};
use privsphere::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn separable(samples: usize, seed: u64) -> Dataset {
    synthetic(samples, seed, 0.5)
}

fn synthetic(samples: usize, seed: u64, noise: f64) -> Dataset {
    gen_synthetic(&SyntheticSpec {
        dim: 10,
        utility_classes: 3,
        privacy_classes: 4,
        utility_dim: 3,
        privacy_dim: 4,
        overlap_angle: 90.0,
        encoding: PrivacyEncoding::Linear,
        noise,
        samples,
        seed,
        utility_scale: 3.0,
        privacy_scale: 3.0,
    })
    .unwrap()
}

fn light_adversaries() -> AdversarySuiteConfig {
    AdversarySuiteConfig {
        members: vec![AdversaryKind::Logistic, AdversaryKind::Knn],
        logistic_l2: vec![1e-3, 1e-1],
        logistic_iterations: 150,
        knn_k: vec![1, 5],
        ..AdversarySuiteConfig::default()
    }
}

fn specs(data: &Dataset) -> ModelSpecs {
    ModelSpecs::new(data.dim(), 6, FunnelKind::ReluAffine, &[32], data.utility_classes.len())
}

#[test]
fn unweighted_run_fits_separable_utility() {
    let data = synthetic(600, 1, 0.25);
    let (train_set, test_set) = stratified_split(&data, 0.2, 2, true).unwrap();
    let mut cfg = TrainConfig::new(PrivacyObjectiveKind::Mmd, 0.0);
    cfg.epochs = Some(50);
    cfg.batch_size = 48;
    let out = train(&train_set, &specs(&data), &cfg).unwrap();
    assert!(out.epochs_run <= 50);
    let train_acc = utility_score(&out.networks, &train_set.x, &train_set.utility).unwrap();
    let test_acc = utility_score(&out.networks, &test_set.x, &test_set.utility).unwrap();
    assert!(train_acc >= 0.99, "{train_acc}");
    assert!(test_acc >= 0.95, "{test_acc}");
}

#[test]
fn replay_is_bit_identical_for_every_objective() {
    let data = separable(120, 3);
    for kind in [
        PrivacyObjectiveKind::Mmd,
        PrivacyObjectiveKind::Kdi,
        PrivacyObjectiveKind::Wdn,
        PrivacyObjectiveKind::Lsdn,
    ] {
        let mut cfg = TrainConfig::new(kind, 0.5);
        cfg.epochs = Some(3);
        cfg.batch_size = 40;
        cfg.seed = 11;
        let mut s = specs(&data);
        s.discriminator = Some(privsphere::models::DiscriminatorSpec::new(&[16], 4));
        let a = train(&data, &s, &cfg).unwrap();
        let b = train(&data, &s, &cfg).unwrap();
        assert_eq!(a.history, b.history, "{kind}");
        assert_eq!(a.networks, b.networks, "{kind}");
        assert_eq!(a.history.len(), 3 * 3);
    }
}

#[test]
fn single_point_sweep_equals_train_and_evaluate() {
    let data = separable(300, 4);
    let (train_set, test_set) = stratified_split(&data, 0.2, 1, true).unwrap();
    let mut cfg = TrainConfig::new(PrivacyObjectiveKind::Mmd, 0.25);
    cfg.epochs = Some(5);
    cfg.batch_size = 60;
    cfg.seed = 99;
    let adv = light_adversaries();
    let points = sweep(&train_set, &test_set, &specs(&data), &cfg, &[0.25], &adv, 1).unwrap();
    assert_eq!(points.len(), 1);
    let seed = point_seeds(99, 1)[0];
    assert_eq!(points[0].seed, seed);
    let single = TrainConfig { seed, ..cfg };
    let out = train(&train_set, &specs(&data), &single).unwrap();
    let (utility, report) = evaluate(&out.networks, &train_set, &test_set, &AdversarySuiteConfig { seed, ..adv }).unwrap();
    assert_eq!(points[0].utility_accuracy, utility);
    assert_eq!(points[0].privacy_accuracy, report.privacy_score);
    assert_eq!(points[0].adversaries, report.accuracies());
}

#[test]
fn parallel_sweep_matches_sequential() {
    let data = separable(200, 5);
    let (train_set, test_set) = stratified_split(&data, 0.2, 1, true).unwrap();
    let mut cfg = TrainConfig::new(PrivacyObjectiveKind::Kdi, 0.0);
    cfg.epochs = Some(2);
    cfg.batch_size = 40;
    let grid = [0.01, 0.1, 1.0];
    let adv = light_adversaries();
    let one = sweep(&train_set, &test_set, &specs(&data), &cfg, &grid, &adv, 1).unwrap();
    let three = sweep(&train_set, &test_set, &specs(&data), &cfg, &grid, &adv, 3).unwrap();
    assert_eq!(one, three);
    assert_eq!(one.iter().map(|p| p.lambda_p).collect::<Vec<_>>(), grid);
}

#[test]
fn failed_point_is_recorded_and_sweep_continues() {
    let data = separable(200, 6);
    let (train_set, test_set) = stratified_split(&data, 0.2, 1, true).unwrap();
    let mut cfg = TrainConfig::new(PrivacyObjectiveKind::Mmd, 0.0);
    cfg.epochs = Some(2);
    cfg.batch_size = 40;
    cfg.step_size = Some(1e300);
    let points = sweep(&train_set, &test_set, &specs(&data), &cfg, &[0.1, 1e300], &light_adversaries(), 1).unwrap();
    assert_eq!(points.len(), 2);
    let failed: Vec<_> = points.iter().filter(|p| p.error.is_some()).collect();
    assert!(!failed.is_empty());
    assert!(failed.iter().all(|p| p.utility_accuracy.is_nan() && p.privacy_accuracy.is_nan()));
}

#[test]
fn sweep_rejects_unordered_grid() {
    let data = separable(100, 7);
    let cfg = TrainConfig::new(PrivacyObjectiveKind::Mmd, 0.0);
    for grid in [vec![], vec![1.0, 0.5], vec![1.0, 1.0]] {
        match sweep(&data, &data, &specs(&data), &cfg, &grid, &light_adversaries(), 1) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "objective.grid"),
            other => panic!("{other:?}"),
        }
    }
}

#[test]
fn strong_weight_lowers_privacy_accuracy() {
    let data = separable(800, 8);
    let (train_set, test_set) = stratified_split(&data, 0.25, 1, true).unwrap();
    let mut cfg = TrainConfig::new(PrivacyObjectiveKind::Mmd, 0.0);
    cfg.epochs = Some(60);
    cfg.batch_size = 200;
    let points = sweep(&train_set, &test_set, &specs(&data), &cfg, &[2f64.powi(-10), 2f64.powi(4)], &light_adversaries(), 1).unwrap();
    assert!(points[1].privacy_accuracy <= points[0].privacy_accuracy + 0.05, "{points:?}");
}

#[test]
fn checkpoint_round_trip_and_validation() {
    let data = separable(100, 9);
    let mut cfg = TrainConfig::new(PrivacyObjectiveKind::Mmd, 0.1);
    cfg.epochs = Some(1);
    cfg.batch_size = 50;
    let out = train(&data, &specs(&data), &cfg).unwrap();
    let ck = Checkpoint {
        version: CHECKPOINT_VERSION,
        config_hash: config_hash(&cfg).unwrap(),
        seed: cfg.seed,
        networks: Some(out.networks.clone()),
        duca: None,
        standardizer: None,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.json");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    let z = back.represent(&data.x).unwrap();
    assert_eq!(z.features(), &out.networks.represent(&data.x).unwrap());

    let empty = Checkpoint { networks: None, ..ck.clone() };
    empty.save(&path).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Schema(_))));
    let old = Checkpoint { version: 0, ..ck };
    old.save(&path).unwrap();
    assert!(matches!(Checkpoint::load(&path), Err(Error::Schema(_))));
}

#[test]
fn configuration_errors_name_their_key() {
    let data = separable(100, 10);
    let mut cfg = TrainConfig::new(PrivacyObjectiveKind::Mmd, 0.1);
    cfg.batch_size = 1000;
    match train(&data, &specs(&data), &cfg) {
        Err(Error::Config { key, .. }) => assert_eq!(key, "trainer.batch_size"),
        other => panic!("{other:?}"),
    }
    let mut cfg = TrainConfig::new(PrivacyObjectiveKind::Mmd, -1.0);
    cfg.batch_size = 50;
    assert!(matches!(train(&data, &specs(&data), &cfg), Err(Error::Config { .. })));
    let bad_specs = ModelSpecs::new(7, 3, FunnelKind::Linear, &[8], 3);
    let cfg = TrainConfig {
        batch_size: 50,
        ..TrainConfig::new(PrivacyObjectiveKind::Mmd, 0.1)
    };
    match train(&data, &bad_specs, &cfg) {
        Err(Error::Config { key, .. }) => assert_eq!(key, "model.private.input_dim"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn leaked_labels_are_fully_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let labels = balanced_labels(200, 4, &mut rng);
    let z = Representation::released(one_hot(&labels, 4));
    let cfg = AdversarySuiteConfig {
        mlp: privsphere::adversary::MlpAdversaryConfig {
            hidden: vec![32],
            epochs: 100,
            step_size: 1e-2,
            batch_size: 50,
        },
        ..AdversarySuiteConfig::default()
    };
    let suite = fit_adversaries(&z, &labels, 4, &cfg).unwrap();
    let report = privacy_score(&suite, &z, &labels).unwrap();
    for m in &report.members {
        assert_eq!(m.accuracy, 1.0, "{}", m.member);
    }
    assert_eq!(report.privacy_score, 1.0);
}

#[test]
fn noise_features_stay_near_chance_in_cross_validation() {
    let classes = 4;
    let n = 800;
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let labels = balanced_labels(n, classes, &mut rng);
    let z = Representation::released(gaussian(n, 5, &mut rng));
    let cfg = AdversarySuiteConfig {
        members: vec![AdversaryKind::Logistic, AdversaryKind::KernelRidge, AdversaryKind::Knn],
        ..AdversarySuiteConfig::default()
    };
    let suite = fit_adversaries(&z, &labels, classes, &cfg).unwrap();
    let p = 1.0 / classes as f64;
    for m in &suite.members {
        let cv = m.cv_accuracy.unwrap();
        let candidates = match m.kind {
            AdversaryKind::Logistic => cfg.logistic_l2.len(),
            AdversaryKind::KernelRidge => cfg.kernel_ridges.len() * cfg.bandwidth_multipliers.len(),
            _ => cfg.knn_k.len(),
        };
        let used = if m.kind == AdversaryKind::KernelRidge { cfg.kernel_max_train } else { n };
        let band = hoeffding_band(used, candidates);
        assert!((cv - p).abs() <= band, "{:?}: {cv} outside {p} +- {band}", m.kind);
    }
    let fresh: Vec<usize> = balanced_labels(n, classes, &mut rng);
    let test = Representation::released(gaussian(n, 5, &mut rng));
    let report = privacy_score(&suite, &test, &fresh).unwrap();
    let band = hoeffding_band(n, report.members.len());
    for m in &report.members {
        assert!((m.accuracy - p).abs() <= band, "{}: {}", m.member, m.accuracy);
    }
}

/// 99% band for the largest of `candidates` accuracy estimates on `n`
/// samples (Hoeffding with a union bound).
fn hoeffding_band(n: usize, candidates: usize) -> f64 {
    ((2.0 * candidates as f64 / 0.01).ln() / (2.0 * n as f64)).sqrt()
}

#[test]
fn chance_and_accuracy_helpers() {
    assert_eq!(accuracy(&[0, 1, 2], &[0, 1, 2]), 1.0);
    assert_eq!(accuracy(&[0, 0, 0, 0], &[0, 1, 0, 1]), 0.5);
    assert_eq!(chance_level(&[0, 1, 1, 1]), 0.75);
}
