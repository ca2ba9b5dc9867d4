//! Training behaviour of single networks and ensembles.

use debayes_core::data::{gen_quartic_1d, normalize, Dataset};
use debayes_core::ensemble::penultimate_features;
use debayes_core::hetero::{
    train_map, train_map_with_history, Architecture, HeteroNet, TrainConfig,
};
use debayes_core::nn::{InitScheme, ParamSet};
use debayes_core::posterior::regression_moments_classical;
use debayes_core::{train_ensemble, Execution, Schedule};

fn small_arch() -> Architecture {
    Architecture {
        hidden: vec![32, 16],
        variance_floor: 1e-6,
        init: InitScheme::He,
    }
}

fn quartic_train() -> Dataset {
    let raw = gen_quartic_1d(200, 1).unwrap();
    let test = gen_quartic_1d(10, 2).unwrap();
    normalize(&raw, &test, false).unwrap().0
}

#[test]
fn loss_decreases_on_the_quartic_task() {
    let cfg = TrainConfig {
        lr: 1.0 / 200.0,
        lambda: 1.0 / 200.0,
        seed: 3,
        ..TrainConfig::default()
    };
    let out = train_map_with_history(&quartic_train(), &cfg).unwrap();
    let h = &out.epoch_losses;
    assert_eq!(h.len(), 60);
    let med = |v: &[f64]| {
        let mut v = v.to_vec();
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    assert!(med(&h[h.len() - 5..]) <= med(&h[..5]), "{h:?}");
    assert!(h.iter().all(|v| v.is_finite()));
}

#[test]
fn fits_a_constant() {
    let n = 64;
    let x: Vec<f64> = (0..n)
        .map(|i| -1.0 + 2.0 * i as f64 / (n - 1) as f64)
        .collect();
    let c = 1.5;
    let data = Dataset::new(x.clone(), vec![c; n], 1, 1, None).unwrap();
    let cfg = TrainConfig {
        arch: small_arch(),
        epochs: 200,
        batch_size: 16,
        lr: 3e-3,
        schedule: Schedule::Constant,
        lambda: 1e-4,
        seed: 1,
    };
    let net = train_map(&data, &cfg).unwrap();
    for xi in x {
        let m = net.predict(&[xi]).unwrap().mean[0];
        assert!((m - c).abs() <= c.abs() * 0.05 + 0.05, "x={xi}: {m}");
    }
}

#[test]
fn huge_lambda_shrinks_the_parameters() {
    let data = quartic_train();
    let cfg = TrainConfig {
        arch: small_arch(),
        epochs: 10,
        lambda: 1e6,
        seed: 8,
        ..TrainConfig::default()
    };
    let init = HeteroNet::init(1, 1, &cfg.arch, cfg.seed).unwrap();
    let trained = train_map(&data, &cfg).unwrap();
    assert!(trained.squared_norm() < init.squared_norm());
}

#[test]
fn training_is_deterministic() {
    let data = quartic_train();
    let cfg = TrainConfig {
        arch: small_arch(),
        epochs: 5,
        seed: 12,
        ..TrainConfig::default()
    };
    assert_eq!(
        train_map(&data, &cfg).unwrap(),
        train_map(&data, &cfg).unwrap()
    );
}

#[test]
fn ensemble_members_are_distinct_and_execution_independent() {
    let data = quartic_train();
    let cfg = TrainConfig {
        arch: small_arch(),
        epochs: 3,
        seed: 2,
        ..TrainConfig::default()
    };
    let par = train_ensemble(&data, &cfg, 10, Execution::Parallel).unwrap();
    let ser = train_ensemble(&data, &cfg, 10, Execution::Serial).unwrap();
    assert_eq!(par.members(), ser.members());
    let flats: Vec<Vec<f64>> = par.members().iter().map(|m| m.to_flat()).collect();
    for i in 0..flats.len() {
        for j in i + 1..flats.len() {
            assert_ne!(flats[i], flats[j]);
        }
    }
}

#[test]
fn single_member_has_zero_classical_epistemic_covariance() {
    let data = quartic_train();
    let cfg = TrainConfig {
        arch: small_arch(),
        epochs: 2,
        ..TrainConfig::default()
    };
    let ens = train_ensemble(&data, &cfg, 1, Execution::Serial).unwrap();
    for x in [-0.9, 0.0, 0.4] {
        assert_eq!(
            regression_moments_classical(&ens, &[x]).unwrap().cov,
            vec![0.0]
        );
    }
}

#[test]
fn paper_architecture_has_32_features_and_zero_input_maps_to_zero() {
    let net = HeteroNet::init(1, 1, &Architecture::default(), 0).unwrap();
    let f = penultimate_features(&net, &[0.0]).unwrap();
    assert_eq!(f.len(), 32);
    assert!(f.iter().all(|&v| v == 0.0));
    let f = penultimate_features(&net, &[0.3]).unwrap();
    let dot: f64 = f.iter().zip(net.mean_weights()).map(|(a, b)| a * b).sum();
    assert_eq!(net.predict(&[0.3]).unwrap().mean[0], dot);
}
