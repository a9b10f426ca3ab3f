mod common;

use std::collections::BTreeMap;

use candle_core::{DType, Tensor};
use rst_isp::data::PairSet;
use rst_isp::metrics::{LossWeights, TERM_GP};
use rst_isp::train::{
    epoch_order, evaluate, list_checkpoints, train, train_step, IdentityModel, IspOracle, TrainConfig, TrainState,
    LOG_COLUMNS, METRICS_FILE,
};
use rst_isp::Error;

use common::{tiny_model, values};

fn config() -> TrainConfig {
    TrainConfig {
        lr_g: 1e-3,
        lr_d: 1e-3,
        batch_size: 2,
        epochs: 1,
        seed: 11,
        model: tiny_model(3),
        ..TrainConfig::default()
    }
}

fn batch() -> (Tensor, Tensor) {
    PairSet::synthetic(5, 2, 32).unwrap().batch(&[0, 1], DType::F64).unwrap()
}

fn weights(state: &TrainState) -> (BTreeMap<String, Tensor>, BTreeMap<String, Tensor>) {
    (state.generator.params().snapshot().unwrap(), state.critic.params().snapshot().unwrap())
}

fn same(a: &BTreeMap<String, Tensor>, b: &BTreeMap<String, Tensor>) -> bool {
    a.len() == b.len() && a.iter().all(|(k, t)| values(t) == values(&b[k]))
}

#[test]
fn zero_rates_and_weights_leave_parameters_bitwise_unchanged() {
    let cfg = TrainConfig {
        lr_g: 0.0,
        lr_d: 0.0,
        weights: LossWeights {
            lambda_ssim: 0.0,
            lambda_tv: 0.0,
            lambda_adv: 0.0,
            lambda_gp: 0.0,
        },
        ..config()
    };
    let mut state = TrainState::new(&cfg, DType::F64).unwrap();
    let (g0, d0) = weights(&state);
    let (s, r) = batch();
    train_step(&mut state, &s, &r, &cfg).unwrap();
    let (g1, d1) = weights(&state);
    assert!(same(&g0, &g1));
    assert!(same(&d0, &d1));
    assert_eq!(state.step, 1);
}

#[test]
fn one_step_is_deterministic() {
    let cfg = config();
    let (s, r) = batch();
    let run = || {
        let mut state = TrainState::new(&cfg, DType::F64).unwrap();
        let report = train_step(&mut state, &s, &r, &cfg).unwrap();
        (report, weights(&state))
    };
    let (ra, (ga, da)) = run();
    let (rb, (gb, db)) = run();
    assert_eq!(ra, rb);
    assert!(same(&ga, &gb));
    assert!(same(&da, &db));
}

#[test]
fn each_optimizer_touches_only_its_network() {
    let (s, r) = batch();
    let frozen_g = TrainConfig { lr_g: 0.0, ..config() };
    let mut state = TrainState::new(&frozen_g, DType::F64).unwrap();
    let (g0, d0) = weights(&state);
    train_step(&mut state, &s, &r, &frozen_g).unwrap();
    let (g1, d1) = weights(&state);
    assert!(same(&g0, &g1));
    assert!(!same(&d0, &d1));

    let frozen_d = TrainConfig { lr_d: 0.0, ..config() };
    let mut state = TrainState::new(&frozen_d, DType::F64).unwrap();
    train_step(&mut state, &s, &r, &frozen_d).unwrap();
    let (g1, d1) = weights(&state);
    assert!(!same(&g0, &g1));
    assert!(same(&d0, &d1));
}

#[test]
fn gradient_penalty_is_never_negative() {
    let cfg = config();
    let mut state = TrainState::new(&cfg, DType::F64).unwrap();
    let (s, r) = batch();
    for _ in 0..3 {
        let report = train_step(&mut state, &s, &r, &cfg).unwrap();
        assert!(report.term(TERM_GP) >= 0.0);
        assert!(report.total.is_finite());
    }
}

#[test]
fn epoch_order_is_a_seeded_permutation() {
    let a = epoch_order(4, 2, 10);
    assert_eq!(a, epoch_order(4, 2, 10));
    let mut sorted = a.clone();
    sorted.sort();
    assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    assert_ne!(a, epoch_order(4, 3, 10));
}

#[test]
fn zero_epochs_writes_only_the_initial_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { epochs: 0, ..config() };
    let data = PairSet::synthetic(1, 2, 32).unwrap();
    let outcome = train(&cfg, &data, dir.path(), None, DType::F32).unwrap();
    let ckpts = list_checkpoints(dir.path()).unwrap();
    assert_eq!(ckpts.len(), 1);
    assert_eq!(ckpts[0].0, 0);
    assert!(outcome.history.is_empty());
}

#[test]
fn metrics_log_has_one_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { epochs: 2, ..config() };
    let data = PairSet::synthetic(1, 4, 32).unwrap();
    let outcome = train(&cfg, &data, dir.path(), None, DType::F32).unwrap();
    let mut reader = csv::Reader::from_path(dir.path().join(METRICS_FILE)).unwrap();
    let header: Vec<String> = reader.headers().unwrap().iter().map(String::from).collect();
    assert_eq!(header, LOG_COLUMNS);
    assert_eq!(reader.records().count(), 4);
    assert_eq!(outcome.history.len(), 4);
    let steps: Vec<u64> = list_checkpoints(dir.path()).unwrap().iter().map(|c| c.0).collect();
    assert_eq!(steps.first(), Some(&0));
    assert_eq!(steps.last(), Some(&4));
}

#[test]
fn empty_dataset_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let data = PairSet::synthetic(1, 0, 32).unwrap();
    assert!(matches!(train(&config(), &data, dir.path(), None, DType::F32), Err(Error::EmptyDataset)));
    assert!(matches!(evaluate(&IdentityModel, &data), Err(Error::EmptyDataset)));
}

#[test]
fn invalid_config_is_rejected_before_any_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = TrainConfig { batch_size: 0, ..config() };
    let data = PairSet::synthetic(1, 2, 32).unwrap();
    assert!(matches!(train(&cfg, &data, dir.path(), None, DType::F32), Err(Error::Config(_))));
    assert!(list_checkpoints(dir.path()).unwrap().is_empty());
}

#[test]
fn oracle_beats_identity_and_single_pair_report_matches() {
    let data = PairSet::synthetic(9, 3, 32).unwrap();
    let oracle = evaluate(&IspOracle, &data).unwrap();
    let identity = evaluate(&IdentityModel, &data).unwrap();
    assert!(oracle.psnr > 40.0, "oracle {}", oracle.psnr);
    assert!(oracle.psnr > identity.psnr);
    assert_eq!(oracle.per_pair.len(), 3);

    let single = PairSet {
        ids: vec![data.ids[1].clone()],
        srgb: vec![data.srgb[1].clone()],
        raw: vec![data.raw[1].clone()],
        params: vec![data.params[1].clone()],
    };
    let one = evaluate(&IspOracle, &single).unwrap();
    assert_eq!((one.psnr, one.ssim), oracle.per_pair[1]);
}
