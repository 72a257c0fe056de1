mod common;

use ddlab_autodiff::Tensor;
use ddlab_core::model::{InitMode, ModelSpec};
use ddlab_core::train::*;
use ddlab_core::CoreError;

#[test]
fn momentum_recursion_on_half_square() {
    // loss 0.5 theta^2 has gradient theta
    let mut theta = [1.0];
    let mut opt = MomentumSgd::new(0.1, 0.0, 0.0, 1);
    let g = theta;
    opt.step(&mut theta, &g);
    assert!((theta[0] - 0.9).abs() < 1e-15);

    let mut theta = [1.0];
    let mut opt = MomentumSgd::new(0.1, 0.9, 0.0, 1);
    for _ in 0..2 {
        let g = theta;
        opt.step(&mut theta, &g);
    }
    assert!((theta[0] - 0.72).abs() < 1e-15);
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let b = common::tiny_blobs(0);
    let spec = common::small_convnet();
    let init = spec.init(InitMode::XavierUniform, 1);
    let cfg = TrainConfig { lr: 0.0, iterations: 5, record_every: 1, ..TrainConfig::full_batch(5, 0) };
    let traj = train(&spec, &init, &b.train, &cfg, None).unwrap();
    assert!(traj.records.iter().all(|r| r.params.values == init.values));
}

#[test]
fn training_is_bitwise_deterministic_and_reduces_loss() {
    let b = common::tiny_blobs(0);
    let spec = common::small_convnet();
    let init = spec.init(InitMode::XavierUniform, 2);
    let cfg = TrainConfig { record_every: 50, ..TrainConfig::full_batch(300, 0) };
    let a = train(&spec, &init, &b.train, &cfg, Some(&b.test)).unwrap();
    let c = train(&spec, &init, &b.train, &cfg, Some(&b.test)).unwrap();
    assert_eq!(a.final_params().values, c.final_params().values);
    assert_eq!(a.iterations(), vec![0, 50, 100, 150, 200, 250, 300]);
    assert!(a.records.last().unwrap().loss < a.records[0].loss);
    assert!(a.final_accuracy().is_some());
}

#[test]
fn minibatch_training_is_deterministic() {
    let b = common::tiny_blobs(0);
    let spec = common::small_convnet();
    let init = spec.init(InitMode::XavierUniform, 2);
    let cfg = TrainConfig { iterations: 20, batch: Batch::Size(16), seed: 7, ..TrainConfig::default() };
    let a = train(&spec, &init, &b.train, &cfg, None).unwrap();
    let c = train(&spec, &init, &b.train, &cfg, None).unwrap();
    assert_eq!(a.final_params().values, c.final_params().values);
    let other = train(&spec, &init, &b.train, &TrainConfig { seed: 8, ..cfg }, None).unwrap();
    assert_ne!(a.final_params().values, other.final_params().values);
}

#[test]
fn divergence_reports_last_valid_iteration() {
    let b = common::tiny_blobs(0);
    let spec = ModelSpec::linear([3, 8, 8], 3);
    let init = spec.init(InitMode::XavierUniform, 0);
    let cfg = TrainConfig { lr: 1e307, momentum: 0.9, ..TrainConfig::full_batch(100, 0) };
    match train(&spec, &init, &b.train, &cfg, None) {
        Err(CoreError::Diverged { iteration, last_valid }) => assert!(last_valid < iteration),
        Err(e) => panic!("expected divergence, got {e}"),
        Ok(_) => panic!("expected divergence"),
    }
}

#[test]
fn full_fraction_subset_equals_plain_training() {
    let b = common::tiny_blobs(0);
    let spec = common::small_convnet();
    let cfg = TrainConfig { seed: 4, record_every: 10, ..TrainConfig::full_batch(10, 4) };
    let (sub, idx) = train_subset(&spec, &b.train, 1.0, &cfg, None).unwrap();
    assert_eq!(idx, (0..b.train.len()).collect::<Vec<_>>());
    let plain = train(&spec, &spec.init(InitMode::XavierUniform, 4), &b.train, &cfg, None).unwrap();
    assert_eq!(sub.final_params().values, plain.final_params().values);
}

#[test]
fn subset_counts_and_seed_dependence() {
    let b = ddlab_core::data::generate_blobs(&ddlab_core::data::BlobConfig::reference(0)).unwrap();
    let idx = subset_indices(&b.train, 0.01, 3).unwrap();
    let sub = b.train.select(&idx).unwrap();
    assert_eq!(sub.class_counts(), vec![5, 5, 5]);
    let other = subset_indices(&b.train, 0.01, 4).unwrap();
    // 15 of 1500 drawn twice: sharing all of them by chance is negligible
    assert_ne!(idx, other);
    assert!(subset_indices(&b.train, 0.0, 3).is_err());
    assert!(subset_indices(&b.train, 0.0005, 3).is_err());
}

fn fake_trajectory(accs: &[f64]) -> Trajectory {
    let spec = ModelSpec::linear([1, 1, 2], 2);
    let p = spec.init(InitMode::Zeros, 0);
    let records = accs
        .iter()
        .enumerate()
        .map(|(i, &a)| Record {
            iteration: i * 10,
            loss: 1.0,
            accuracy: Some(a),
            params: p.with_values(vec![i as f64; p.len()]),
        })
        .collect();
    Trajectory { records, config_digest: [0; 32], data_digest: [0; 32] }
}

#[test]
fn early_stop_examples() {
    let t = fake_trajectory(&[0.2, 0.5, 0.7]);
    assert_eq!(early_stop_select(&t, 0.55).unwrap().iteration, 10);
    assert_eq!(early_stop_select(&t, 0.7).unwrap().iteration, 20);
    assert_eq!(early_stop_select(&t, 0.0).unwrap().iteration, 0);
    // tie between 0.5 and 0.7 at target 0.6 goes to the earlier snapshot
    assert_eq!(early_stop_select(&t, 0.6).unwrap().iteration, 10);
}

#[test]
fn evaluation_counts_and_permutation() {
    let logits = Tensor::new(vec![10, 2], (0..20).map(|i| ((i * 7 % 5) as f64) - 2.0).collect()).unwrap();
    let labels = [0, 1, 1, 0, 1, 0, 0, 1, 1, 0];
    let ev = score_logits(&logits, &labels);
    let hand = (0..10)
        .filter(|&i| {
            let (a, b) = (logits.data()[2 * i], logits.data()[2 * i + 1]);
            let pred = if b > a { 1 } else { 0 };
            pred == labels[i]
        })
        .count();
    assert_eq!(ev.accuracy, hand as f64 / 10.0);

    let b = common::tiny_blobs(1);
    let spec = common::small_convnet();
    let p = spec.init(InitMode::XavierUniform, 0);
    let perm: Vec<usize> = (0..b.test.len()).rev().collect();
    let a1 = evaluate(&spec, &p, &b.test).unwrap().accuracy;
    let a2 = evaluate(&spec, &p, &b.test.select(&perm).unwrap()).unwrap().accuracy;
    assert_eq!(a1, a2);
}

#[test]
fn convex_model_fits_its_single_example() {
    let data = common::vectors(&[vec![0.3, -1.0, 2.0]], &[1], 3);
    let spec = ModelSpec::linear([1, 1, 3], 3);
    let traj = train(&spec, &spec.init(InitMode::Zeros, 0), &data, &TrainConfig::full_batch(100, 0), None).unwrap();
    assert_eq!(evaluate(&spec, traj.final_params(), &data).unwrap().accuracy, 1.0);
}

#[test]
fn trajectory_round_trip_and_tamper_detection() {
    let dir = tempfile::tempdir().unwrap();
    let b = common::tiny_blobs(0);
    let spec = common::small_convnet();
    let cfg = TrainConfig { record_every: 2, ..TrainConfig::full_batch(4, 0) };
    let traj = train(&spec, &spec.init(InitMode::XavierUniform, 0), &b.train, &cfg, Some(&b.test)).unwrap();
    traj.save(&spec, dir.path()).unwrap();
    let back = Trajectory::load(&spec, dir.path()).unwrap();
    assert_eq!(back, traj);
    let snap = dir.path().join("iter_000002.ddlp");
    let mut bytes = std::fs::read(&snap).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 1;
    std::fs::write(&snap, bytes).unwrap();
    assert!(Trajectory::load(&spec, dir.path()).is_err());
}
