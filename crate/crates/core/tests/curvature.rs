mod common;

use common::vectors;
use ddlab_autodiff::HvpMode;
use ddlab_core::curvature::*;
use ddlab_core::data::Dataset;
use ddlab_core::model::{InitMode, ModelSpec, ParamVector};
use ddlab_core::train::{evaluate, loss_and_grad, train, TrainConfig};
use nalgebra::DMatrix;

fn tiny_problem() -> (ModelSpec, ParamVector, Dataset) {
    let spec = ModelSpec::mlp([1, 1, 3], 2, 1, 4);
    let p = spec.init(InitMode::XavierUniform, 4);
    let rows: Vec<Vec<f64>> = (0..7).map(|i| (0..3).map(|j| ((i * 3 + j) as f64 * 0.71).sin()).collect()).collect();
    let data = vectors(&rows, &[0, 1, 1, 0, 1, 0, 0], 2);
    (spec, p, data)
}

/// Hessian assembled column by column from central differences of gradients.
fn assembled_hessian(spec: &ModelSpec, p: &ParamVector, data: &Dataset) -> DMatrix<f64> {
    let n = p.len();
    let eps = 1e-5;
    let mut h = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut plus = p.values.clone();
        let mut minus = p.values.clone();
        plus[j] += eps;
        minus[j] -= eps;
        let (_, gp) = loss_and_grad(spec, &plus, data.images(), data.labels()).unwrap();
        let (_, gm) = loss_and_grad(spec, &minus, data.images(), data.labels()).unwrap();
        for i in 0..n {
            h[(i, j)] = (gp[i] - gm[i]) / (2.0 * eps);
        }
    }
    h
}

#[test]
fn loss_hessian_matches_assembled_matrix() {
    let (spec, p, data) = tiny_problem();
    assert!(p.len() <= 50);
    let h = assembled_hessian(&spec, &p, &data);
    for mode in [HvpMode::Exact, HvpMode::FiniteDifference] {
        let op = LossHessian::new(&spec, &p, &data, mode).unwrap();
        let v: Vec<f64> = (0..p.len()).map(|i| ((i * 5 % 7) as f64) - 3.0).collect();
        let hv = op.apply(&v).unwrap();
        let want = &h * nalgebra::DVector::from_column_slice(&v);
        let err = hv.iter().zip(want.iter()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        let scale = want.iter().map(|b| b.abs()).fold(0.0, f64::max);
        assert!(err / scale < 1e-3, "{mode:?}: {err} / {scale}");
    }
}

#[test]
fn hutchinson_on_assembled_and_diagonal_fixtures() {
    let (spec, p, data) = tiny_problem();
    let exact = assembled_hessian(&spec, &p, &data).trace();
    let op = LossHessian::new(&spec, &p, &data, HvpMode::Exact).unwrap();
    let t = hutchinson_trace(&op, 200, 1).unwrap();
    assert!((t.estimate - exact).abs() <= 3.0 * t.std_error.unwrap(), "{} vs {exact}", t.estimate);
    assert!((t.estimate - exact).abs() < 0.05 * exact.abs());

    let d = DenseOperator::diagonal(&[1.0, 2.0, 3.0]);
    let t = hutchinson_trace(&d, 200, 2).unwrap();
    assert!((t.estimate - 6.0).abs() <= 3.0 * t.std_error.unwrap() + 1e-12);
}

#[test]
fn hutchinson_is_unbiased_on_a_dense_fixture() {
    // off-diagonal mass makes single probes noisy
    let m = DMatrix::from_fn(5, 5, |i, j| if i == j { (i + 1) as f64 } else { 0.5 / (1 + i + j) as f64 });
    let op = DenseOperator(m);
    let runs: Vec<f64> = (0..50).map(|s| hutchinson_trace(&op, 10, s).unwrap().estimate).collect();
    let grand = runs.iter().sum::<f64>() / 50.0;
    assert!((grand - 15.0).abs() < 0.15, "{grand}");
}

#[test]
fn hutchinson_rejects_zero_probes() {
    assert!(hutchinson_trace(&DenseOperator::diagonal(&[1.0]), 0, 0).is_err());
}

fn spectrum() -> Vec<f64> {
    (0..50).map(|i| 0.3 * i as f64 + 0.05 * (i as f64).sin() - 2.0).collect()
}

#[test]
fn full_lanczos_recovers_a_diagonal_spectrum() {
    let eig = spectrum();
    let op = DenseOperator::diagonal(&eig);
    let dens = lanczos_density(&op, 50, 2, 0, None).unwrap();
    let mut sorted = eig.clone();
    sorted.sort_by(f64::total_cmp);
    for q in &dens.probes {
        assert_eq!(q.nodes.len(), 50);
        for (a, b) in q.nodes.iter().zip(&sorted) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
        assert!((q.weights.iter().sum::<f64>() - 1.0).abs() < 1e-8);
    }
    let mean = eig.iter().sum::<f64>() / 50.0;
    let (m0, m1) = dens.grid_moments();
    assert!((m0 - 1.0).abs() < 0.02);
    assert!((m1 - mean).abs() < 0.02 * mean.abs());
    let (q0, q1) = dens.moments();
    assert!((q0 - 1.0).abs() < 1e-8 && (q1 - mean).abs() < 1e-8);
    assert!(dens.density.iter().all(|&d| d >= 0.0));
}

#[test]
fn ritz_values_interlace() {
    let n = 30;
    let a = DMatrix::from_fn(n, n, |i, j| ((i * 7 + j * 7 + i * j) % 11) as f64 / 11.0 - 0.5);
    let sym = (&a + a.transpose()) * 0.5;
    let exact = nalgebra::SymmetricEigen::new(sym.clone()).eigenvalues;
    let (lo, hi) = (exact.min(), exact.max());
    let dens = lanczos_density(&DenseOperator(sym), 12, 3, 5, None).unwrap();
    for q in &dens.probes {
        assert!(q.nodes.iter().all(|&x| x >= lo - 1e-8 && x <= hi + 1e-8));
    }
}

#[test]
fn lanczos_step_bounds() {
    let op = DenseOperator::diagonal(&[1.0, 2.0, 3.0]);
    assert!(lanczos_density(&op, 1, 1, 0, None).is_err());
    assert!(lanczos_density(&op, 4, 1, 0, None).is_err());
    assert!(lanczos_density(&op, 3, 1, 0, Some(-1.0)).is_err());
}

fn trained(spec: &ModelSpec, data: &Dataset, lr: f64, iters: usize) -> ddlab_core::train::Trajectory {
    let cfg = TrainConfig { lr, record_every: 1, ..TrainConfig::full_batch(iters, 0) };
    train(spec, &spec.init(InitMode::XavierUniform, 1), data, &cfg, None).unwrap()
}

#[test]
fn trace_series_of_a_frozen_trajectory_is_constant() {
    let (spec, _, data) = tiny_problem();
    let traj = trained(&spec, &data, 0.0, 4);
    let cfg = TraceConfig { probes: 5, window: 3, ..TraceConfig::default() };
    let s = &trace_over_training(&spec, &traj, &[("d", &data)], None, &cfg).unwrap()[0];
    assert_eq!(s.iterations, vec![0, 1, 2, 3, 4]);
    assert!(s.raw.iter().all(|&v| v == s.raw[0]));
    assert!(s.smoothed.iter().all(|&v| (v - s.raw[0]).abs() < 1e-12));
    let w1 = TraceConfig { window: 1, ..cfg };
    let s1 = &trace_over_training(&spec, &traj, &[("d", &data)], Some(&[0, 2]), &w1).unwrap()[0];
    assert_eq!(s1.raw, s1.smoothed);
}

#[test]
fn trace_series_tracks_the_exact_trace() {
    let (spec, _, data) = tiny_problem();
    let traj = trained(&spec, &data, 0.5, 3);
    let cfg = TraceConfig { probes: 400, window: 1, ..TraceConfig::default() };
    let s = &trace_over_training(&spec, &traj, &[("d", &data)], None, &cfg).unwrap()[0];
    for (k, r) in traj.records.iter().enumerate() {
        let op = LossHessian::new(&spec, &r.params, &data, cfg.mode).unwrap();
        let direct = hutchinson_trace(&op, cfg.probes, cfg.seed).unwrap();
        assert_eq!(s.raw[k], direct.estimate);
        let exact = assembled_hessian(&spec, &r.params, &data).trace();
        assert!((direct.estimate - exact).abs() <= 3.0 * direct.std_error.unwrap(), "{} vs {exact}", s.raw[k]);
    }
}

#[test]
fn missing_snapshots_are_listed() {
    let (spec, _, data) = tiny_problem();
    let traj = trained(&spec, &data, 0.1, 2);
    let err =
        trace_over_training(&spec, &traj, &[("d", &data)], Some(&[1, 5, 7]), &TraceConfig::default()).unwrap_err();
    assert!(err.to_string().contains("[5, 7]"), "{err}");
}

#[test]
fn landscape_corners_and_orthogonality() {
    let b = common::tiny_blobs(0);
    let spec = common::small_convnet();
    let t0 = spec.init(InitMode::XavierUniform, 1);
    let tr = trained(&spec, &b.train, 0.01, 5).final_params().clone();
    let td = trained(&spec, &b.train.select(&[0, 20, 40]).unwrap(), 0.01, 5).final_params().clone();
    let plane = landscape_plane(&spec, &t0, &tr, &td, &[("test", &b.test)], 3, 0.0).unwrap();
    let loss = |p: &ParamVector| evaluate(&spec, p, &b.test).unwrap().mean_loss();
    let g = &plane.grids[0].losses;
    assert_eq!(g[0], loss(&t0));
    assert_eq!(g[2], loss(&tr));
    assert!(plane.orthogonality.abs() < 1e-10);

    let fine = landscape_plane(&spec, &t0, &tr, &td, &[("test", &b.test)], 5, 0.0).unwrap();
    for j in 0..3 {
        for i in 0..3 {
            assert_eq!(g[j * 3 + i], fine.grids[0].losses[(2 * j) * 5 + 2 * i]);
        }
    }
    assert!(landscape_plane(&spec, &t0, &t0, &td, &[("test", &b.test)], 3, 0.0).is_err());
    let shifted = landscape_plane(&spec, &t0, &tr, &td, &[("test", &b.test)], 3, 0.5).unwrap();
    assert_eq!(shifted.grids[0].losses[0], g[0] + 0.5);
}

#[test]
fn distilled_curvature_identical_sets_and_peak() {
    let (spec, _, data) = tiny_problem();
    let cfg = CurvatureConfig {
        train: TrainConfig { record_every: 1, ..TrainConfig::full_batch(6, 0) },
        init_seed: 2,
        trace: TraceConfig { probes: 4, window: 3, ..TraceConfig::default() },
        lanczos_steps: 8,
        density_probes: 2,
    };
    let out = distilled_training_curvature(&spec, &data, &data, &cfg).unwrap();
    assert_eq!(out.synthetic.raw, out.real.raw);
    let argmax = (0..out.synthetic.smoothed.len()).fold(0, |b, i| {
        if out.synthetic.smoothed[i] > out.synthetic.smoothed[b] {
            i
        } else {
            b
        }
    });
    assert_eq!(out.peak_iteration, out.synthetic.iterations[argmax]);
    assert_eq!(out.densities[0].iteration, 0);

    let zero = CurvatureConfig { train: TrainConfig { record_every: 1, ..TrainConfig::full_batch(0, 0) }, ..cfg };
    let out = distilled_training_curvature(&spec, &data, &data, &zero).unwrap();
    assert_eq!(out.synthetic.iterations, vec![0]);
    assert_eq!(out.densities.len(), 1);
}

#[test]
fn additional_training_controls() {
    let b = common::tiny_blobs(0);
    let spec = common::small_convnet();
    let pre = TrainConfig::full_batch(10, 0);
    let syn = b.train.select(&[0, 20, 40]).unwrap();
    let frozen = TrainConfig { lr: 0.0, ..pre.clone() };
    let rec = additional_training_delta(&spec, &b.train, &b.test, &[("syn", &syn)], &pre, &frozen, 3).unwrap();
    assert_eq!(rec[0].delta(), 0.0);

    let cont = TrainConfig::full_batch(5, 0);
    let rec = additional_training_delta(&spec, &b.train, &b.test, &[("real", &b.train)], &pre, &cont, 3).unwrap();
    let base = train(&spec, &spec.init(InitMode::XavierUniform, 3), &b.train, &pre, None).unwrap();
    let more = train(&spec, base.final_params(), &b.train, &cont, None).unwrap();
    assert_eq!(rec[0].before, evaluate(&spec, base.final_params(), &b.test).unwrap().accuracy);
    assert_eq!(rec[0].after, evaluate(&spec, more.final_params(), &b.test).unwrap().accuracy);
    let fixture = AdditionalTraining { name: "x".into(), before: 0.75, after: 0.5 };
    assert_eq!(fixture.delta(), -0.25);
}
