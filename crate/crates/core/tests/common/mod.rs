#![allow(dead_code)]

use ddlab_autodiff::Tensor;
use ddlab_core::data::{generate_blobs, BlobConfig, Blobs, Dataset, Split};
use ddlab_core::model::ModelSpec;

/// Small 8x8 blobs, quick enough for full training loops in tests.
pub fn tiny_blobs_config(seed: u64) -> BlobConfig {
    BlobConfig {
        num_classes: 3,
        train_per_class: 20,
        test_per_class: 10,
        image_shape: [3, 8, 8],
        seed,
        noise_sigma: 0.8,
    }
}

pub fn tiny_blobs(seed: u64) -> Blobs {
    generate_blobs(&tiny_blobs_config(seed)).unwrap()
}

pub fn small_convnet() -> ModelSpec {
    ModelSpec { width: 4, depth: 2, ..ModelSpec::convnet([3, 8, 8], 3) }
}

/// Dataset of `[n, 1, 1, d]` images from row vectors.
pub fn vectors(rows: &[Vec<f64>], labels: &[usize], classes: usize) -> Dataset {
    let d = rows[0].len();
    let flat: Vec<f64> = rows.concat();
    Dataset::new(Tensor::new(vec![rows.len(), 1, 1, d], flat).unwrap(), labels.to_vec(), classes, Split::Train).unwrap()
}

/// Plain-loop multinomial logistic regression, full-batch momentum GD on the
/// mean cross-entropy. Weights are `[d][k]` followed by `k` biases, matching
/// the linear model's flat layout.
pub fn logistic_gd(
    x: &[Vec<f64>],
    y: &[usize],
    k: usize,
    theta0: &[f64],
    lr: f64,
    momentum: f64,
    iters: usize,
) -> Vec<f64> {
    let d = x[0].len();
    let mut theta = theta0.to_vec();
    let mut vel = vec![0.0; theta.len()];
    for _ in 0..iters {
        let g = logistic_grad(x, y, k, &theta);
        for i in 0..theta.len() {
            vel[i] = momentum * vel[i] + g[i];
            theta[i] -= lr * vel[i];
        }
    }
    assert_eq!(theta.len(), d * k + k);
    theta
}

pub fn logistic_logits(x: &[f64], k: usize, theta: &[f64]) -> Vec<f64> {
    let d = x.len();
    (0..k).map(|c| theta[d * k + c] + (0..d).map(|j| x[j] * theta[j * k + c]).sum::<f64>()).collect()
}

pub fn cross_entropy(z: &[f64], y: usize) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - z[y]
}

fn logistic_grad(x: &[Vec<f64>], y: &[usize], k: usize, theta: &[f64]) -> Vec<f64> {
    let d = x[0].len();
    let n = x.len() as f64;
    let mut g = vec![0.0; theta.len()];
    for (xi, &yi) in x.iter().zip(y) {
        let z = logistic_logits(xi, k, theta);
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
        let s: f64 = e.iter().sum();
        for c in 0..k {
            let r = (e[c] / s - if c == yi { 1.0 } else { 0.0 }) / n;
            for j in 0..d {
                g[j * k + c] += r * xi[j];
            }
            g[d * k + c] += r;
        }
    }
    g
}
