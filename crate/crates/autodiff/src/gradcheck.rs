//! Central finite-difference gradient checking.
//!
//! Everything here evaluates forward values only, so it serves as an oracle
//! for the backward rules of [`Graph`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{GradOptions, Graph, Var};
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, 1e-3)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-3)
}

pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| relative_error(*x, *y)).fold(0.0, f64::max)
}

/// Central-difference gradient of a scalar function of a flat vector.
pub fn numeric_gradient(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + step;
            let up = f(&probe);
            probe[i] = x[i] - step;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Builds a scalar from graph inputs; used by [`check_gradient`].
pub trait ScalarFn: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>> {}
impl<F> ScalarFn for F where F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>> {}

fn eval_scalar<F: ScalarFn>(f: &F, inputs: &[Tensor]) -> Result<f64> {
    let g = Graph::new();
    // params, so cases that differentiate internally still see their inputs
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.param(t.clone())).collect();
    Ok(f(&g, &vars)?.item())
}

/// Largest relative error between backward-pass gradients of `f` and central
/// differences, over every element of every input.
pub fn check_gradient<F: ScalarFn>(f: &F, inputs: &[Tensor], step: f64) -> Result<f64> {
    let g = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = f(&g, &vars)?;
    let opts = GradOptions { create_graph: false, allow_unused: true };
    let analytic = g.grad(y, &vars, opts)?;
    let mut worst = 0.0f64;
    for (k, input) in inputs.iter().enumerate() {
        let mut err = None;
        let numeric = numeric_gradient(
            |x| {
                let mut perturbed = inputs.to_vec();
                perturbed[k] = Tensor::new(input.shape().to_vec(), x.to_vec()).expect("same shape");
                eval_scalar(f, &perturbed).unwrap_or_else(|e| {
                    err = Some(e);
                    f64::NAN
                })
            },
            input.data(),
            step,
        );
        if let Some(e) = err {
            return Err(e);
        }
        worst = worst.max(max_relative_error(analytic[k].value().data(), &numeric));
    }
    Ok(worst)
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub case: &'static str,
    pub max_rel_error: f64,
}

/// Operation families covered by [`random_op_checks`].
pub const CASES: &[&str] = &[
    "add",
    "sub",
    "mul",
    "div",
    "scale_shift",
    "sqrt",
    "relu",
    "matmul",
    "transpose",
    "reshape",
    "expand",
    "sum_to",
    "slice_embed",
    "conv2d",
    "avg_pool2d",
    "add_bias",
    "instance_norm",
    "softmax",
    "cross_entropy",
    "mean_norm",
    "conv2d_double_backward",
    "cross_entropy_double_backward",
    "instance_norm_double_backward",
];

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Values bounded away from zero, with random sign.
fn signed_away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape.to_vec(), data).expect("consistent")
}

/// Runs `count` randomized gradient checks cycling through [`CASES`]. Each
/// case contracts the op output with a random weight tensor so every output
/// element contributes.
pub fn random_op_checks(seed: u64, count: usize) -> Result<Vec<CheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let case = CASES[i % CASES.len()];
        let (inputs, weights, f) = build_case(case, &mut rng);
        let w = weights;
        let err = check_gradient(
            &|g: &Graph, v: &[Var<'_>]| {
                let y = f(g, v)?;
                let wv = g.constant(w.clone());
                y.dot(wv)
            },
            &inputs,
            DEFAULT_STEP,
        )?;
        out.push(CheckReport { case, max_rel_error: err });
    }
    Ok(out)
}

type CaseFn = Box<dyn for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>>;

fn build_case(case: &'static str, rng: &mut ChaCha8Rng) -> (Vec<Tensor>, Tensor, CaseFn) {
    let r = rng.random_range(1..4usize);
    let c = rng.random_range(1..5usize);
    let mat = |rng: &mut ChaCha8Rng| tensor(&[r, c], uniform(rng, r * c, -1.0, 1.0));
    let (inputs, f): (Vec<Tensor>, CaseFn) = match case {
        "add" => (vec![mat(rng), mat(rng)], Box::new(|_, v| v[0].add(v[1]))),
        "sub" => (vec![mat(rng), mat(rng)], Box::new(|_, v| v[0].sub(v[1]))),
        "mul" => (vec![mat(rng), mat(rng)], Box::new(|_, v| v[0].mul(v[1]))),
        "div" => {
            let den = tensor(&[r, c], signed_away_from_zero(rng, r * c).iter().map(|x| x * 2.0).collect());
            (vec![mat(rng), den], Box::new(|_, v| v[0].div(v[1])))
        }
        "scale_shift" => {
            let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
            (vec![mat(rng)], Box::new(move |_, v| v[0].scale(a)?.add_scalar(b)))
        }
        "sqrt" => (vec![tensor(&[r, c], uniform(rng, r * c, 0.5, 2.0))], Box::new(|_, v| v[0].sqrt())),
        "relu" => (vec![tensor(&[r, c], signed_away_from_zero(rng, r * c))], Box::new(|_, v| v[0].relu())),
        "matmul" => {
            let k = rng.random_range(1..5usize);
            let b = tensor(&[c, k], uniform(rng, c * k, -1.0, 1.0));
            (vec![mat(rng), b], Box::new(|_, v| v[0].matmul(v[1])))
        }
        "transpose" => (vec![mat(rng)], Box::new(|_, v| v[0].transpose())),
        "reshape" => (vec![mat(rng)], Box::new(move |_, v| v[0].reshape(&[c, r]))),
        "expand" => {
            let x = tensor(&[r, 1], uniform(rng, r, -1.0, 1.0));
            (vec![x], Box::new(move |_, v| v[0].expand(&[r, c])))
        }
        "sum_to" => (vec![mat(rng)], Box::new(move |_, v| v[0].sum_to(&[1, c]))),
        "slice_embed" => {
            let n = r * c;
            let start = rng.random_range(0..n);
            let len = rng.random_range(1..=n - start);
            (vec![mat(rng)], Box::new(move |_, v| v[0].slice(start, &[len])?.embed(start, &[n + 1])))
        }
        "conv2d" | "conv2d_double_backward" => {
            let n = rng.random_range(1..3usize);
            let ci = rng.random_range(1..4usize);
            let co = rng.random_range(1..3usize);
            let h = rng.random_range(3..7usize);
            let w = rng.random_range(3..7usize);
            let k = rng.random_range(1..4usize);
            let stride = rng.random_range(1..3usize);
            let pad = rng.random_range(0..2usize);
            let x = tensor(&[n, ci, h, w], uniform(rng, n * ci * h * w, -1.0, 1.0));
            let wt = tensor(&[co, ci, k, k], uniform(rng, co * ci * k * k, -1.0, 1.0));
            if case == "conv2d" {
                (vec![x, wt], Box::new(move |_, v| v[0].conv2d(v[1], stride, pad)))
            } else {
                let ho = (h + 2 * pad - k) / stride + 1;
                let wo = (w + 2 * pad - k) / stride + 1;
                let s = tensor(&[n, co, ho, wo], uniform(rng, n * co * ho * wo, -1.0, 1.0));
                let (rx, rw) = (
                    tensor(&[n, ci, h, w], uniform(rng, n * ci * h * w, -1.0, 1.0)),
                    tensor(&[co, ci, k, k], uniform(rng, co * ci * k * k, -1.0, 1.0)),
                );
                (
                    vec![x, wt],
                    Box::new(move |g, v| {
                        // L = sum(s * y^2); differentiate sum(rx*dL/dx) + sum(rw*dL/dw)
                        let y = v[0].conv2d(v[1], stride, pad)?;
                        let l = y.mul(y)?.dot(g.constant(s.clone()))?;
                        let gr = g.grad(l, &[v[0], v[1]], GradOptions::create_graph())?;
                        let a = gr[0].dot(g.constant(rx.clone()))?;
                        let b = gr[1].dot(g.constant(rw.clone()))?;
                        a.add(b)?.reshape(&[1])
                    }),
                )
            }
        }
        "avg_pool2d" => {
            let ch = rng.random_range(1..3usize);
            let k = rng.random_range(1..3usize);
            let h = k * rng.random_range(1..4usize);
            let x = tensor(&[r, ch, h, h], uniform(rng, r * ch * h * h, -1.0, 1.0));
            (vec![x], Box::new(move |_, v| v[0].avg_pool2d(k)))
        }
        "add_bias" => {
            let x = tensor(&[r, c, 2, 3], uniform(rng, r * c * 6, -1.0, 1.0));
            let b = tensor(&[c], uniform(rng, c, -1.0, 1.0));
            (vec![x, b], Box::new(|_, v| v[0].add_bias(v[1])))
        }
        "instance_norm" => {
            let h = rng.random_range(2..5usize);
            let x = tensor(&[r, c, h, h], uniform(rng, r * c * h * h, -1.0, 1.0));
            (vec![x], Box::new(|_, v| v[0].instance_norm(1e-5)))
        }
        "instance_norm_double_backward" => {
            let h = rng.random_range(2..5usize);
            let n = r * c * h * h;
            let x = tensor(&[r, c, h, h], uniform(rng, n, -1.0, 1.0));
            let s = tensor(&[r, c, h, h], uniform(rng, n, -1.0, 1.0));
            let probe = tensor(&[r, c, h, h], uniform(rng, n, -1.0, 1.0));
            (
                vec![x],
                Box::new(move |g, v| {
                    // cubic in the normalised output so the second derivative is non-trivial
                    let y = v[0].instance_norm(1e-5)?;
                    let l = y.mul(y)?.mul(y)?.dot(g.constant(s.clone()))?;
                    let gr = g.grad(l, &[v[0]], GradOptions::create_graph())?;
                    gr[0].dot(g.constant(probe.clone()))?.reshape(&[1])
                }),
            )
        }
        "softmax" => (vec![mat(rng)], Box::new(|_, v| v[0].softmax())),
        "cross_entropy" | "cross_entropy_double_backward" => {
            let k = rng.random_range(2..5usize);
            let x = tensor(&[r, k], uniform(rng, r * k, -2.0, 2.0));
            let targets: Vec<usize> = (0..r).map(|_| rng.random_range(0..k)).collect();
            if case == "cross_entropy" {
                (vec![x], Box::new(move |_, v| v[0].cross_entropy(&targets)))
            } else {
                let wmat = tensor(&[k, k], uniform(rng, k * k, -1.0, 1.0));
                let probe = tensor(&[k, k], uniform(rng, k * k, -1.0, 1.0));
                (
                    vec![x, wmat],
                    Box::new(move |g, v| {
                        let l = v[0].matmul(v[1])?.cross_entropy(&targets)?.mean()?;
                        let gw = g.grad(l, &[v[1]], GradOptions::create_graph())?[0];
                        gw.dot(g.constant(probe.clone()))
                    }),
                )
            }
        }
        "mean_norm" => (vec![mat(rng)], Box::new(|_, v| v[0].mean()?.add(v[0].norm()?))),
        other => unreachable!("unknown case {other}"),
    };
    // probe the output shape to build contraction weights
    let g = Graph::new();
    let vars: Vec<Var<'_>> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let shape = f(&g, &vars).expect("case builds").shape();
    let n: usize = shape.iter().product();
    let weights = tensor(&shape, uniform(rng, n, -1.0, 1.0));
    (inputs, weights, f)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numeric_gradient_of_cubic() {
        let g = numeric_gradient(|x| x[0].powi(3) + 2.0 * x[1], &[2.0, 5.0], 1e-5);
        assert!((g[0] - 12.0).abs() < 1e-8);
        assert!((g[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn every_case_builds() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for case in CASES {
            let _ = build_case(case, &mut rng);
        }
    }
}
