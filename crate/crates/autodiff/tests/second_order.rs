use ddlab_autodiff::gradcheck::{max_relative_error, numeric_gradient, relative_error};
use ddlab_autodiff::{hvp, value_and_grad, GradOptions, Graph, HvpMode, Result, Tensor, Var};
use proptest::prelude::*;

#[test]
fn grad_of_square_gradient_is_two() {
    let g = Graph::new();
    let x = g.param(Tensor::scalar(4.0));
    let f = x.mul(x).unwrap();
    let df = g.grad(f, &[x], GradOptions::create_graph()).unwrap()[0];
    let d2 = g.grad(df, &[x], GradOptions::default()).unwrap()[0];
    assert_eq!(d2.item(), 2.0);
}

/// One SGD step on l(w) = 0.5 (w x - 1)^2, then outer loss 0.5 (w1 a - 1)^2.
#[test]
fn one_step_unrolled_sgd_matches_hand_derivation() {
    let (w0, x0, lr, a) = (0.5, 3.0, 0.1, 1.5);
    let g = Graph::new();
    let x = g.param(Tensor::scalar(x0));
    let w = g.param(Tensor::scalar(w0));
    let r = w.mul(x).unwrap().add_scalar(-1.0).unwrap();
    let inner = r.mul(r).unwrap().scale(0.5).unwrap();
    let gw = g.grad(inner, &[w], GradOptions::create_graph()).unwrap()[0];
    let w1 = w.sub(gw.scale(lr).unwrap()).unwrap();
    let ro = w1.scale(a).unwrap().add_scalar(-1.0).unwrap();
    let outer = ro.mul(ro).unwrap().scale(0.5).unwrap();
    let meta = g.grad(outer, &[x], GradOptions::default()).unwrap()[0].item();

    let w1v = w0 - lr * (w0 * x0 - 1.0) * x0;
    let dw1_dx = -lr * (2.0 * w0 * x0 - 1.0);
    let expected = (w1v * a - 1.0) * a * dw1_dx;
    assert!((meta - expected).abs() < 1e-14, "{meta} vs {expected}");
    assert!((expected - 0.1425).abs() < 1e-12);
}

/// Model y = w0 * x + w1 * x^2, squared loss; 3 SGD steps on the synthetic
/// points, outer squared loss on real points.
fn unrolled_outer_plain(xs: &[f64]) -> f64 {
    let ys = [1.0, -0.5];
    let (xr, yr) = ([0.3, -0.8, 1.1], [0.7, -0.2, 1.4]);
    let mut w = [0.2, -0.1];
    let lr = 0.3;
    for _ in 0..3 {
        let mut gr = [0.0, 0.0];
        for (x, y) in xs.iter().zip(&ys) {
            let res = w[0] * x + w[1] * x * x - y;
            gr[0] += res * x / xs.len() as f64;
            gr[1] += res * x * x / xs.len() as f64;
        }
        w[0] -= lr * gr[0];
        w[1] -= lr * gr[1];
    }
    xr.iter().zip(&yr).map(|(x, y)| 0.5 * (w[0] * x + w[1] * x * x - y).powi(2)).sum::<f64>() / 3.0
}

/// Coefficient `i` of `w` broadcast across `n` inputs.
fn coef<'g>(w: Var<'g>, i: usize, n: usize) -> Result<Var<'g>> {
    w.slice(i, &[1, 1])?.expand(&[1, n])?.reshape(&[n])
}

fn predict<'g>(w: Var<'g>, x: Var<'g>, n: usize) -> Result<Var<'g>> {
    x.mul(coef(w, 0, n)?)?.add(x.mul(x)?.mul(coef(w, 1, n)?)?)
}

fn unrolled_outer_graph(xs0: &[f64]) -> (f64, Vec<f64>) {
    let g = Graph::new();
    let xs = g.param(Tensor::vector(xs0.to_vec()));
    let ys = g.constant(Tensor::vector(vec![1.0, -0.5]));
    let xr = g.constant(Tensor::vector(vec![0.3, -0.8, 1.1]));
    let yr = g.constant(Tensor::vector(vec![0.7, -0.2, 1.4]));
    let mut w = g.param(Tensor::vector(vec![0.2, -0.1]));
    for _ in 0..3 {
        let res = predict(w, xs, 2).unwrap().sub(ys).unwrap();
        let loss = res.mul(res).unwrap().scale(0.5).unwrap().mean().unwrap();
        let gw = g.grad(loss, &[w], GradOptions::create_graph()).unwrap()[0];
        w = w.sub(gw.scale(0.3).unwrap()).unwrap();
    }
    let res = predict(w, xr, 3).unwrap().sub(yr).unwrap();
    let outer = res.mul(res).unwrap().scale(0.5).unwrap().mean().unwrap();
    let meta = g.grad(outer, &[xs], GradOptions::default()).unwrap()[0];
    (outer.item(), meta.value().data().to_vec())
}

#[test]
fn three_step_unrolled_meta_gradient_matches_finite_differences() {
    let xs = [0.6, -1.3];
    let (value, meta) = unrolled_outer_graph(&xs);
    assert!((value - unrolled_outer_plain(&xs)).abs() < 1e-12);
    let numeric = numeric_gradient(unrolled_outer_plain, &xs, 1e-5);
    let err = max_relative_error(&meta, &numeric);
    assert!(err < 1e-3, "relative error {err}");
}

fn quadratic(a: Vec<f64>, n: usize) -> impl for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>> {
    move |g, theta| {
        let col = theta.reshape(&[n, 1])?;
        let am = g.constant(Tensor::new(vec![n, n], a.clone())?);
        col.transpose()?.matmul(am.matmul(col)?)?.reshape(&[1])?.scale(0.5)
    }
}

#[test]
fn hvp_of_diagonal_quadratic() {
    let f = quadratic(vec![1.0, 0.0, 0.0, 2.0], 2);
    for theta in [[0.0, 0.0], [3.0, -7.0]] {
        let hv = hvp(&f, &theta, &[1.0, 1.0], HvpMode::Exact).unwrap();
        assert_eq!(hv, vec![1.0, 2.0]);
        let fd = hvp(&f, &theta, &[1.0, 1.0], HvpMode::FiniteDifference).unwrap();
        assert!(max_relative_error(&fd, &[1.0, 2.0]) < 1e-8);
    }
}

#[test]
fn hvp_of_zero_vector_is_zero() {
    let f = quadratic(vec![1.0, 0.5, 0.5, 2.0], 2);
    for mode in [HvpMode::Exact, HvpMode::FiniteDifference] {
        assert_eq!(hvp(&f, &[0.3, 0.2], &[0.0, 0.0], mode).unwrap(), vec![0.0, 0.0]);
    }
}

#[test]
fn hvp_rejects_dimension_mismatch() {
    let f = quadratic(vec![1.0, 0.0, 0.0, 1.0], 2);
    assert!(hvp(&f, &[0.0, 0.0], &[1.0], HvpMode::Exact).is_err());
}

/// 3 -> 4 -> 2 MLP (26 parameters) on a fixed batch, parameters flattened.
fn tiny_mlp_loss<'g>(g: &'g Graph, theta: Var<'g>) -> Result<Var<'g>> {
    let x = g.constant(Tensor::new(
        vec![5, 3],
        vec![0.5, -1.0, 0.3, 1.2, 0.4, -0.7, -0.3, 0.9, 1.1, 0.8, -0.6, -0.2, 0.1, 0.2, -1.3],
    )?);
    let w1 = theta.slice(0, &[3, 4])?;
    let b1 = theta.slice(12, &[4])?;
    let w2 = theta.slice(16, &[4, 2])?;
    let b2 = theta.slice(24, &[2])?;
    let h = x.matmul(w1)?.add_bias(b1)?.relu()?;
    h.matmul(w2)?.add_bias(b2)?.cross_entropy(&[0, 1, 1, 0, 1])?.mean()
}

fn tiny_theta() -> Vec<f64> {
    (0..26).map(|i| (i as f64 * 1.618).sin() * 0.9).collect()
}

fn assembled_hessian(theta: &[f64]) -> Vec<Vec<f64>> {
    let h = 1e-5;
    (0..theta.len())
        .map(|i| {
            let mut p = theta.to_vec();
            p[i] += h;
            let (_, gp) = value_and_grad(&tiny_mlp_loss, &p).unwrap();
            p[i] -= 2.0 * h;
            let (_, gm) = value_and_grad(&tiny_mlp_loss, &p).unwrap();
            gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect()
        })
        .collect()
}

#[test]
fn tiny_mlp_hvp_matches_assembled_hessian() {
    let theta = tiny_theta();
    let cols = assembled_hessian(&theta);
    let v: Vec<f64> = (0..26).map(|i| ((i * 7 % 5) as f64 - 2.0) * 0.5).collect();
    let mut expect = vec![0.0; 26];
    for (j, col) in cols.iter().enumerate() {
        for (i, hij) in col.iter().enumerate() {
            expect[i] += hij * v[j];
        }
    }
    for mode in [HvpMode::Exact, HvpMode::FiniteDifference] {
        let hv = hvp(&tiny_mlp_loss, &theta, &v, mode).unwrap();
        let err = max_relative_error(&hv, &expect);
        assert!(err < 1e-3, "{mode:?}: relative error {err}");
    }
    // unit vectors recover individual columns
    let mut e3 = vec![0.0; 26];
    e3[3] = 1.0;
    let col = hvp(&tiny_mlp_loss, &theta, &e3, HvpMode::Exact).unwrap();
    for (i, c) in col.iter().enumerate() {
        assert!(relative_error(*c, cols[3][i]) < 1e-3);
    }
}

fn symmetric(n: usize, raw: &[f64]) -> Vec<f64> {
    let mut a = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            a[i * n + j] = raw[i * n + j] + raw[j * n + i];
        }
    }
    a
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn exact_hvp_reproduces_constant_hessian(
        n in 2usize..6,
        raw in prop::collection::vec(-2.0f64..2.0, 36),
        theta in prop::collection::vec(-3.0f64..3.0, 6),
        v in prop::collection::vec(-3.0f64..3.0, 6),
    ) {
        let a = symmetric(n, &raw);
        let f = quadratic(a.clone(), n);
        let hv = hvp(&f, &theta[..n], &v[..n], HvpMode::Exact).unwrap();
        for i in 0..n {
            let e: f64 = (0..n).map(|j| a[i * n + j] * v[j]).sum();
            prop_assert!((hv[i] - e).abs() < 1e-8);
        }
    }

    #[test]
    fn hvp_is_linear_in_the_direction(
        scale in -4.0f64..4.0,
        v in prop::collection::vec(-1.0f64..1.0, 26),
    ) {
        let theta = tiny_theta();
        let scaled: Vec<f64> = v.iter().map(|x| x * scale).collect();
        for (mode, tol) in [(HvpMode::Exact, 1e-10), (HvpMode::FiniteDifference, 1e-5)] {
            let a = hvp(&tiny_mlp_loss, &theta, &scaled, mode).unwrap();
            let b: Vec<f64> = hvp(&tiny_mlp_loss, &theta, &v, mode).unwrap().iter().map(|x| x * scale).collect();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{:?}: {} vs {}", mode, x, y);
            }
        }
    }
}
