use crate::error::{AutodiffError, Result};
use crate::graph::{GradOptions, Graph, Var};
use crate::tensor::Tensor;

/// How Hessian-vector products are formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum HvpMode {
    /// Differentiate `<grad, v>` a second time.
    #[default]
    Exact,
    /// Central differences of gradients with step `1e-4 * (1 + |params|_inf)`.
    FiniteDifference,
}

/// Value and gradient of `loss_fn` at `params`.
pub fn value_and_grad<F>(loss_fn: &F, params: &[f64]) -> Result<(f64, Vec<f64>)>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let theta = g.param(Tensor::vector(params.to_vec()));
    let loss = loss_fn(&g, theta)?;
    let grad = g.grad(loss, &[theta], GradOptions { create_graph: false, allow_unused: true })?;
    let value = loss.item();
    Ok((value, grad[0].value().data().to_vec()))
}

/// Hessian of `loss_fn` at `params` applied to `v`.
pub fn hvp<F>(loss_fn: &F, params: &[f64], v: &[f64], mode: HvpMode) -> Result<Vec<f64>>
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> Result<Var<'g>>,
{
    if v.len() != params.len() {
        return Err(AutodiffError::DimensionMismatch { expected: params.len(), got: v.len() });
    }
    match mode {
        HvpMode::Exact => {
            let g = Graph::new();
            let theta = g.param(Tensor::vector(params.to_vec()));
            let loss = loss_fn(&g, theta)?;
            let opts = GradOptions { create_graph: true, allow_unused: true };
            let grad = g.grad(loss, &[theta], opts)?[0];
            if !grad.requires_grad() {
                // gradient independent of the parameters: zero curvature
                return Ok(vec![0.0; params.len()]);
            }
            let dir = g.constant(Tensor::vector(v.to_vec()));
            let gv = grad.dot(dir)?;
            let hv = g.grad(gv, &[theta], opts)?[0];
            Ok(hv.value().data().to_vec())
        }
        HvpMode::FiniteDifference => {
            let vnorm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if vnorm == 0.0 {
                return Ok(vec![0.0; params.len()]);
            }
            let inf = params.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let eps = 1e-4 * (1.0 + inf);
            let shifted =
                |sign: f64| -> Vec<f64> { params.iter().zip(v).map(|(p, d)| p + sign * eps * d / vnorm).collect() };
            let (_, gp) = value_and_grad(loss_fn, &shifted(1.0))?;
            let (_, gm) = value_and_grad(loss_fn, &shifted(-1.0))?;
            Ok(gp.iter().zip(&gm).map(|(a, b)| vnorm * (a - b) / (2.0 * eps)).collect())
        }
    }
}
