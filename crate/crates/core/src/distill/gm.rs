use std::ops::Range;

use ddlab_autodiff::{GradOptions, Graph, Tensor, Var};

use super::bptt::{check_method, numerical};
use super::{mean_loss, pixel_step, sample_from, DistillConfig, LogRow, Method, Probe, RunLog};
use crate::data::{Dataset, SyntheticSet};
use crate::error::{CoreError, Result};
use crate::model::{InitMode, ModelSpec};
use crate::rng;
use crate::train::{loss_and_grad, MomentumSgd, Optimizer};

/// Layer norms below this count as zero.
const ZERO_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientDistance {
    pub value: f64,
    /// Layers left out because one of the two gradients vanished there.
    pub skipped: usize,
}

/// `sum over layers of (1 - cos(a_l, b_l))`, skipping zero-norm layers.
pub fn layer_cosine_distance(a: &[f64], b: &[f64], layers: &[Range<usize>]) -> GradientDistance {
    let mut value = 0.0;
    let mut skipped = 0;
    for l in layers {
        let (x, y) = (&a[l.clone()], &b[l.clone()]);
        let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nx < ZERO_NORM || ny < ZERO_NORM {
            skipped += 1;
            continue;
        }
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        value += 1.0 - dot / (nx * ny);
    }
    GradientDistance { value, skipped }
}

/// Graph version of [`layer_cosine_distance`] with `b` held constant.
fn cosine_distance_var<'g>(
    g: &'g Graph,
    a: Var<'g>,
    b: &[f64],
    layers: &[Range<usize>],
) -> Result<(Option<Var<'g>>, usize)> {
    let av = a.value();
    let mut total: Option<Var<'g>> = None;
    let mut skipped = 0;
    for l in layers {
        let y = &b[l.clone()];
        let nx = av.data()[l.clone()].iter().map(|v| v * v).sum::<f64>().sqrt();
        let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if nx < ZERO_NORM || ny < ZERO_NORM {
            skipped += 1;
            continue;
        }
        let x = a.slice(l.start, &[l.len()])?;
        let cos = x.dot(g.constant(Tensor::vector(y.to_vec())))?.div(x.norm()?)?.scale(1.0 / ny)?;
        let term = cos.neg()?.add_scalar(1.0)?;
        total = Some(match total {
            Some(t) => t.add(term)?,
            None => term,
        });
    }
    Ok((total, skipped))
}

/// Class-wise gradient matching: for every class, the parameter gradient of
/// the synthetic images is pulled towards that of a real batch of the same
/// class under layerwise cosine distance. The network is re-initialised every
/// `resample_every` outer steps and trained for `network_steps` on the
/// synthetic set after each one.
pub fn distill_gradient_matching(
    real: &Dataset,
    cfg: &DistillConfig,
    probe: Option<&Dataset>,
) -> Result<(SyntheticSet, RunLog)> {
    check_method(cfg, Method::GradientMatching)?;
    let spec = &cfg.spec;
    let mut set = cfg.initial_set(real)?;
    let mut images = set.images.clone();
    let by_class = real.class_indices();
    let layers = spec.layout().layers();
    let probe = Probe::new(cfg, probe);
    let mut log = RunLog::default();
    let mut theta = Vec::new();
    let mut net_opt = MomentumSgd::new(cfg.inner_lr, 0.0, 0.0, spec.num_params());
    for step in 0..cfg.outer_steps {
        let seed = cfg.step_seed(step);
        if step % cfg.resample_every == 0 {
            theta = spec.init(InitMode::XavierUniform, seed).values;
        }
        let mut r = rng::seeded(seed, rng::stream::DISTILL);
        let batches: Vec<Vec<usize>> = by_class.iter().map(|idx| sample_from(idx, cfg.real_batch, &mut r)).collect();
        let (objective, grad, skipped) =
            gm_objective(spec, &theta, &images, set.labels(), cfg.ipc, real, &batches, &layers)
                .map_err(|e| numerical(e, cfg.method, step))?;
        if let Some(grad) = grad {
            pixel_step(&mut images, &grad, cfg.outer_lr, cfg.method, step)?;
        }
        for _ in 0..cfg.network_steps {
            let (_, g) =
                loss_and_grad(spec, &theta, &images, set.labels()).map_err(|e| numerical(e, cfg.method, step))?;
            net_opt.step(&mut theta, &g);
        }
        let probe_accuracy = probe.at(step, &images, &set)?;
        log.rows.push(LogRow { step, objective, probe_accuracy, skipped });
    }
    set.images = images;
    set.meta.iterations = cfg.outer_steps;
    Ok((set, log))
}

#[allow(clippy::too_many_arguments)]
fn gm_objective(
    spec: &ModelSpec,
    theta: &[f64],
    images: &Tensor,
    labels: &[usize],
    ipc: usize,
    real: &Dataset,
    batches: &[Vec<usize>],
    layers: &[Range<usize>],
) -> Result<(f64, Option<Vec<f64>>, usize)> {
    let g = Graph::new();
    let xs = g.param(images.clone());
    let th = g.param(Tensor::vector(theta.to_vec()));
    let s = images.shape();
    let per = s[1] * s[2] * s[3];
    let mut total: Option<Var<'_>> = None;
    let mut skipped = 0;
    for (c, idx) in batches.iter().enumerate() {
        if idx.is_empty() {
            return Err(CoreError::invalid("gradient matching", format!("class {c} has no real images")));
        }
        let batch = real.select(idx)?;
        let (_, gr) = loss_and_grad(spec, theta, batch.images(), batch.labels())?;
        let xc = xs.slice(c * ipc * per, &[ipc, s[1], s[2], s[3]])?;
        let ls = mean_loss(spec, th, xc, &labels[c * ipc..(c + 1) * ipc])?;
        let gs = g.grad(ls, &[th], GradOptions::create_graph())?[0];
        let (term, skip) = cosine_distance_var(&g, gs, &gr, layers)?;
        skipped += skip;
        if let Some(term) = term {
            total = Some(match total {
                Some(t) => t.add(term)?,
                None => term,
            });
        }
    }
    let Some(total) = total else { return Ok((0.0, None, skipped)) };
    let opts = GradOptions { create_graph: false, allow_unused: true };
    let grad = g.grad(total, &[xs], opts)?[0];
    Ok((total.item(), Some(grad.value().data().to_vec()), skipped))
}
