use ddlab_autodiff::{GradOptions, Graph, Tensor};

use super::{images_of, mean_loss, pixel_step, sample_from, unroll, DistillConfig, LogRow, Method, Probe, RunLog};
use crate::data::{Dataset, SyntheticSet};
use crate::error::{CoreError, Result};
use crate::model::{InitMode, ModelSpec};
use crate::rng;

/// Outer loss and its gradient w.r.t. the synthetic pixels after
/// `inner_steps` differentiable full-batch SGD steps from `theta0`.
#[allow(clippy::too_many_arguments)]
pub fn bptt_meta_gradient(
    spec: &ModelSpec,
    theta0: &[f64],
    syn_images: &Tensor,
    syn_labels: &[usize],
    real_images: &Tensor,
    real_labels: &[usize],
    inner_lr: f64,
    inner_steps: usize,
) -> Result<(f64, Vec<f64>)> {
    let g = Graph::new();
    let xs = g.param(syn_images.clone());
    let theta = g.param(Tensor::vector(theta0.to_vec()));
    let lr = g.constant(Tensor::scalar(inner_lr));
    let theta = unroll(&g, spec, theta, xs, syn_labels, lr, inner_steps)?;
    let outer = mean_loss(spec, theta, g.constant(real_images.clone()), real_labels)?;
    let opts = GradOptions { create_graph: false, allow_unused: true };
    let grad = g.grad(outer, &[xs], opts)?[0];
    Ok((outer.item(), grad.value().data().to_vec()))
}

/// Bilevel distillation: per outer step, a fresh network is trained on the
/// synthetic set for `inner_steps` and the real-batch loss of the result is
/// differentiated back to the pixels. Pixels are never clipped.
pub fn distill_bptt(real: &Dataset, cfg: &DistillConfig, probe: Option<&Dataset>) -> Result<(SyntheticSet, RunLog)> {
    check_method(cfg, Method::Bptt)?;
    let mut set = cfg.initial_set(real)?;
    let mut images = set.images.clone();
    let all: Vec<usize> = (0..real.len()).collect();
    let probe = Probe::new(cfg, probe);
    let mut log = RunLog::default();
    for step in 0..cfg.outer_steps {
        let seed = cfg.step_seed(step);
        let theta0 = cfg.spec.init(InitMode::XavierUniform, seed);
        let idx = sample_from(&all, cfg.real_batch, &mut rng::seeded(seed, rng::stream::DISTILL));
        let (rx, ry) = images_of(real, &idx)?;
        let (objective, grad) = bptt_meta_gradient(
            &cfg.spec,
            &theta0.values,
            &images,
            set.labels(),
            &rx,
            &ry,
            cfg.inner_lr,
            cfg.inner_steps,
        )
        .map_err(|e| numerical(e, cfg.method, step))?;
        pixel_step(&mut images, &grad, cfg.outer_lr, cfg.method, step)?;
        let probe_accuracy = probe.at(step, &images, &set)?;
        log.rows.push(LogRow { step, objective, probe_accuracy, skipped: 0 });
    }
    set.images = images;
    set.meta.iterations = cfg.outer_steps;
    Ok((set, log))
}

pub(super) fn check_method(cfg: &DistillConfig, method: Method) -> Result<()> {
    if cfg.method != method {
        return Err(CoreError::invalid(
            "distill config",
            format!("method is {}, expected {}", cfg.method.name(), method.name()),
        ));
    }
    cfg.validate()
}

/// Non-finite values inside the meta-gradient graph become a meta-gradient error.
pub(super) fn numerical(e: CoreError, method: Method, step: usize) -> CoreError {
    if e.is_numerical() {
        CoreError::MetaGradientNaN { method: method.name(), step }
    } else {
        e
    }
}
