use ddlab_autodiff::{GradOptions, Graph, Tensor};

use super::bptt::{check_method, numerical};
use super::{pixel_step, sample_from, DistillConfig, LogRow, Method, Probe, RunLog};
use crate::data::{Dataset, SyntheticSet};
use crate::error::{CoreError, Result};
use crate::model::{InitMode, ModelSpec, ParamVector};
use crate::rng;

/// Squared Euclidean distance between the mean rows of two feature sets.
pub fn mean_embedding_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let mean = |rows: &[Vec<f64>]| -> Vec<f64> {
        let mut m = vec![0.0; rows[0].len()];
        for r in rows {
            m.iter_mut().zip(r).for_each(|(s, v)| *s += v);
        }
        m.iter_mut().for_each(|s| *s /= rows.len() as f64);
        m
    };
    mean(a).iter().zip(mean(b)).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sum over classes of the squared distance between mean penultimate features
/// of the synthetic images and of all real images of that class.
pub fn distribution_matching_loss(
    spec: &ModelSpec,
    params: &ParamVector,
    syn: &SyntheticSet,
    real: &Dataset,
) -> Result<f64> {
    let class_means = real_class_means(spec, params, real, &real.class_indices())?;
    Ok(dm_objective(spec, &params.values, &syn.images, syn.meta.ipc, &class_means, false)?.0)
}

fn real_class_means(
    spec: &ModelSpec,
    params: &ParamVector,
    real: &Dataset,
    by_class: &[Vec<usize>],
) -> Result<Vec<Vec<f64>>> {
    let f = spec.feature_dim();
    by_class
        .iter()
        .map(|idx| {
            if idx.is_empty() {
                return Err(CoreError::invalid("distribution matching", "a class has no real images"));
            }
            let feats = spec.features(params, real.select(idx)?.images())?;
            let mut m = vec![0.0; f];
            for row in feats.data().chunks(f) {
                m.iter_mut().zip(row).for_each(|(s, v)| *s += v);
            }
            m.iter_mut().for_each(|s| *s /= idx.len() as f64);
            Ok(m)
        })
        .collect()
}

/// Objective and (optionally) its pixel gradient for class-major synthetic images.
fn dm_objective(
    spec: &ModelSpec,
    theta: &[f64],
    images: &Tensor,
    ipc: usize,
    real_means: &[Vec<f64>],
    with_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    let g = Graph::new();
    let xs = g.param(images.clone());
    let feats = spec.forward(g.constant(Tensor::vector(theta.to_vec())), xs)?.features;
    let f = spec.feature_dim();
    let mut total = None;
    for (c, rm) in real_means.iter().enumerate() {
        let ms = feats.slice(c * ipc * f, &[ipc, f])?.sum_to(&[1, f])?.scale(1.0 / ipc as f64)?;
        let diff = ms.sub(g.constant(Tensor::new(vec![1, f], rm.clone())?))?;
        let term = diff.dot(diff)?;
        total = Some(match total {
            Some(t) => term.add(t)?,
            None => term,
        });
    }
    let total = total.ok_or_else(|| CoreError::invalid("distribution matching", "no classes"))?;
    if !with_grad {
        return Ok((total.item(), Vec::new()));
    }
    let grad = g.grad(total, &[xs], GradOptions::default())?[0];
    Ok((total.item(), grad.value().data().to_vec()))
}

/// Per outer step: a freshly initialised network embeds the synthetic images
/// and a per-class real batch; pixels descend the summed squared distance of
/// class mean embeddings.
pub fn distill_distribution_matching(
    real: &Dataset,
    cfg: &DistillConfig,
    probe: Option<&Dataset>,
) -> Result<(SyntheticSet, RunLog)> {
    check_method(cfg, Method::DistributionMatching)?;
    let mut set = cfg.initial_set(real)?;
    let mut images = set.images.clone();
    let by_class = real.class_indices();
    let probe = Probe::new(cfg, probe);
    let mut log = RunLog::default();
    for step in 0..cfg.outer_steps {
        let seed = cfg.step_seed(step);
        let params = cfg.spec.init(InitMode::XavierUniform, seed);
        let mut r = rng::seeded(seed, rng::stream::DISTILL);
        let batches: Vec<Vec<usize>> = by_class.iter().map(|idx| sample_from(idx, cfg.real_batch, &mut r)).collect();
        let means = real_class_means(&cfg.spec, &params, real, &batches)?;
        let (objective, grad) = dm_objective(&cfg.spec, &params.values, &images, cfg.ipc, &means, true)
            .map_err(|e| numerical(e, cfg.method, step))?;
        pixel_step(&mut images, &grad, cfg.outer_lr, cfg.method, step)?;
        let probe_accuracy = probe.at(step, &images, &set)?;
        log.rows.push(LogRow { step, objective, probe_accuracy, skipped: 0 });
    }
    set.images = images;
    set.meta.iterations = cfg.outer_steps;
    Ok((set, log))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_embedding_example() {
        assert_eq!(mean_embedding_distance(&[vec![1.0, 0.0]], &[vec![0.0, 0.0]]), 1.0);
        let a = [vec![1.0, 2.0], vec![3.0, 2.0]];
        let b = [vec![2.0, 2.0]];
        assert_eq!(mean_embedding_distance(&a, &b), 0.0);
    }
}
