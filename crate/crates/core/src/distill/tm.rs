use std::path::Path;

use ddlab_autodiff::{GradOptions, Graph, Tensor};
use rand::Rng as _;
use rayon::prelude::*;

use super::bptt::{check_method, numerical};
use super::{pixel_step, unroll, DistillConfig, LogRow, Method, Probe, RunLog};
use crate::data::{Dataset, SyntheticSet};
use crate::error::{CoreError, Result};
use crate::model::{InitMode, ModelSpec};
use crate::rng;
use crate::train::{train, TrainConfig, Trajectory};

/// Denominators below this mark a degenerate expert segment.
const MIN_SEGMENT: f64 = 1e-12;

/// `|theta_hat - target|^2 / |start - target|^2`, or `None` when the expert
/// segment has (numerically) zero length.
pub fn trajectory_matching_loss(theta_hat: &[f64], start: &[f64], target: &[f64]) -> Option<f64> {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let den = sq(start, target);
    (den >= MIN_SEGMENT).then(|| sq(theta_hat, target) / den)
}

/// Trains `count` seeded real-data runs, recording every `cfg.record_every`
/// iterations. Run `i` uses seed `child_seed(cfg.seed, i)` for both
/// initialisation and batching.
pub fn build_expert_buffer(
    real: &Dataset,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    count: usize,
) -> Result<Vec<Trajectory>> {
    (0..count)
        .into_par_iter()
        .map(|i| {
            let seed = rng::child_seed(cfg.seed, i as u64);
            let run = TrainConfig { seed, ..cfg.clone() };
            train(spec, &spec.init(InitMode::XavierUniform, seed), real, &run, None)
        })
        .collect()
}

pub fn save_expert_buffer(spec: &ModelSpec, experts: &[Trajectory], dir: &Path) -> Result<()> {
    for (i, t) in experts.iter().enumerate() {
        t.save(spec, &dir.join(format!("expert_{i:03}")))?;
    }
    Ok(())
}

pub fn load_expert_buffer(spec: &ModelSpec, dir: &Path) -> Result<Vec<Trajectory>> {
    let mut out = Vec::new();
    loop {
        let d = dir.join(format!("expert_{:03}", out.len()));
        if !d.is_dir() {
            break;
        }
        out.push(Trajectory::load(spec, &d)?);
    }
    if out.is_empty() {
        return Err(CoreError::io(dir, std::io::Error::new(std::io::ErrorKind::NotFound, "no expert trajectories")));
    }
    Ok(out)
}

/// Per outer step: start from a random expert checkpoint `theta*_t`, take
/// `inner_steps` differentiable steps on the synthetic set and pull the result
/// towards `theta*_{t+M}` under the normalised squared distance.
pub fn distill_trajectory_matching(
    real: &Dataset,
    experts: &[Trajectory],
    cfg: &DistillConfig,
    probe: Option<&Dataset>,
) -> Result<(SyntheticSet, RunLog)> {
    check_method(cfg, Method::TrajectoryMatching)?;
    let starts: Vec<Vec<usize>> = experts
        .iter()
        .map(|t| {
            t.records
                .iter()
                .filter(|r| r.iteration <= cfg.max_start && t.at(r.iteration + cfg.expert_steps).is_some())
                .map(|r| r.iteration)
                .collect()
        })
        .collect();
    if starts.iter().all(Vec::is_empty) {
        return Err(CoreError::invalid(
            "trajectory matching",
            format!("no expert has checkpoints t <= {} with t + {} recorded", cfg.max_start, cfg.expert_steps),
        ));
    }
    let usable: Vec<usize> = (0..experts.len()).filter(|&i| !starts[i].is_empty()).collect();
    let mut set = cfg.initial_set(real)?;
    let mut images = set.images.clone();
    let mut lr = cfg.inner_lr;
    let probe = Probe::new(cfg, probe);
    let mut log = RunLog::default();
    for step in 0..cfg.outer_steps {
        let mut r = rng::seeded(cfg.step_seed(step), rng::stream::DISTILL);
        let e = usable[r.random_range(0..usable.len())];
        let t = starts[e][r.random_range(0..starts[e].len())];
        let start = &experts[e].at(t).expect("start recorded").params.values;
        let target = &experts[e].at(t + cfg.expert_steps).expect("target recorded").params.values;
        let Some(_) = trajectory_matching_loss(start, start, target) else {
            log::warn!("trajectory matching step {step}: expert {e} segment at t={t} has zero length; skipped");
            log.rows.push(LogRow { step, objective: f64::NAN, probe_accuracy: None, skipped: 1 });
            continue;
        };
        let (objective, grad, glr) =
            tm_objective(&cfg.spec, start, target, &images, set.labels(), lr, cfg.inner_steps, cfg.learn_lr)
                .map_err(|e| numerical(e, cfg.method, step))?;
        pixel_step(&mut images, &grad, cfg.outer_lr, cfg.method, step)?;
        if let Some(glr) = glr {
            if !glr.is_finite() {
                return Err(CoreError::MetaGradientNaN { method: cfg.method.name(), step });
            }
            lr -= cfg.lr_lr * glr;
        }
        let probe_accuracy = probe.at(step, &images, &set)?;
        log.rows.push(LogRow { step, objective, probe_accuracy, skipped: 0 });
    }
    set.images = images;
    set.meta.iterations = cfg.outer_steps;
    if cfg.learn_lr {
        set.meta.learned_lr = Some(lr);
    }
    Ok((set, log))
}

#[allow(clippy::too_many_arguments)]
fn tm_objective(
    spec: &ModelSpec,
    start: &[f64],
    target: &[f64],
    images: &Tensor,
    labels: &[usize],
    lr: f64,
    steps: usize,
    learn_lr: bool,
) -> Result<(f64, Vec<f64>, Option<f64>)> {
    let g = Graph::new();
    let xs = g.param(images.clone());
    let lr_var = if learn_lr { g.param(Tensor::scalar(lr)) } else { g.constant(Tensor::scalar(lr)) };
    let theta = g.param(Tensor::vector(start.to_vec()));
    let theta_n = unroll(&g, spec, theta, xs, labels, lr_var, steps)?;
    let den: f64 = start.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum();
    let diff = theta_n.sub(g.constant(Tensor::vector(target.to_vec())))?;
    let loss = diff.dot(diff)?.scale(1.0 / den)?;
    let opts = GradOptions { create_graph: false, allow_unused: true };
    let wrt = if learn_lr { vec![xs, lr_var] } else { vec![xs] };
    let grads = g.grad(loss, &wrt, opts)?;
    let glr = learn_lr.then(|| grads[1].item());
    Ok((loss.item(), grads[0].value().data().to_vec(), glr))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loss_examples() {
        let start = [1.0, 2.0, 3.0];
        let target = [2.0, 2.0, 1.0];
        assert_eq!(trajectory_matching_loss(&target, &start, &target), Some(0.0));
        assert_eq!(trajectory_matching_loss(&start, &start, &target), Some(1.0));
        // |(1.5, 2, 2) - target|^2 = 0.25 + 0 + 1; |start - target|^2 = 1 + 0 + 4
        assert_eq!(trajectory_matching_loss(&[1.5, 2.0, 2.0], &start, &target), Some(1.25 / 5.0));
        assert_eq!(trajectory_matching_loss(&start, &start, &start), None);
    }
}
