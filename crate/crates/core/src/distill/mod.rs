//! The four distillation methods. Each turns a real [`Dataset`] into a
//! [`SyntheticSet`] by gradient descent on the synthetic pixels.

mod bptt;
mod dm;
mod gm;
mod tm;

use std::fmt::Write as _;

use ddlab_autodiff::{GradOptions, Graph, Tensor, Var};
use rand::seq::index;

use crate::data::{Dataset, SyntheticInit, SyntheticSet};
use crate::error::{CoreError, Result};
use crate::model::ModelSpec;
use crate::rng;
use crate::train::{evaluate, train, TrainConfig, Trajectory};

pub use bptt::{bptt_meta_gradient, distill_bptt};
pub use dm::{distill_distribution_matching, distribution_matching_loss, mean_embedding_distance};
pub use gm::{distill_gradient_matching, layer_cosine_distance, GradientDistance};
pub use tm::{
    build_expert_buffer, distill_trajectory_matching, load_expert_buffer, save_expert_buffer, trajectory_matching_loss,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Method {
    Bptt,
    DistributionMatching,
    GradientMatching,
    TrajectoryMatching,
}

impl Method {
    pub const ALL: [Method; 4] =
        [Method::Bptt, Method::DistributionMatching, Method::GradientMatching, Method::TrajectoryMatching];

    pub fn name(self) -> &'static str {
        match self {
            Method::Bptt => "bptt",
            Method::DistributionMatching => "distribution_matching",
            Method::GradientMatching => "gradient_matching",
            Method::TrajectoryMatching => "trajectory_matching",
        }
    }

    pub fn parse(s: &str) -> Option<Method> {
        Method::ALL.into_iter().find(|m| m.name() == s)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub method: Method,
    pub spec: ModelSpec,
    pub ipc: usize,
    pub outer_lr: f64,
    pub outer_steps: usize,
    pub init: SyntheticInit,
    pub seed: u64,
    /// Real images per outer step: in total for BPTT, per class for the
    /// matching methods.
    pub real_batch: usize,
    /// Differentiable inner steps (BPTT N, trajectory matching N).
    pub inner_steps: usize,
    pub inner_lr: f64,
    /// Learn the inner learning rate (trajectory matching).
    pub learn_lr: bool,
    pub lr_lr: f64,
    /// Expert iterations matched (trajectory matching M).
    pub expert_steps: usize,
    /// Latest expert start iteration t.
    pub max_start: usize,
    /// Gradient matching: outer steps between network re-initialisations.
    pub resample_every: usize,
    /// Gradient matching: synthetic-data training steps on the network after each outer step.
    pub network_steps: usize,
    /// Train-and-evaluate probe every this many outer steps (0 disables).
    pub probe_every: usize,
    pub probe_iterations: usize,
}

impl DistillConfig {
    pub fn new(method: Method, spec: ModelSpec) -> Self {
        let mut cfg = DistillConfig {
            method,
            spec,
            ipc: 1,
            outer_lr: 0.1,
            outer_steps: 200,
            init: SyntheticInit::RealImages,
            seed: 0,
            real_batch: 64,
            inner_steps: 30,
            inner_lr: 0.01,
            learn_lr: false,
            lr_lr: 1e-5,
            expert_steps: 20,
            max_start: 100,
            resample_every: 10,
            network_steps: 5,
            probe_every: 0,
            probe_iterations: 300,
        };
        match method {
            Method::Bptt => {}
            Method::DistributionMatching => cfg.outer_lr = 1.0,
            Method::GradientMatching => cfg.real_batch = 32,
            Method::TrajectoryMatching => cfg.inner_steps = 10,
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CoreError::invalid("distill config", msg));
        self.spec.validate()?;
        if self.ipc == 0 {
            return bad("ipc must be at least 1".into());
        }
        if !(self.outer_lr > 0.0 && self.outer_lr.is_finite()) {
            return bad(format!("outer_lr {} must be positive", self.outer_lr));
        }
        if self.real_batch == 0 && self.method != Method::TrajectoryMatching {
            return bad("real_batch must be positive".into());
        }
        match self.method {
            Method::Bptt | Method::TrajectoryMatching if self.inner_steps == 0 => {
                return bad("inner_steps must be positive".into());
            }
            Method::TrajectoryMatching if self.expert_steps == 0 => {
                return bad("expert_steps must be positive".into());
            }
            Method::GradientMatching if self.resample_every == 0 => {
                return bad("resample_every must be positive".into());
            }
            _ => {}
        }
        if !(self.inner_lr >= 0.0) {
            return bad(format!("inner_lr {} is negative", self.inner_lr));
        }
        Ok(())
    }

    fn initial_set(&self, real: &Dataset) -> Result<SyntheticSet> {
        SyntheticSet::initialize(real, self.ipc, self.init, self.method.name(), self.seed)
    }

    /// Independent seed for outer step `step`.
    fn step_seed(&self, step: usize) -> u64 {
        rng::child_seed(self.seed, step as u64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub objective: f64,
    pub probe_accuracy: Option<f64>,
    /// Terms dropped this step (zero-norm layers, degenerate expert segments).
    pub skipped: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub rows: Vec<LogRow>,
}

impl RunLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,objective,probe_accuracy,skipped\n");
        for r in &self.rows {
            let p = r.probe_accuracy.map_or(String::new(), |a| format!("{a:?}"));
            let _ = writeln!(s, "{},{:?},{},{}", r.step, r.objective, p, r.skipped);
        }
        s
    }
}

/// Runs the configured method. Trajectory matching needs `experts`; `probe`
/// is the held-out set used for probe accuracies.
pub fn distill(
    real: &Dataset,
    cfg: &DistillConfig,
    experts: Option<&[Trajectory]>,
    probe: Option<&Dataset>,
) -> Result<(SyntheticSet, RunLog)> {
    match cfg.method {
        Method::Bptt => distill_bptt(real, cfg, probe),
        Method::DistributionMatching => distill_distribution_matching(real, cfg, probe),
        Method::GradientMatching => distill_gradient_matching(real, cfg, probe),
        Method::TrajectoryMatching => {
            let experts = experts.ok_or_else(|| CoreError::invalid("trajectory matching", "no expert trajectories"))?;
            distill_trajectory_matching(real, experts, cfg, probe)
        }
    }
}

/// Standard evaluation: train a fresh network on `data` with full-batch
/// momentum SGD and report accuracy on `test`.
pub fn train_and_evaluate(
    spec: &ModelSpec,
    data: &Dataset,
    test: &Dataset,
    iterations: usize,
    seed: u64,
) -> Result<f64> {
    let init = spec.init(crate::model::InitMode::XavierUniform, seed);
    let traj = train(spec, &init, data, &TrainConfig::full_batch(iterations, seed), None)?;
    Ok(evaluate(spec, traj.final_params(), test)?.accuracy)
}

pub(crate) struct Probe<'a> {
    cfg: &'a DistillConfig,
    data: Option<&'a Dataset>,
}

impl<'a> Probe<'a> {
    pub(crate) fn new(cfg: &'a DistillConfig, data: Option<&'a Dataset>) -> Self {
        Probe { cfg, data }
    }

    /// Probe accuracy at `step` when one is due.
    pub(crate) fn at(&self, step: usize, images: &Tensor, template: &SyntheticSet) -> Result<Option<f64>> {
        let (Some(data), true) = (self.data, self.cfg.probe_every > 0) else { return Ok(None) };
        if !step.is_multiple_of(self.cfg.probe_every) && step + 1 != self.cfg.outer_steps {
            return Ok(None);
        }
        let set = template.with_images(images.clone())?.as_dataset();
        train_and_evaluate(&self.cfg.spec, &set, data, self.cfg.probe_iterations, self.cfg.seed).map(Some)
    }
}

/// Seeded sample of `k` indices from `pool` (all of it when `k` is larger).
pub(crate) fn sample_from(pool: &[usize], k: usize, r: &mut rng::Rng) -> Vec<usize> {
    if k >= pool.len() {
        return pool.to_vec();
    }
    let mut idx: Vec<usize> = index::sample(r, pool.len(), k).into_iter().map(|i| pool[i]).collect();
    idx.sort_unstable();
    idx
}

/// Plain gradient step on the pixels; fails on a non-finite meta-gradient.
pub(crate) fn pixel_step(images: &mut Tensor, grad: &[f64], lr: f64, method: Method, step: usize) -> Result<()> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(CoreError::MetaGradientNaN { method: method.name(), step });
    }
    for (p, g) in images.data_mut().iter_mut().zip(grad) {
        *p -= lr * g;
    }
    Ok(())
}

/// Mean cross-entropy of the model at `theta` on `x`.
pub(crate) fn mean_loss<'g>(spec: &ModelSpec, theta: Var<'g>, x: Var<'g>, labels: &[usize]) -> Result<Var<'g>> {
    Ok(spec.forward(theta, x)?.logits.cross_entropy(labels)?.mean()?)
}

/// `k` differentiable SGD steps `theta <- theta - lr * grad` on `(x, labels)`.
pub(crate) fn unroll<'g>(
    g: &'g Graph,
    spec: &ModelSpec,
    mut theta: Var<'g>,
    x: Var<'g>,
    labels: &[usize],
    lr: Var<'g>,
    k: usize,
) -> Result<Var<'g>> {
    let p = theta.numel();
    for _ in 0..k {
        let loss = mean_loss(spec, theta, x, labels)?;
        let grad = g.grad(loss, &[theta], GradOptions::create_graph())?[0];
        theta = theta.sub(grad.mul(lr.expand(&[p])?)?)?;
    }
    Ok(theta)
}

pub(crate) fn images_of(data: &Dataset, idx: &[usize]) -> Result<(Tensor, Vec<usize>)> {
    let sel = data.select(idx)?;
    Ok((sel.images().clone(), sel.labels().to_vec()))
}
