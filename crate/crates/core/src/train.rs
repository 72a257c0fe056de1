//! Deterministic SGD-with-momentum training, trajectories and evaluation.

use std::fmt::Write as _;
use std::path::Path;

use ddlab_autodiff::{Graph, Tensor};
use rand::seq::SliceRandom;
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{CoreError, Result};
use crate::model::{InitMode, ModelSpec, ParamVector};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Batch {
    Full,
    Size(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub iterations: usize,
    pub batch: Batch,
    pub seed: u64,
    /// Snapshot stride; the final iteration is always recorded.
    pub record_every: usize,
    /// Rescale the gradient to at most this L2 norm.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            iterations: 300,
            batch: Batch::Size(64),
            seed: 0,
            record_every: 10,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    /// Full-batch configuration used for small (distilled) training sets.
    pub fn full_batch(iterations: usize, seed: u64) -> Self {
        TrainConfig { iterations, batch: Batch::Full, seed, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CoreError::invalid("train config", msg));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be finite and non-negative", self.lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} outside [0, 1)", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight decay {} is negative", self.weight_decay));
        }
        if self.record_every == 0 {
            return bad("record_every must be positive".into());
        }
        if self.batch == Batch::Size(0) {
            return bad("batch size must be positive".into());
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad(format!("gradient clip {c} must be positive"));
            }
        }
        Ok(())
    }

    pub fn canonical(&self) -> String {
        format!(
            "lr={:e};momentum={:e};weight_decay={:e};iterations={};batch={:?};seed={};record_every={};grad_clip={:?}",
            self.lr,
            self.momentum,
            self.weight_decay,
            self.iterations,
            self.batch,
            self.seed,
            self.record_every,
            self.grad_clip
        )
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.canonical().as_bytes()).into()
    }
}

/// Parameter update rule.
pub trait Optimizer {
    fn step(&mut self, theta: &mut [f64], grad: &[f64]);
}

/// Classical momentum: `v <- m v + g`, `theta <- theta - lr v`, with the L2
/// weight-decay term added to `g`.
#[derive(Clone, Debug)]
pub struct MomentumSgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<f64>,
}

impl MomentumSgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64, dim: usize) -> Self {
        MomentumSgd { lr, momentum, weight_decay, velocity: vec![0.0; dim] }
    }
}

impl Optimizer for MomentumSgd {
    fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        for ((t, v), g) in theta.iter_mut().zip(&mut self.velocity).zip(grad) {
            *v = self.momentum * *v + g + self.weight_decay * *t;
            *t -= self.lr * *v;
        }
    }
}

/// Mean cross-entropy of a batch and its gradient w.r.t. the flat parameters.
pub fn loss_and_grad(spec: &ModelSpec, theta: &[f64], images: &Tensor, labels: &[usize]) -> Result<(f64, Vec<f64>)> {
    let g = Graph::new();
    let p = g.param(Tensor::vector(theta.to_vec()));
    let x = g.constant(images.clone());
    let loss = spec.forward(p, x)?.logits.cross_entropy(labels)?.mean()?;
    let grads = g.backward(loss)?;
    let grad = grads.get(p).expect("parameters are connected").data().to_vec();
    Ok((loss.item(), grad))
}

pub(crate) fn clip_norm(grad: &mut [f64], max_norm: f64) {
    let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grad.iter_mut().for_each(|v| *v *= s);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub iteration: usize,
    /// Mean cross-entropy of the batch drawn for this iteration.
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub params: ParamVector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub records: Vec<Record>,
    pub config_digest: [u8; 32],
    pub data_digest: [u8; 32],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    pub params: ParamVector,
    pub config_digest: [u8; 32],
    pub data_digest: [u8; 32],
    pub iteration: usize,
    pub accuracy: Option<f64>,
}

impl Trajectory {
    pub fn final_params(&self) -> &ParamVector {
        &self.records.last().expect("trajectory has a record").params
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.records.last().and_then(|r| r.accuracy)
    }

    pub fn at(&self, iteration: usize) -> Option<&Record> {
        self.records.binary_search_by_key(&iteration, |r| r.iteration).ok().map(|i| &self.records[i])
    }

    pub fn iterations(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.iteration).collect()
    }

    pub fn snapshot(&self, index: usize) -> Snapshot {
        let r = &self.records[index];
        Snapshot {
            params: r.params.clone(),
            config_digest: self.config_digest,
            data_digest: self.data_digest,
            iteration: r.iteration,
            accuracy: r.accuracy,
        }
    }

    /// Writes `manifest.csv`, `meta.txt` and one parameter file per record.
    pub fn save(&self, spec: &ModelSpec, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))?;
        let mut manifest = String::from("iteration,loss,accuracy,snapshot,sha256\n");
        for r in &self.records {
            let file = format!("iter_{:06}.ddlp", r.iteration);
            r.params.save(spec, &dir.join(&file))?;
            let acc = r.accuracy.map_or(String::new(), |a| format!("{a:?}"));
            let _ =
                writeln!(manifest, "{},{:?},{},{},{}", r.iteration, r.loss, acc, file, hex::encode(r.params.sha256()));
        }
        let meta = format!(
            "spec={}\nconfig_digest={}\ndata_digest={}\n",
            spec.canonical(),
            hex::encode(self.config_digest),
            hex::encode(self.data_digest)
        );
        write(&dir.join("meta.txt"), meta.as_bytes())?;
        write(&dir.join("manifest.csv"), manifest.as_bytes())
    }

    /// Loads a saved trajectory, verifying every snapshot digest.
    pub fn load(spec: &ModelSpec, dir: &Path) -> Result<Self> {
        let what = "trajectory";
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read_to_string(&p).map_err(|e| CoreError::io(p, e))
        };
        let meta = read("meta.txt")?;
        let field = |key: &str| -> Result<[u8; 32]> {
            let line = meta
                .lines()
                .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
                .ok_or_else(|| CoreError::format(what, format!("meta.txt lacks {key}")))?;
            let bytes = hex::decode(line).map_err(|_| CoreError::format(what, format!("bad {key}")))?;
            bytes.try_into().map_err(|_| CoreError::format(what, format!("bad {key}")))
        };
        let config_digest = field("config_digest")?;
        let data_digest = field("data_digest")?;
        let manifest = read("manifest.csv")?;
        let mut records = Vec::new();
        for line in manifest.lines().skip(1).filter(|l| !l.is_empty()) {
            let bad = || CoreError::format(what, format!("manifest line {line:?}"));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad());
            }
            let iteration: usize = f[0].parse().map_err(|_| bad())?;
            let loss: f64 = f[1].parse().map_err(|_| bad())?;
            let accuracy = if f[2].is_empty() { None } else { Some(f[2].parse().map_err(|_| bad())?) };
            let params = ParamVector::load(spec, &dir.join(f[3]))?;
            if hex::encode(params.sha256()) != f[4] {
                return Err(CoreError::format(what, format!("snapshot {} fails its digest", f[3])));
            }
            if records.last().is_some_and(|r: &Record| r.iteration >= iteration) {
                return Err(CoreError::format(what, "iterations not strictly increasing"));
            }
            records.push(Record { iteration, loss, accuracy, params });
        }
        if records.is_empty() {
            return Err(CoreError::format(what, "no records"));
        }
        Ok(Trajectory { records, config_digest, data_digest })
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

/// Trains `spec` from `init` on `data` with momentum SGD. When `eval` is
/// given, its accuracy is stored with every record.
pub fn train(
    spec: &ModelSpec,
    init: &ParamVector,
    data: &Dataset,
    cfg: &TrainConfig,
    eval: Option<&Dataset>,
) -> Result<Trajectory> {
    let opt = MomentumSgd::new(cfg.lr, cfg.momentum, cfg.weight_decay, init.len());
    train_with(spec, init, data, cfg, eval, opt)
}

/// [`train`] with an arbitrary update rule; `cfg.lr`, `momentum` and
/// `weight_decay` are left to the optimizer.
pub fn train_with(
    spec: &ModelSpec,
    init: &ParamVector,
    data: &Dataset,
    cfg: &TrainConfig,
    eval: Option<&Dataset>,
    mut opt: impl Optimizer,
) -> Result<Trajectory> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(CoreError::invalid("train", "empty training set"));
    }
    if init.len() != spec.num_params() {
        return Err(CoreError::invalid("train", "initial parameters do not match the model spec"));
    }
    let mut batches = Batcher::new(data, cfg);
    let mut theta = init.values.clone();
    let mut records = Vec::new();
    let mut last_valid = 0;
    for it in 0..=cfg.iterations {
        let (images, labels) = batches.next();
        let diverged = || CoreError::Diverged { iteration: it, last_valid };
        let (loss, mut grad) = match loss_and_grad(spec, &theta, &images, &labels) {
            Ok(v) => v,
            Err(e) if e.is_numerical() => return Err(diverged()),
            Err(e) => return Err(e),
        };
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(diverged());
        }
        last_valid = it;
        if it % cfg.record_every == 0 || it == cfg.iterations {
            let params = init.with_values(theta.clone());
            let accuracy = match eval {
                Some(ev) => Some(evaluate(spec, &params, ev)?.accuracy),
                None => None,
            };
            records.push(Record { iteration: it, loss, accuracy, params });
        }
        if it == cfg.iterations {
            break;
        }
        if let Some(c) = cfg.grad_clip {
            clip_norm(&mut grad, c);
        }
        opt.step(&mut theta, &grad);
    }
    Ok(Trajectory { records, config_digest: cfg.digest(), data_digest: data.digest() })
}

/// Yields the full set, or seeded reshuffled mini-batches epoch by epoch.
struct Batcher<'a> {
    data: &'a Dataset,
    size: Option<usize>,
    order: Vec<usize>,
    pos: usize,
    rng: rng::Rng,
}

impl<'a> Batcher<'a> {
    fn new(data: &'a Dataset, cfg: &TrainConfig) -> Self {
        let size = match cfg.batch {
            Batch::Size(k) if k < data.len() => Some(k),
            _ => None,
        };
        Batcher {
            data,
            size,
            order: (0..data.len()).collect(),
            pos: data.len(),
            rng: rng::seeded(cfg.seed, rng::stream::BATCHES),
        }
    }

    fn next(&mut self) -> (Tensor, Vec<usize>) {
        let Some(k) = self.size else {
            return (self.data.images().clone(), self.data.labels().to_vec());
        };
        if self.pos + k > self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        let idx = &self.order[self.pos..self.pos + k];
        self.pos += k;
        let sel = self.data.select(idx).expect("batch indices in range");
        (sel.images().clone(), sel.labels().to_vec())
    }
}

/// Trains on a seeded class-stratified `fraction` of `data`, initialised from
/// `cfg.seed`. Returns the trajectory and the selected indices (in data order).
pub fn train_subset(
    spec: &ModelSpec,
    data: &Dataset,
    fraction: f64,
    cfg: &TrainConfig,
    eval: Option<&Dataset>,
) -> Result<(Trajectory, Vec<usize>)> {
    let idx = subset_indices(data, fraction, cfg.seed)?;
    let subset = if idx.len() == data.len() { data.clone() } else { data.select(&idx)? };
    let init = spec.init(InitMode::XavierUniform, cfg.seed);
    Ok((train(spec, &init, &subset, cfg, eval)?, idx))
}

/// Seeded class-stratified sample holding `round(fraction * n_c)` examples of
/// each class, returned sorted.
pub fn subset_indices(data: &Dataset, fraction: f64, seed: u64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CoreError::invalid("subset", format!("fraction {fraction} outside (0, 1]")));
    }
    let mut r = rng::seeded(seed, rng::stream::SUBSET);
    let mut out = Vec::new();
    for (c, idx) in data.class_indices().into_iter().enumerate() {
        let k = (fraction * idx.len() as f64).round() as usize;
        if k == 0 {
            return Err(CoreError::invalid("subset", format!("fraction {fraction} leaves class {c} empty")));
        }
        let mut idx = idx;
        idx.shuffle(&mut r);
        out.extend_from_slice(&idx[..k]);
    }
    out.sort_unstable();
    Ok(out)
}

/// Record whose accuracy is closest to `target`; ties go to the earliest.
pub fn early_stop_select(traj: &Trajectory, target: f64) -> Result<Snapshot> {
    let mut best: Option<(usize, f64)> = None;
    for (i, r) in traj.records.iter().enumerate() {
        let acc = r
            .accuracy
            .ok_or_else(|| CoreError::invalid("early stop", format!("iteration {} has no accuracy", r.iteration)))?;
        let gap = (acc - target).abs();
        if best.is_none_or(|(_, g)| gap < g) {
            best = Some((i, gap));
        }
    }
    let (i, _) = best.ok_or_else(|| CoreError::invalid("early stop", "empty trajectory"))?;
    Ok(traj.snapshot(i))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub losses: Vec<f64>,
    pub predictions: Vec<usize>,
}

impl Evaluation {
    pub fn mean_loss(&self) -> f64 {
        self.losses.iter().sum::<f64>() / self.losses.len() as f64
    }
}

pub fn evaluate(spec: &ModelSpec, params: &ParamVector, data: &Dataset) -> Result<Evaluation> {
    let logits = spec.logits(params, data.images())?;
    Ok(score_logits(&logits, data.labels()))
}

/// Argmax predictions (first maximum wins), accuracy and per-example
/// cross-entropy from a logits table.
pub fn score_logits(logits: &Tensor, labels: &[usize]) -> Evaluation {
    let k = logits.shape()[1];
    let mut losses = Vec::with_capacity(labels.len());
    let mut predictions = Vec::with_capacity(labels.len());
    let mut correct = 0;
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        let (arg, max) =
            row.iter().enumerate().fold((0, f64::NEG_INFINITY), |b, (j, &v)| if v > b.1 { (j, v) } else { b });
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        losses.push(lse - row[y]);
        predictions.push(arg);
        correct += (arg == y) as usize;
    }
    Evaluation { accuracy: correct as f64 / labels.len() as f64, losses, predictions }
}
