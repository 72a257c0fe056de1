//! Behavioural comparisons between models trained on distilled data and
//! models trained on real data.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;
use rayon::prelude::*;

use crate::data::{clip_to_unit, mix, Dataset, SyntheticSet};
use crate::error::{CoreError, Result};
use crate::model::{InitMode, ModelSpec, ParamVector};
use crate::rng;
use crate::stats;
use crate::train::{evaluate, subset_indices, train, train_with, Batch, Optimizer, TrainConfig, Trajectory};

pub fn agreement_count(a: &[usize], b: &[usize]) -> Result<usize> {
    if a.len() != b.len() {
        return Err(CoreError::invalid("agreement", format!("prediction lengths {} and {} differ", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).filter(|(x, y)| x == y).count())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Pool {
    Distilled,
    Subset,
    EarlyStop,
    WeightDecay,
}

impl Pool {
    pub fn name(self) -> &'static str {
        match self {
            Pool::Distilled => "distilled",
            Pool::Subset => "subset",
            Pool::EarlyStop => "early_stop",
            Pool::WeightDecay => "weight_decay",
        }
    }
}

/// A trained model reduced to what the agreement analysis needs.
#[derive(Clone, Debug, PartialEq)]
pub struct PoolMember {
    pub id: usize,
    pub pool: Pool,
    pub accuracy: f64,
    pub predictions: Vec<usize>,
    /// How the member was made, e.g. `fraction=0.0123`.
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoolConfig {
    /// Recipe for full-data and weight-decay models.
    pub train: TrainConfig,
    pub subset_models: usize,
    pub subset_fraction: (f64, f64),
    /// Subset models train full batch for this many iterations; tiny subsets
    /// reach a flat training loss well within it.
    pub subset_iterations: usize,
    pub early_stop_runs: usize,
    pub early_stop_every: usize,
    pub weight_decay_models: usize,
    pub weight_decay: (f64, f64),
    /// Weight-decay models train this many passes over the real data.
    pub weight_decay_epochs: usize,
    pub seed: u64,
}

impl Default for PoolConfig {
    fn default() -> Self {
        PoolConfig {
            train: TrainConfig::default(),
            subset_models: 120,
            subset_fraction: (0.005, 0.05),
            subset_iterations: 300,
            early_stop_runs: 4,
            early_stop_every: 5,
            weight_decay_models: 40,
            weight_decay: (0.05, 0.13),
            weight_decay_epochs: 20,
            seed: 0,
        }
    }
}

fn member(spec: &ModelSpec, params: &ParamVector, test: &Dataset, pool: Pool, detail: String) -> Result<PoolMember> {
    let ev = evaluate(spec, params, test)?;
    Ok(PoolMember { id: 0, pool, accuracy: ev.accuracy, predictions: ev.predictions, detail })
}

/// Subset, early-stop and weight-decay pools evaluated on `test`. Members are
/// numbered in pool order.
pub fn build_pools(spec: &ModelSpec, real: &Dataset, test: &Dataset, cfg: &PoolConfig) -> Result<Vec<PoolMember>> {
    let (lo, hi) = cfg.subset_fraction;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(CoreError::invalid(
            "pools",
            format!("subset fractions ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"),
        ));
    }
    if cfg.early_stop_every == 0 {
        return Err(CoreError::invalid("pools", "early_stop_every must be positive"));
    }
    let mut draw = rng::seeded(cfg.seed, rng::stream::POOLS);
    let fractions: Vec<f64> = (0..cfg.subset_models).map(|_| draw.random_range(lo..=hi)).collect();
    let decays: Vec<f64> =
        (0..cfg.weight_decay_models).map(|_| draw.random_range(cfg.weight_decay.0..=cfg.weight_decay.1)).collect();

    let subset: Vec<PoolMember> = fractions
        .par_iter()
        .enumerate()
        .map(|(i, &f)| {
            let seed = rng::child_seed(cfg.seed, i as u64);
            let idx = subset_indices(real, f, seed)?;
            let tc = TrainConfig {
                iterations: cfg.subset_iterations,
                batch: Batch::Full,
                seed,
                record_every: cfg.subset_iterations.max(1),
                ..cfg.train.clone()
            };
            let init = spec.init(InitMode::XavierUniform, seed);
            let traj = train(spec, &init, &real.select(&idx)?, &tc, None)?;
            member(spec, traj.final_params(), test, Pool::Subset, format!("fraction={f:.6};size={}", idx.len()))
        })
        .collect::<Result<_>>()?;

    let early: Vec<Vec<PoolMember>> = (0..cfg.early_stop_runs)
        .into_par_iter()
        .map(|r| {
            let seed = rng::child_seed(cfg.seed ^ 0x5EED, r as u64);
            let tc = TrainConfig { seed, record_every: cfg.early_stop_every, ..cfg.train.clone() };
            let traj = train(spec, &spec.init(InitMode::XavierUniform, seed), real, &tc, None)?;
            traj.records
                .iter()
                .map(|rec| {
                    member(spec, &rec.params, test, Pool::EarlyStop, format!("run={r};iteration={}", rec.iteration))
                })
                .collect()
        })
        .collect::<Result<_>>()?;

    let batch = match cfg.train.batch {
        Batch::Size(k) if k < real.len() => k,
        _ => real.len(),
    };
    let decay_iterations = cfg.weight_decay_epochs * real.len().div_ceil(batch);
    let decay: Vec<PoolMember> = decays
        .par_iter()
        .enumerate()
        .map(|(i, &wd)| {
            let seed = rng::child_seed(cfg.seed ^ 0xDECA, i as u64);
            let tc = TrainConfig {
                seed,
                weight_decay: wd,
                iterations: decay_iterations,
                record_every: decay_iterations.max(1),
                ..cfg.train.clone()
            };
            let traj = train(spec, &spec.init(InitMode::XavierUniform, seed), real, &tc, None)?;
            member(spec, traj.final_params(), test, Pool::WeightDecay, format!("weight_decay={wd:.6}"))
        })
        .collect::<Result<_>>()?;

    let mut all: Vec<PoolMember> = subset.into_iter().chain(early.into_iter().flatten()).chain(decay).collect();
    for (i, m) in all.iter_mut().enumerate() {
        m.id = i;
    }
    Ok(all)
}

/// Members of `pool` whose accuracy lies within `window` of `target`.
pub fn accuracy_filter(members: &[PoolMember], pool: Pool, target: f64, window: f64) -> Vec<&PoolMember> {
    members.iter().filter(|m| m.pool == pool && (m.accuracy - target).abs() <= window + 1e-12).collect()
}

/// One row of the agreement CSV.
#[derive(Clone, Debug, PartialEq)]
pub struct AgreementRecord {
    pub model_id: usize,
    pub pool: Pool,
    pub accuracy: f64,
    pub agreement: usize,
}

pub fn agreements_csv(rows: &[AgreementRecord]) -> String {
    let mut s = String::from("model_id,pool,accuracy,agreement\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{:?},{}", r.model_id, r.pool.name(), r.accuracy, r.agreement);
    }
    s
}

/// Agreement of `reference` with every member that passes the accuracy filter.
pub fn agreement_records(reference: &[usize], members: &[&PoolMember]) -> Result<Vec<AgreementRecord>> {
    members
        .iter()
        .map(|m| {
            Ok(AgreementRecord {
                model_id: m.id,
                pool: m.pool,
                accuracy: m.accuracy,
                agreement: agreement_count(reference, &m.predictions)?,
            })
        })
        .collect()
}

/// For each member, fit a Normal to its agreements with the other members and
/// return the lower-tail probability of the distilled model's agreement with
/// it. Members whose fit is degenerate yield `None`.
pub fn agreement_probability(pool: &[&[usize]], distilled: &[usize]) -> Result<Vec<Option<f64>>> {
    if pool.len() < 3 {
        return Err(CoreError::invalid("agreement probability", "pool needs at least three members"));
    }
    (0..pool.len())
        .map(|i| {
            let others = (0..pool.len())
                .filter(|&j| j != i)
                .map(|j| agreement_count(pool[i], pool[j]).map(|a| a as f64))
                .collect::<Result<Vec<f64>>>()?;
            let observed = agreement_count(distilled, pool[i])? as f64;
            Ok(normal_tail(&others, observed))
        })
        .collect()
}

/// `Phi(observed)` under a Normal fitted to `samples`; `None` for zero spread.
pub fn normal_tail(samples: &[f64], observed: f64) -> Option<f64> {
    let sigma = stats::sample_std(samples);
    if !(sigma > 0.0) {
        log::warn!("degenerate agreement fit (zero spread); member skipped");
        return None;
    }
    stats::normal_cdf(observed, stats::mean(samples), sigma).ok()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
}

/// One-sample Kolmogorov-Smirnov test against the Normal with the sample mean
/// and standard deviation. The p-value uses the asymptotic Kolmogorov law,
/// which ignores that the parameters were estimated from the same data.
pub fn ks_normality(samples: &[f64]) -> Result<KsResult> {
    if samples.len() < 5 {
        return Err(CoreError::invalid("ks test", "need at least five samples"));
    }
    let sigma = stats::sample_std(samples);
    if !(sigma > 0.0) {
        return Err(CoreError::ZeroVariance("ks test"));
    }
    let mu = stats::mean(samples);
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in sorted.iter().enumerate() {
        let f = stats::normal_cdf(x, mu, sigma)?;
        d = d.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }
    Ok(KsResult { statistic: d, p_value: kolmogorov_survival(n.sqrt() * d) })
}

/// `P(K > x)` for the Kolmogorov distribution.
pub fn kolmogorov_survival(x: f64) -> f64 {
    if x <= 0.0 {
        return 1.0;
    }
    if x < 1.0 {
        // theta-function form converges fast for small x
        let c = std::f64::consts::PI.powi(2) / (8.0 * x * x);
        let s: f64 = (1..=50).map(|k| (-((2 * k - 1) as f64).powi(2) * c).exp()).sum();
        return (1.0 - (2.0 * std::f64::consts::PI).sqrt() / x * s).clamp(0.0, 1.0);
    }
    let s: f64 = (1..=100)
        .map(|k| {
            let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
            sign * (-2.0 * (k * k) as f64 * x * x).exp()
        })
        .sum();
    (2.0 * s).clamp(0.0, 1.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixCurvePoint {
    pub method: String,
    pub k: usize,
    pub mean: f64,
    pub std: f64,
    pub baseline: bool,
}

pub fn mix_curve_csv(points: &[MixCurvePoint]) -> String {
    let mut s = String::from("method,k,mean,std,baseline\n");
    for p in points {
        let _ = writeln!(s, "{},{},{:?},{:?},{}", p.method, p.k, p.mean, p.std, u8::from(p.baseline));
    }
    s
}

fn accuracy_over_seeds(
    spec: &ModelSpec,
    test: &Dataset,
    seeds: &[u64],
    cfg: &TrainConfig,
    data_for: impl Fn(u64) -> Result<Dataset> + Sync,
) -> Result<(f64, f64)> {
    let accs = seeds
        .par_iter()
        .map(|&s| {
            let data = data_for(s)?;
            let tc = TrainConfig { seed: s, record_every: cfg.iterations.max(1), ..cfg.clone() };
            let traj = train(spec, &spec.init(InitMode::XavierUniform, s), &data, &tc, None)?;
            Ok(evaluate(spec, traj.final_params(), test)?.accuracy)
        })
        .collect::<Result<Vec<f64>>>()?;
    let std = if accs.len() > 1 { stats::sample_std(&accs) } else { 0.0 };
    Ok((stats::mean(&accs), std))
}

/// Accuracy of training on each distilled set plus `k` real images per class,
/// and of the all-real baseline with `ipc + k` images per class. Seeds drive
/// both the real-image draw and the model initialisation.
pub fn mixing_curve(
    spec: &ModelSpec,
    real: &Dataset,
    test: &Dataset,
    sets: &[(&str, &SyntheticSet)],
    ks: &[usize],
    seeds: &[u64],
    cfg: &TrainConfig,
) -> Result<Vec<MixCurvePoint>> {
    if seeds.is_empty() || sets.is_empty() {
        return Err(CoreError::invalid("mixing curve", "need at least one seed and one distilled set"));
    }
    let ipc = sets[0].1.meta.ipc;
    if sets.iter().any(|(_, s)| s.meta.ipc != ipc) {
        return Err(CoreError::invalid("mixing curve", "distilled sets differ in images per class"));
    }
    let mut points = Vec::new();
    for (name, set) in sets {
        for &k in ks {
            let (mean, std) = accuracy_over_seeds(spec, test, seeds, cfg, |s| Ok(mix(real, set, k, s)?.data))?;
            points.push(MixCurvePoint { method: name.to_string(), k, mean, std, baseline: false });
        }
    }
    for &k in ks {
        let (mean, std) = accuracy_over_seeds(spec, test, seeds, cfg, |s| real.sample_per_class(ipc + k, s))?;
        points.push(MixCurvePoint { method: "real".into(), k, mean, std, baseline: true });
    }
    Ok(points)
}

/// First index after which the sequence never rises more than `tol` above
/// its current value.
pub fn plateau_index(acc: &[f64], tol: f64) -> Option<usize> {
    let mut future_max = vec![f64::NEG_INFINITY; acc.len()];
    let mut m = f64::NEG_INFINITY;
    for i in (0..acc.len()).rev() {
        m = m.max(acc[i]);
        future_max[i] = m;
    }
    (0..acc.len()).find(|&i| future_max[i] - acc[i] <= tol + 1e-12)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Recognition {
    pub iterations: Vec<usize>,
    /// Accuracy per recorded iteration for `test` first, then each set.
    pub curves: Vec<(String, Vec<f64>)>,
    /// Plateau iteration per curve.
    pub plateaus: Vec<(String, usize)>,
}

impl Recognition {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,set,accuracy\n");
        for (name, accs) in &self.curves {
            for (it, a) in self.iterations.iter().zip(accs) {
                let _ = writeln!(s, "{it},{name},{a:?}");
            }
        }
        s
    }
}

/// Trains on real data and tracks accuracy on the real test set and on each
/// distilled set (the inverse pipeline).
pub fn recognition_over_time(
    spec: &ModelSpec,
    real: &Dataset,
    test: &Dataset,
    sets: &[(&str, &Dataset)],
    cfg: &TrainConfig,
    init_seed: u64,
    tolerance: f64,
) -> Result<Recognition> {
    let traj = train(spec, &spec.init(InitMode::XavierUniform, init_seed), real, cfg, None)?;
    let named: Vec<(&str, &Dataset)> = std::iter::once(("real_test", test)).chain(sets.iter().copied()).collect();
    let curves = named
        .iter()
        .map(|(name, data)| {
            let accs = traj
                .records
                .par_iter()
                .map(|r| Ok(evaluate(spec, &r.params, data)?.accuracy))
                .collect::<Result<Vec<f64>>>()?;
            Ok((name.to_string(), accs))
        })
        .collect::<Result<Vec<_>>>()?;
    let iterations = traj.iterations();
    let plateaus = curves
        .iter()
        .map(|(n, a)| (n.clone(), iterations[plateau_index(a, tolerance).expect("non-empty trajectory")]))
        .collect();
    Ok(Recognition { iterations, curves, plateaus })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipDelta {
    pub unclipped: f64,
    pub clipped: f64,
    pub clipped_fraction: f64,
}

impl ClipDelta {
    pub fn delta(&self) -> f64 {
        self.clipped - self.unclipped
    }
}

/// Test accuracy after training on the distilled set as is and after clipping
/// its pixels to `[0, 1]`, from the same initialisation.
pub fn clip_delta(
    spec: &ModelSpec,
    synthetic: &SyntheticSet,
    test: &Dataset,
    cfg: &TrainConfig,
    init_seed: u64,
) -> Result<ClipDelta> {
    let init = spec.init(InitMode::XavierUniform, init_seed);
    let clipped = clip_to_unit(synthetic);
    let acc = |s: &SyntheticSet| -> Result<f64> {
        Ok(evaluate(spec, train(spec, &init, &s.as_dataset(), cfg, None)?.final_params(), test)?.accuracy)
    };
    Ok(ClipDelta {
        unclipped: acc(synthetic)?,
        clipped: acc(&clipped)?,
        clipped_fraction: clipped.meta.clipped_fraction.unwrap_or(0.0),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecompositionRow {
    pub iteration: usize,
    /// Test predictions that differ from the previous snapshot.
    pub prediction_changes: usize,
    /// Mean loss over test images the final model classifies correctly.
    pub correct_loss: Option<f64>,
    pub incorrect_loss: Option<f64>,
}

/// Splits test loss over training by whether the final model is right.
pub fn loss_increase_decomposition(
    spec: &ModelSpec,
    traj: &Trajectory,
    test: &Dataset,
) -> Result<Vec<DecompositionRow>> {
    let evals = traj.records.par_iter().map(|r| evaluate(spec, &r.params, test)).collect::<Result<Vec<_>>>()?;
    let last = evals.last().ok_or_else(|| CoreError::invalid("decomposition", "empty trajectory"))?;
    let correct: Vec<bool> = last.predictions.iter().zip(test.labels()).map(|(p, y)| p == y).collect();
    let group_mean = |losses: &[f64], want: bool| {
        let v: Vec<f64> = losses.iter().zip(&correct).filter(|(_, &c)| c == want).map(|(l, _)| *l).collect();
        (!v.is_empty()).then(|| stats::mean(&v))
    };
    Ok(evals
        .iter()
        .enumerate()
        .map(|(i, ev)| DecompositionRow {
            iteration: traj.records[i].iteration,
            prediction_changes: if i == 0 {
                0
            } else {
                ev.predictions.iter().zip(&evals[i - 1].predictions).filter(|(a, b)| a != b).count()
            },
            correct_loss: group_mean(&ev.losses, true),
            incorrect_loss: group_mean(&ev.losses, false),
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SearchOptimizer {
    SgdMomentum,
    AdaptiveMoment,
}

impl SearchOptimizer {
    pub fn name(self) -> &'static str {
        match self {
            SearchOptimizer::SgdMomentum => "sgd_momentum",
            SearchOptimizer::AdaptiveMoment => "adaptive_moment",
        }
    }
}

/// Bias-corrected adaptive-moment update with L2 weight decay in the gradient.
struct Adam {
    lr: f64,
    weight_decay: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(lr: f64, weight_decay: f64, dim: usize) -> Self {
        Adam { lr, weight_decay, m: vec![0.0; dim], v: vec![0.0; dim], t: 0 }
    }
}

impl Optimizer for Adam {
    fn step(&mut self, theta: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..theta.len() {
            let g = grad[i] + self.weight_decay * theta[i];
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * g;
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * g * g;
            theta[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub spec_index: usize,
    pub trial: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub optimizer: SearchOptimizer,
    pub iterations: usize,
    pub clip: bool,
    /// `None` when training diverged.
    pub accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub trials: Vec<Trial>,
    pub best: Vec<f64>,
}

impl SearchResult {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("spec,trial,lr,momentum,weight_decay,optimizer,iterations,clip,accuracy\n");
        for t in &self.trials {
            let acc = t.accuracy.map_or("nan".to_string(), |a| format!("{a:?}"));
            let _ = writeln!(
                s,
                "{},{},{:?},{:?},{:?},{},{},{},{acc}",
                t.spec_index,
                t.trial,
                t.lr,
                t.momentum,
                t.weight_decay,
                t.optimizer.name(),
                t.iterations,
                u8::from(t.clip)
            );
        }
        s
    }
}

/// Hyperparameters of each trial, shared by every model spec.
pub fn sample_trials(trials: usize, seed: u64) -> Vec<Trial> {
    let mut r = rng::seeded(seed, rng::stream::SEARCH);
    (0..trials)
        .map(|trial| {
            let lr = 10f64.powf(r.random_range(-4.0..=-1.0));
            let momentum = r.random_range(0.0..=0.99);
            let weight_decay = if r.random::<bool>() { 0.0 } else { 10f64.powf(r.random_range(-5.0..=-1.0)) };
            let optimizer =
                if r.random::<bool>() { SearchOptimizer::SgdMomentum } else { SearchOptimizer::AdaptiveMoment };
            let iterations = 100 * r.random_range(1..=10usize);
            let clip = r.random::<bool>();
            Trial { spec_index: 0, trial, lr, momentum, weight_decay, optimizer, iterations, clip, accuracy: None }
        })
        .collect()
}

/// Random search over optimiser settings, training full batch on the
/// distilled set and scoring on `test`.
pub fn hyperparameter_search(
    specs: &[ModelSpec],
    synthetic: &Dataset,
    test: &Dataset,
    trials: usize,
    seed: u64,
) -> Result<SearchResult> {
    if trials == 0 {
        return Err(CoreError::invalid("search", "need at least one trial"));
    }
    let plan = sample_trials(trials, seed);
    let mut all = Vec::new();
    let mut best = Vec::new();
    for (si, spec) in specs.iter().enumerate() {
        let done = plan
            .par_iter()
            .map(|t| {
                let init_seed = rng::child_seed(seed, t.trial as u64);
                let init = spec.init(InitMode::XavierUniform, init_seed);
                let cfg = TrainConfig {
                    lr: t.lr,
                    momentum: t.momentum,
                    weight_decay: t.weight_decay,
                    iterations: t.iterations,
                    batch: Batch::Full,
                    seed: init_seed,
                    record_every: t.iterations,
                    grad_clip: t.clip.then_some(1.0),
                };
                let run = match t.optimizer {
                    SearchOptimizer::SgdMomentum => train(spec, &init, synthetic, &cfg, None),
                    SearchOptimizer::AdaptiveMoment => {
                        train_with(spec, &init, synthetic, &cfg, None, Adam::new(t.lr, t.weight_decay, init.len()))
                    }
                };
                let accuracy = match run {
                    Ok(traj) => Some(evaluate(spec, traj.final_params(), test)?.accuracy),
                    Err(e) if e.is_numerical() => None,
                    Err(e) => return Err(e),
                };
                Ok(Trial { spec_index: si, accuracy, ..t.clone() })
            })
            .collect::<Result<Vec<Trial>>>()?;
        let top = done.iter().filter_map(|t| t.accuracy).fold(f64::NEG_INFINITY, f64::max);
        all.extend(done);
        if top == f64::NEG_INFINITY {
            return Err(CoreError::invalid("search", format!("every trial diverged for model {si}")));
        }
        best.push(top);
    }
    Ok(SearchResult { trials: all, best })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Projection {
    pub coords: Vec<[f64; 2]>,
    /// Variance along each component (top two covariance eigenvalues).
    pub variances: [f64; 2],
}

/// Top-2 principal components of the rows of `features` (`n x d`).
pub fn pca_projection(features: &[Vec<f64>]) -> Result<Projection> {
    let n = features.len();
    let d = features.first().map_or(0, Vec::len);
    if n < 3 || d < 2 || features.iter().any(|f| f.len() != d) {
        return Err(CoreError::invalid("pca", "need at least three equal-length vectors of dimension two or more"));
    }
    let mut x = DMatrix::from_fn(n, d, |i, j| features[i][j]);
    for j in 0..d {
        let m = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-m);
    }
    let cov = x.transpose() * &x / (n - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    if !(eig.eigenvalues[order[0]] > 0.0) {
        return Err(CoreError::invalid("pca", "features have rank zero"));
    }
    let comps: Vec<Vec<f64>> = order[..2]
        .iter()
        .map(|&k| {
            let mut c: Vec<f64> = eig.eigenvectors.column(k).iter().copied().collect();
            // sign convention: largest-magnitude loading positive
            let big = c.iter().copied().fold(0.0f64, |m, v| if v.abs() > m.abs() { v } else { m });
            if big < 0.0 {
                c.iter_mut().for_each(|v| *v = -*v);
            }
            c
        })
        .collect();
    let coords = (0..n)
        .map(|i| {
            let row = x.row(i);
            let p = |c: &Vec<f64>| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [p(&comps[0]), p(&comps[1])]
        })
        .collect();
    Ok(Projection { coords, variances: [eig.eigenvalues[order[0]], eig.eigenvalues[order[1]].max(0.0)] })
}

/// Pool members as trained parameter-free records, for the early-stop pool
/// when snapshots come from a caller-provided trajectory.
pub fn trajectory_members(
    spec: &ModelSpec,
    traj: &Trajectory,
    test: &Dataset,
    every: usize,
) -> Result<Vec<PoolMember>> {
    traj.records
        .iter()
        .filter(|r| every > 0 && r.iteration % every == 0)
        .map(|r| member(spec, &r.params, test, Pool::EarlyStop, format!("iteration={}", r.iteration)))
        .collect()
}
