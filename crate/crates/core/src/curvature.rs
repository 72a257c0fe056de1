//! Hessian trace and spectrum estimation from Hessian-vector products, loss
//! landscape planes, and the curvature experiments built on them.

use ddlab_autodiff::{hvp, AutodiffError, Graph, HvpMode, Var};
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng as _;
use rayon::prelude::*;

use crate::data::Dataset;
use crate::error::{CoreError, Result};
use crate::model::{InitMode, ModelSpec, ParamVector};
use crate::rng;
use crate::stats;
use crate::train::{evaluate, train, TrainConfig, Trajectory};

/// Lanczos recursion stops once the residual norm falls below this.
pub const BREAKDOWN: f64 = 1e-12;

/// Images per Hessian-vector product; the loss Hessian is the size-weighted
/// sum over chunks, which bounds double-backward memory.
pub const HVP_CHUNK: usize = 64;

/// A symmetric linear operator available only through products.
pub trait HessianOperator: Sync {
    fn dim(&self) -> usize;
    fn apply(&self, v: &[f64]) -> Result<Vec<f64>>;
}

/// Explicit symmetric matrix, mostly for fixtures.
#[derive(Clone, Debug)]
pub struct DenseOperator(pub DMatrix<f64>);

impl DenseOperator {
    pub fn diagonal(values: &[f64]) -> Self {
        DenseOperator(DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(values)))
    }
}

impl HessianOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.0.nrows()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.dim() {
            return Err(AutodiffError::DimensionMismatch { expected: self.dim(), got: v.len() }.into());
        }
        Ok((&self.0 * nalgebra::DVector::from_column_slice(v)).as_slice().to_vec())
    }
}

/// Hessian of the mean cross-entropy of `data` w.r.t. the model parameters.
pub struct LossHessian<'a> {
    spec: &'a ModelSpec,
    params: &'a [f64],
    data: &'a Dataset,
    mode: HvpMode,
}

impl<'a> LossHessian<'a> {
    pub fn new(spec: &'a ModelSpec, params: &'a ParamVector, data: &'a Dataset, mode: HvpMode) -> Result<Self> {
        if params.len() != spec.num_params() {
            return Err(CoreError::invalid("loss hessian", "parameters do not match the model spec"));
        }
        if data.is_empty() || data.image_shape() != spec.input_shape {
            return Err(CoreError::invalid("loss hessian", "data is empty or does not match the model input"));
        }
        Ok(LossHessian { spec, params: &params.values, data, mode })
    }
}

impl HessianOperator for LossHessian<'_> {
    fn dim(&self) -> usize {
        self.params.len()
    }

    fn apply(&self, v: &[f64]) -> Result<Vec<f64>> {
        let n = self.data.len();
        let mut out = vec![0.0; self.params.len()];
        for start in (0..n).step_by(HVP_CHUNK) {
            let idx: Vec<usize> = (start..(start + HVP_CHUNK).min(n)).collect();
            let chunk = self.data.select(&idx)?;
            let loss_fn = as_loss_fn(|g, theta| {
                let x = g.constant(chunk.images().clone());
                let logits = self.spec.forward(theta, x).map_err(|e| match e {
                    CoreError::Autodiff(a) => a,
                    other => AutodiffError::InvalidArgument { op: "model", msg: other.to_string() },
                })?;
                logits.logits.cross_entropy(chunk.labels())?.mean()
            });
            let hv = hvp(&loss_fn, self.params, v, self.mode)?;
            let w = idx.len() as f64 / n as f64;
            for (o, h) in out.iter_mut().zip(hv) {
                *o += w * h;
            }
        }
        Ok(out)
    }
}

fn as_loss_fn<F>(f: F) -> F
where
    F: for<'g> Fn(&'g Graph, Var<'g>) -> ddlab_autodiff::Result<Var<'g>>,
{
    f
}

fn rademacher(dim: usize, seed: u64, probe: usize) -> Vec<f64> {
    let mut r = rng::seeded(rng::child_seed(seed, probe as u64), rng::stream::PROBES);
    (0..dim).map(|_| if r.random::<bool>() { 1.0 } else { -1.0 }).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceEstimate {
    pub estimate: f64,
    /// Standard error of the mean over probes; `None` for a single probe.
    pub std_error: Option<f64>,
    pub samples: Vec<f64>,
}

/// Hutchinson estimate `mean_v v^T H v` over Rademacher probes.
pub fn hutchinson_trace(op: &dyn HessianOperator, num_probes: usize, seed: u64) -> Result<TraceEstimate> {
    if num_probes == 0 {
        return Err(CoreError::invalid("hutchinson", "need at least one probe"));
    }
    let samples: Vec<f64> = (0..num_probes)
        .into_par_iter()
        .map(|p| {
            let v = rademacher(op.dim(), seed, p);
            Ok(dot(&v, &op.apply(&v)?))
        })
        .collect::<Result<_>>()?;
    let std_error = (num_probes > 1).then(|| stats::sample_std(&samples) / (num_probes as f64).sqrt());
    Ok(TraceEstimate { estimate: stats::mean(&samples), std_error, samples })
}

/// Ritz values and quadrature weights of one Lanczos run.
#[derive(Clone, Debug, PartialEq)]
pub struct Quadrature {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

/// `m`-step Lanczos with full reorthogonalisation from unit vector `start`.
pub fn lanczos(op: &dyn HessianOperator, start: &[f64], m: usize) -> Result<Quadrature> {
    let n = op.dim();
    if m < 2 || m > n {
        return Err(CoreError::invalid("lanczos", format!("steps {m} must lie in [2, {n}]")));
    }
    if start.len() != n {
        return Err(CoreError::invalid("lanczos", format!("start has length {}, operator {n}", start.len())));
    }
    let norm = dot(start, start).sqrt();
    if !(norm > 0.0) {
        return Err(CoreError::invalid("lanczos", "start vector must be nonzero"));
    }
    let mut basis: Vec<Vec<f64>> = vec![start.iter().map(|x| x / norm).collect()];
    let mut alpha = Vec::with_capacity(m);
    let mut beta: Vec<f64> = Vec::with_capacity(m);
    for j in 0..m {
        let v = &basis[j];
        let mut w = op.apply(v)?;
        let a = dot(&w, v);
        alpha.push(a);
        for (wi, vi) in w.iter_mut().zip(v) {
            *wi -= a * vi;
        }
        if j > 0 {
            let b = beta[j - 1];
            for (wi, vi) in w.iter_mut().zip(&basis[j - 1]) {
                *wi -= b * vi;
            }
        }
        // two passes of Gram-Schmidt against the whole basis
        for _ in 0..2 {
            for q in &basis {
                let c = dot(&w, q);
                for (wi, qi) in w.iter_mut().zip(q) {
                    *wi -= c * qi;
                }
            }
        }
        if j + 1 == m {
            break;
        }
        let b = dot(&w, &w).sqrt();
        if b < BREAKDOWN {
            break;
        }
        beta.push(b);
        basis.push(w.iter().map(|x| x / b).collect());
    }
    let k = alpha.len();
    let mut t = DMatrix::zeros(k, k);
    for i in 0..k {
        t[(i, i)] = alpha[i];
        if i + 1 < k {
            t[(i, i + 1)] = beta[i];
            t[(i + 1, i)] = beta[i];
        }
    }
    let eig = SymmetricEigen::new(t);
    let mut pairs: Vec<(f64, f64)> = (0..k).map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2))).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    Ok(Quadrature { nodes: pairs.iter().map(|p| p.0).collect(), weights: pairs.iter().map(|p| p.1).collect() })
}

pub const DENSITY_GRID_POINTS: usize = 512;

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralDensity {
    pub probes: Vec<Quadrature>,
    pub sigma: f64,
    pub x: Vec<f64>,
    pub density: Vec<f64>,
}

impl SpectralDensity {
    /// Zeroth and first moments of the quadrature measure.
    pub fn moments(&self) -> (f64, f64) {
        let p = self.probes.len() as f64;
        let m0 = self.probes.iter().map(|q| q.weights.iter().sum::<f64>()).sum::<f64>() / p;
        let m1 = self.probes.iter().map(|q| dot(&q.nodes, &q.weights)).sum::<f64>() / p;
        (m0, m1)
    }

    /// Moments of the smoothed grid by the trapezoid rule.
    pub fn grid_moments(&self) -> (f64, f64) {
        let xr: Vec<f64> = self.x.iter().zip(&self.density).map(|(x, d)| x * d).collect();
        (stats::trapezoid(&self.x, &self.density), stats::trapezoid(&self.x, &xr))
    }

    /// Natural log of the density, floored so every grid point is finite.
    pub fn log_density(&self) -> Vec<f64> {
        self.density.iter().map(|d| d.max(f64::MIN_POSITIVE).ln()).collect()
    }
}

/// Stochastic Lanczos quadrature. `sigma` defaults to 5% of the spread of the
/// Ritz values (or of their magnitude when all coincide).
pub fn lanczos_density(
    op: &dyn HessianOperator,
    m: usize,
    num_probes: usize,
    seed: u64,
    sigma: Option<f64>,
) -> Result<SpectralDensity> {
    if num_probes == 0 {
        return Err(CoreError::invalid("lanczos", "need at least one probe"));
    }
    let n = op.dim();
    let probes: Vec<Quadrature> = (0..num_probes)
        .into_par_iter()
        .map(|p| {
            let scale = 1.0 / (n as f64).sqrt();
            let start: Vec<f64> = rademacher(n, seed, p).iter().map(|v| v * scale).collect();
            lanczos(op, &start, m)
        })
        .collect::<Result<_>>()?;
    let lo = probes.iter().flat_map(|q| q.nodes.iter()).copied().fold(f64::INFINITY, f64::min);
    let hi = probes.iter().flat_map(|q| q.nodes.iter()).copied().fold(f64::NEG_INFINITY, f64::max);
    let sigma = match sigma {
        Some(s) if s > 0.0 && s.is_finite() => s,
        Some(s) => return Err(CoreError::invalid("lanczos", format!("smoothing sigma {s} must be positive"))),
        None if hi > lo => 0.05 * (hi - lo),
        None => 0.05 * hi.abs().max(1.0),
    };
    let (a, b) = (lo - 6.0 * sigma, hi + 6.0 * sigma);
    let step = (b - a) / (DENSITY_GRID_POINTS - 1) as f64;
    let x: Vec<f64> = (0..DENSITY_GRID_POINTS).map(|i| a + i as f64 * step).collect();
    let norm = 1.0 / (num_probes as f64 * sigma * (2.0 * std::f64::consts::PI).sqrt());
    let density = x
        .iter()
        .map(|&t| {
            norm * probes
                .iter()
                .flat_map(|q| q.nodes.iter().zip(&q.weights))
                .map(|(l, w)| w * (-0.5 * ((t - l) / sigma).powi(2)).exp())
                .sum::<f64>()
        })
        .collect();
    Ok(SpectralDensity { probes, sigma, x, density })
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceSeries {
    pub name: String,
    pub iterations: Vec<usize>,
    pub raw: Vec<f64>,
    pub smoothed: Vec<f64>,
}

impl TraceSeries {
    /// `window` is in snapshots and shrinks to the largest odd length that fits.
    pub fn new(name: &str, iterations: Vec<usize>, raw: Vec<f64>, window: usize) -> Result<Self> {
        if iterations.windows(2).any(|w| w[0] >= w[1]) {
            return Err(CoreError::invalid("trace series", "iterations must increase strictly"));
        }
        let fit = window.min(raw.len());
        let fit = if fit.is_multiple_of(2) { fit.saturating_sub(1) } else { fit };
        let smoothed = if raw.is_empty() { Vec::new() } else { stats::moving_average(&raw, fit.max(1))? };
        Ok(TraceSeries { name: name.to_string(), iterations, raw, smoothed })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,raw,smoothed\n");
        for ((i, r), m) in self.iterations.iter().zip(&self.raw).zip(&self.smoothed) {
            s.push_str(&format!("{i},{r:?},{m:?}\n"));
        }
        s
    }

    /// Index of the largest smoothed value (first on ties).
    pub fn peak(&self) -> Option<usize> {
        let mut best: Option<usize> = None;
        for (i, v) in self.smoothed.iter().enumerate() {
            if best.is_none_or(|b| *v > self.smoothed[b]) {
                best = Some(i);
            }
        }
        best
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TraceConfig {
    pub probes: usize,
    pub window: usize,
    pub seed: u64,
    pub mode: HvpMode,
}

impl Default for TraceConfig {
    fn default() -> Self {
        TraceConfig { probes: 20, window: 11, seed: 0, mode: HvpMode::Exact }
    }
}

fn trace_at(spec: &ModelSpec, params: &ParamVector, data: &Dataset, cfg: &TraceConfig) -> Result<f64> {
    let op = LossHessian::new(spec, params, data, cfg.mode)?;
    Ok(hutchinson_trace(&op, cfg.probes, cfg.seed)?.estimate)
}

/// Hutchinson trace of each evaluation set's loss Hessian at the requested
/// snapshots (all recorded ones by default). Probe vectors are shared across
/// snapshots so a constant trajectory gives a constant series.
pub fn trace_over_training(
    spec: &ModelSpec,
    traj: &Trajectory,
    eval_sets: &[(&str, &Dataset)],
    iterations: Option<&[usize]>,
    cfg: &TraceConfig,
) -> Result<Vec<TraceSeries>> {
    let wanted = iterations.map(<[usize]>::to_vec).unwrap_or_else(|| traj.iterations());
    let missing: Vec<usize> = wanted.iter().copied().filter(|&i| traj.at(i).is_none()).collect();
    if !missing.is_empty() {
        return Err(CoreError::invalid("trace over training", format!("no snapshot at iterations {missing:?}")));
    }
    eval_sets
        .iter()
        .map(|(name, data)| {
            let raw = wanted
                .iter()
                .map(|&i| trace_at(spec, &traj.at(i).expect("checked").params, data, cfg))
                .collect::<Result<Vec<f64>>>()?;
            TraceSeries::new(name, wanted.clone(), raw, cfg.window)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandscapeGrid {
    pub name: String,
    /// Row-major over `b` then `a`: `losses[j * R + i]` is at `(a_i, b_j)`.
    pub losses: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LandscapePlane {
    pub coords: Vec<f64>,
    pub grids: Vec<LandscapeGrid>,
    /// `delta . eta_perp`, zero up to rounding.
    pub orthogonality: f64,
}

impl LandscapePlane {
    pub fn to_csv(&self, grid: usize) -> String {
        let r = self.coords.len();
        let mut s = String::from("a,b,loss\n");
        for j in 0..r {
            for i in 0..r {
                s.push_str(&format!(
                    "{:?},{:?},{:?}\n",
                    self.coords[i],
                    self.coords[j],
                    self.grids[grid].losses[j * r + i]
                ));
            }
        }
        s
    }
}

/// Losses on the plane `theta0 + a*delta + b*eta_perp`, `a, b` in `[0, 1]`,
/// where `delta = theta_r - theta0` and `eta_perp` is the part of
/// `theta_d - theta0` orthogonal to `delta`. Points are formed as
/// `(1 - a) theta0 + a theta_r + b eta_perp` so the corners reproduce the
/// endpoints bit for bit. `offset` is added to every loss.
pub fn landscape_plane(
    spec: &ModelSpec,
    theta0: &ParamVector,
    theta_r: &ParamVector,
    theta_d: &ParamVector,
    sets: &[(&str, &Dataset)],
    resolution: usize,
    offset: f64,
) -> Result<LandscapePlane> {
    let n = spec.num_params();
    if [theta0, theta_r, theta_d].iter().any(|p| p.len() != n) {
        return Err(CoreError::invalid("landscape", "parameter vectors do not share the model layout"));
    }
    if resolution < 2 {
        return Err(CoreError::invalid("landscape", "resolution must be at least 2"));
    }
    let delta: Vec<f64> = theta_r.values.iter().zip(&theta0.values).map(|(r, o)| r - o).collect();
    let dd = dot(&delta, &delta);
    if dd == 0.0 {
        return Err(CoreError::invalid("landscape", "theta_r equals theta0; the plane is degenerate"));
    }
    let eta: Vec<f64> = theta_d.values.iter().zip(&theta0.values).map(|(d, o)| d - o).collect();
    let c = dot(&eta, &delta) / dd;
    let eta_perp: Vec<f64> = eta.iter().zip(&delta).map(|(e, d)| e - c * d).collect();
    let coords: Vec<f64> = (0..resolution).map(|i| i as f64 / (resolution - 1) as f64).collect();
    let points: Vec<(f64, f64)> = coords.iter().flat_map(|&b| coords.iter().map(move |&a| (a, b))).collect();
    let grids = sets
        .iter()
        .map(|(name, data)| {
            let losses = points
                .par_iter()
                .map(|&(a, b)| {
                    let values = theta0
                        .values
                        .iter()
                        .zip(&theta_r.values)
                        .zip(&eta_perp)
                        .map(|((o, r), e)| (1.0 - a) * o + a * r + b * e)
                        .collect();
                    Ok(evaluate(spec, &theta0.with_values(values), data)?.mean_loss() + offset)
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(LandscapeGrid { name: name.to_string(), losses })
        })
        .collect::<Result<_>>()?;
    Ok(LandscapePlane { coords, grids, orthogonality: dot(&delta, &eta_perp) })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CurvatureConfig {
    pub train: TrainConfig,
    pub init_seed: u64,
    pub trace: TraceConfig,
    pub lanczos_steps: usize,
    pub density_probes: usize,
}

#[derive(Clone, Debug)]
pub struct MarkedDensity {
    pub iteration: usize,
    pub synthetic: SpectralDensity,
    pub real: SpectralDensity,
}

#[derive(Clone, Debug)]
pub struct DistilledCurvature {
    pub synthetic: TraceSeries,
    pub real: TraceSeries,
    pub peak_iteration: usize,
    pub densities: Vec<MarkedDensity>,
}

/// Trains on `synthetic` and tracks the Hessian trace of both the synthetic
/// and the real loss at every recorded iteration; spectra are taken at the
/// start, the smoothed synthetic peak and the end.
pub fn distilled_training_curvature(
    spec: &ModelSpec,
    synthetic: &Dataset,
    real: &Dataset,
    cfg: &CurvatureConfig,
) -> Result<DistilledCurvature> {
    let init = spec.init(InitMode::XavierUniform, cfg.init_seed);
    let traj = train(spec, &init, synthetic, &cfg.train, None)?;
    let mut series = trace_over_training(spec, &traj, &[("synthetic", synthetic), ("real", real)], None, &cfg.trace)?;
    let real_series = series.pop().expect("two series");
    let syn_series = series.pop().expect("two series");
    let peak_iteration = syn_series.iterations[syn_series.peak().expect("non-empty series")];
    let mut marks = vec![0, peak_iteration, *syn_series.iterations.last().expect("non-empty series")];
    marks.dedup();
    let m = cfg.lanczos_steps.min(spec.num_params());
    let densities = marks
        .into_iter()
        .map(|it| {
            let params = &traj.at(it).expect("recorded").params;
            let dens = |data| {
                let op = LossHessian::new(spec, params, data, cfg.trace.mode)?;
                lanczos_density(&op, m, cfg.density_probes, cfg.trace.seed, None)
            };
            Ok(MarkedDensity { iteration: it, synthetic: dens(synthetic)?, real: dens(real)? })
        })
        .collect::<Result<_>>()?;
    Ok(DistilledCurvature { synthetic: syn_series, real: real_series, peak_iteration, densities })
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdditionalTraining {
    pub name: String,
    pub before: f64,
    pub after: f64,
}

impl AdditionalTraining {
    pub fn delta(&self) -> f64 {
        self.after - self.before
    }
}

/// Pretrains on `real` with `pretrain`, then continues from the pretrained
/// weights on each named set with `cont` (fresh optimizer state) and records
/// test accuracy before and after.
pub fn additional_training_delta(
    spec: &ModelSpec,
    real: &Dataset,
    test: &Dataset,
    sets: &[(&str, &Dataset)],
    pretrain: &TrainConfig,
    cont: &TrainConfig,
    init_seed: u64,
) -> Result<Vec<AdditionalTraining>> {
    let init = spec.init(InitMode::XavierUniform, init_seed);
    let base =
        train(spec, &init, real, &TrainConfig { record_every: pretrain.iterations.max(1), ..pretrain.clone() }, None)?;
    let base = base.final_params();
    let before = evaluate(spec, base, test)?.accuracy;
    sets.par_iter()
        .map(|(name, data)| {
            let cfg = TrainConfig { record_every: cont.iterations.max(1), ..cont.clone() };
            let after = evaluate(spec, train(spec, base, data, &cfg, None)?.final_params(), test)?.accuracy;
            Ok(AdditionalTraining { name: name.to_string(), before, after })
        })
        .collect()
}
