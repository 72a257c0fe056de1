//! One function per subcommand. Each reads the outputs of earlier
//! subcommands under the same run directory and writes through a [`Stage`].

use std::path::PathBuf;

use anyhow::{Context, Result};
use ddlab_autodiff::HvpMode;
use ddlab_core::behavior::{
    accuracy_filter, agreement_probability, agreement_records, build_pools, clip_delta, hyperparameter_search,
    ks_normality, loss_increase_decomposition, mix_curve_csv, mixing_curve, pca_projection, recognition_over_time,
    Pool, PoolConfig,
};
use ddlab_core::curvature::{
    additional_training_delta, distilled_training_curvature, lanczos_density, landscape_plane, trace_over_training,
    CurvatureConfig, LossHessian, SpectralDensity, TraceConfig, TraceSeries,
};
use ddlab_core::data::{generate_blobs, pixel_density, Attributes, Dataset, SyntheticSet};
use ddlab_core::distill::{build_expert_buffer, distill as run_distill, save_expert_buffer, Method};
use ddlab_core::error::CoreError;
use ddlab_core::influence::{
    attribute_pr_for_class, class_influence_stats, influence_vs_feature_distance, loo_influence,
    real_background_influence, seed_consistency, InfluenceConfig, InfluenceMatrix,
};
use ddlab_core::model::{InitMode, ModelKind, ModelSpec, ParamVector};
use ddlab_core::stats::{mean, sample_std, DensityGrid};
use ddlab_core::train::{evaluate, train, TrainConfig};
use rayon::prelude::*;

use crate::store::Run;

pub const GEN_DATA: &str = "gen-data";
pub const DISTILL: &str = "distill";
pub const TRAIN: &str = "train";
pub const INFLUENCE: &str = "influence";
pub const CURVATURE: &str = "curvature";
pub const LANDSCAPE: &str = "landscape";
pub const AGREE: &str = "agree";
pub const MIX: &str = "mix";
pub const RECOGNIZE: &str = "recognize";
pub const SEARCH: &str = "search";
pub const REPORT: &str = "report";

/// CSV text built with the `csv` writer; floats use round-trip formatting.
pub struct Table {
    w: csv::Writer<Vec<u8>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Result<Self> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(header)?;
        Ok(Table { w })
    }

    pub fn row<I: IntoIterator<Item = String>>(&mut self, cells: I) -> Result<()> {
        self.w.write_record(cells.into_iter().collect::<Vec<_>>())?;
        Ok(())
    }

    pub fn finish(self) -> Result<String> {
        Ok(String::from_utf8(self.w.into_inner().context("flushing csv")?)?)
    }
}

pub fn num(v: f64) -> String {
    format!("{v:?}")
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), num)
}

macro_rules! cells {
    ($($x:expr),* $(,)?) => { vec![$($x.to_string()),*] };
}

struct Real {
    train: Dataset,
    test: Dataset,
    test_attributes: Attributes,
}

fn load_real(run: &Run) -> Result<Real> {
    let d = run.sub(GEN_DATA);
    let files = ["train.ddlb", "test.ddlb", "train_attributes.csv", "test_attributes.csv"].map(|f| d.join(f));
    run.require(&files)?;
    let text = std::fs::read_to_string(&files[3]).with_context(|| format!("reading {}", files[3].display()))?;
    Ok(Real {
        train: Dataset::load(&files[0])?,
        test: Dataset::load(&files[1])?,
        test_attributes: Attributes::from_csv(&text)?,
    })
}

fn methods(run: &Run, only: Option<Method>) -> Result<Vec<Method>> {
    Ok(match only {
        Some(m) => vec![m],
        None => run.cfg.methods()?,
    })
}

fn set_name(method: Method, ipc: usize, primary: usize) -> String {
    if ipc == primary {
        method.name().to_string()
    } else {
        format!("{}_ipc{ipc}", method.name())
    }
}

fn set_path(run: &Run, name: &str) -> PathBuf {
    run.sub(DISTILL).join(format!("{name}.ddls"))
}

fn load_sets(run: &Run, only: Option<Method>) -> Result<Vec<(Method, SyntheticSet)>> {
    let ms = methods(run, only)?;
    let paths: Vec<PathBuf> = ms.iter().map(|m| set_path(run, m.name())).collect();
    run.require(&paths)?;
    ms.into_iter().zip(paths).map(|(m, p)| Ok((m, SyntheticSet::load(&p)?))).collect()
}

/// The first `count / classes` images of every class (everything when
/// `count` covers the set).
fn stratified_ids(data: &Dataset, count: usize) -> Vec<usize> {
    if count >= data.len() {
        return (0..data.len()).collect();
    }
    let per = (count / data.num_classes()).max(1);
    let mut ids: Vec<usize> = data.class_indices().iter().flat_map(|c| c.iter().take(per).copied()).collect();
    ids.sort_unstable();
    ids
}

fn subset(data: &Dataset, count: usize) -> Result<Dataset> {
    Ok(data.select(&stratified_ids(data, count))?)
}

fn fresh(spec: &ModelSpec, seed: u64) -> ParamVector {
    spec.init(InitMode::XavierUniform, seed)
}

fn fit(spec: &ModelSpec, data: &Dataset, cfg: &TrainConfig, seed: u64) -> Result<ddlab_core::train::Trajectory> {
    Ok(train(spec, &fresh(spec, seed), data, cfg, None)?)
}

fn density_rows(t: &mut Table, prefix: &[String], g: &DensityGrid) -> Result<()> {
    for (x, d) in g.x.iter().zip(&g.density) {
        t.row(prefix.iter().cloned().chain([num(*x), num(*d)]))?;
    }
    Ok(())
}

fn spectrum_rows(t: &mut Table, prefix: &[String], s: &SpectralDensity) -> Result<()> {
    for (x, d) in s.x.iter().zip(&s.density) {
        t.row(prefix.iter().cloned().chain([num(*x), num(*d), s.probes.len().to_string()]))?;
    }
    Ok(())
}

fn trace_rows(t: &mut Table, prefix: &[String], s: &TraceSeries) -> Result<()> {
    for ((i, r), m) in s.iterations.iter().zip(&s.raw).zip(&s.smoothed) {
        t.row(prefix.iter().cloned().chain([i.to_string(), num(*r), num(*m)]))?;
    }
    Ok(())
}

pub fn gen_data(run: &Run) -> Result<Vec<PathBuf>> {
    let blobs = generate_blobs(&run.cfg.blobs()?)?;
    let mut st = run.stage(GEN_DATA)?;
    blobs.train.save(&st.path("train.ddlb"))?;
    blobs.test.save(&st.path("test.ddlb"))?;
    st.write("train_attributes.csv", blobs.train_attributes.to_csv())?;
    st.write("test_attributes.csv", blobs.test_attributes.to_csv())?;
    st.commit()
}

pub fn distill(run: &Run, only: Option<Method>) -> Result<Vec<PathBuf>> {
    let cfg = &run.cfg;
    let real = load_real(run)?;
    let spec = cfg.spec()?;
    let primary = cfg.usize("distill.ipc")?;
    let ms = methods(run, only)?;
    let mut jobs: Vec<(Method, usize)> = ms.iter().map(|&m| (m, primary)).collect();
    let sweep_method = cfg.sweep_method()?;
    if ms.contains(&sweep_method) {
        for ipc in cfg.list_usize_or_empty("sweep.ipcs")? {
            if ipc != primary && !jobs.contains(&(sweep_method, ipc)) {
                jobs.push((sweep_method, ipc));
            }
        }
    }
    let experts = if ms.contains(&Method::TrajectoryMatching) {
        log::info!("training {} expert trajectories", cfg.usize("tm.experts")?);
        Some(build_expert_buffer(&real.train, &spec, &cfg.expert_train()?, cfg.usize("tm.experts")?)?)
    } else {
        None
    };
    let probe = (cfg.usize("distill.probe_every")? > 0).then_some(&real.test);
    let configs: Vec<_> = jobs
        .iter()
        .map(|&(m, ipc)| Ok(ddlab_core::distill::DistillConfig { ipc, ..cfg.distill(m)? }))
        .collect::<Result<_>>()?;
    let results = configs
        .par_iter()
        .map(|dc| {
            log::info!("distilling {} at ipc {}", dc.method.name(), dc.ipc);
            run_distill(&real.train, dc, experts.as_deref(), probe)
        })
        .collect::<std::result::Result<Vec<_>, CoreError>>()?;

    let mut st = run.stage(DISTILL)?;
    for (&(m, ipc), (set, log)) in jobs.iter().zip(&results) {
        let name = set_name(m, ipc, primary);
        set.save(&st.path(&format!("{name}.ddls")))?;
        st.write(&format!("{name}_log.csv"), log.to_csv())?;
        if ipc == primary {
            let mut t = Table::new(&["set", "x", "density"])?;
            density_rows(&mut t, &[m.name().to_string()], &pixel_density(set.images.data())?)?;
            st.write(&format!("pixels_{}.csv", m.name()), t.finish()?)?;
        }
    }
    let mut t = Table::new(&["set", "x", "density"])?;
    density_rows(&mut t, &["real".to_string()], &pixel_density(real.train.images().data())?)?;
    st.write("pixels_real.csv", t.finish()?)?;
    if let Some(e) = &experts {
        save_expert_buffer(&spec, e, &st.path("experts"))?;
    }
    st.commit()
}

/// Architectures for the inverse pipeline: the configured network, a
/// shallower ConvNet, an MLP and logistic regression.
fn architectures(spec: &ModelSpec) -> Vec<(&'static str, ModelSpec)> {
    let conv = if spec.kind == ModelKind::ConvNet {
        spec.clone()
    } else {
        ModelSpec::convnet(spec.input_shape, spec.num_classes)
    };
    let shallow = ModelSpec { depth: conv.depth.saturating_sub(1).max(1), ..conv.clone() };
    vec![
        ("convnet", conv),
        ("convnet_shallow", shallow),
        ("mlp", ModelSpec::mlp(spec.input_shape, spec.num_classes, 2, 64)),
        ("linear", ModelSpec::linear(spec.input_shape, spec.num_classes)),
    ]
}

pub fn train_cmd(run: &Run, only: Option<Method>) -> Result<Vec<PathBuf>> {
    let cfg = &run.cfg;
    let real = load_real(run)?;
    let sets = load_sets(run, only)?;
    let spec = cfg.spec()?;
    let seed = cfg.seed();
    let real_cfg = cfg.train()?;
    let eval_cfg = cfg.eval_train(seed)?;
    let mut st = run.stage(TRAIN)?;

    let archs = architectures(&spec);
    let fitted = archs
        .par_iter()
        .map(|(_, s)| Ok(fit(s, &real.train, &real_cfg, seed)?.final_params().clone()))
        .collect::<Result<Vec<_>>>()?;
    let mut t = Table::new(&["architecture", "set", "accuracy"])?;
    for ((name, s), params) in archs.iter().zip(&fitted) {
        t.row(cells![name, "real_test", num(evaluate(s, params, &real.test)?.accuracy)])?;
        for (m, set) in &sets {
            t.row(cells![name, m.name(), num(evaluate(s, params, &set.as_dataset())?.accuracy)])?;
        }
    }
    st.write("inverse.csv", t.finish()?)?;

    // penultimate features of a real-trained copy of the configured network
    let params = fit(&spec, &real.train, &real_cfg, seed)?.final_params().clone();
    let test_view = subset(&real.test, 300)?;
    let mut groups: Vec<(String, Dataset)> = vec![("real_test".into(), test_view)];
    groups.extend(sets.iter().map(|(m, s)| (m.name().to_string(), s.as_dataset())));
    let fd = spec.feature_dim();
    let mut features = Vec::new();
    for (_, d) in &groups {
        let f = spec.features(&params, d.images())?;
        features.extend(f.data().chunks(fd).map(<[f64]>::to_vec));
    }
    let proj = pca_projection(&features)?;
    let mut t = Table::new(&["set", "label", "pc1", "pc2"])?;
    let mut k = 0;
    for (name, d) in &groups {
        for &label in d.labels() {
            t.row(cells![name, label, num(proj.coords[k][0]), num(proj.coords[k][1])])?;
            k += 1;
        }
    }
    st.write("projection.csv", t.finish()?)?;

    let mut t = Table::new(&["method", "iteration", "prediction_changes", "correct_loss", "incorrect_loss"])?;
    for (m, set) in &sets {
        let traj = fit(&spec, &set.as_dataset(), &eval_cfg, seed)?;
        for r in loss_increase_decomposition(&spec, &traj, &real.test)? {
            t.row(cells![m.name(), r.iteration, r.prediction_changes, opt(r.correct_loss), opt(r.incorrect_loss)])?;
        }
    }
    st.write("decomposition.csv", t.finish()?)?;

    let owned: Vec<(String, Dataset)> = sets.iter().map(|(m, s)| (m.name().to_string(), s.as_dataset())).collect();
    let mut named: Vec<(&str, &Dataset)> = owned.iter().map(|(n, d)| (n.as_str(), d)).collect();
    named.push(("real", &real.train));
    let deltas = additional_training_delta(&spec, &real.train, &real.test, &named, &real_cfg, &eval_cfg, seed)?;
    let mut t = Table::new(&["set", "before", "after", "delta"])?;
    for d in &deltas {
        t.row(cells![d.name, num(d.before), num(d.after), num(d.delta())])?;
    }
    st.write("additional.csv", t.finish()?)?;
    st.commit()
}

pub fn influence(run: &Run, only: Option<Method>) -> Result<Vec<PathBuf>> {
    let cfg = &run.cfg;
    let real = load_real(run)?;
    let sets = load_sets(run, only)?;
    let spec = cfg.spec()?;
    let seed = cfg.seed();
    let iterations = cfg.usize("influence.iterations")?;
    let seeds = cfg.list_u64("influence.seeds")?;
    let ids = stratified_ids(&real.test, cfg.usize("influence.test_count")?);
    let labels: Vec<usize> = ids.iter().map(|&t| real.test.labels()[t]).collect();
    let top_k = cfg.usize("influence.top_k")?;
    let bg_per_class = (cfg.usize("influence.background")? / real.train.num_classes()).max(1);
    let background = real.train.sample_per_class(bg_per_class, seed)?;
    let real_params = fit(&spec, &real.train, &cfg.train()?, seed)?.final_params().clone();

    let mut st = run.stage(INFLUENCE)?;
    let mut consistency = Table::new(&["method", "distilled_id", "pearson"])?;
    let mut pairs = Table::new(&["method", "distilled_id", "test_id", "seed_a", "seed_b"])?;
    let mut bg = Table::new(&["method", "distilled_id", "test_id", "synthetic_only", "with_background"])?;
    let mut pr_summary =
        Table::new(&["method", "distilled_id", "attribute", "value", "average_precision", "base_rate"])?;
    let mut pr_curves = Table::new(&["method", "distilled_id", "attribute", "value", "recall", "precision"])?;
    let mut classes = Table::new(&[
        "method",
        "distilled_id",
        "class",
        "in_class_mean",
        "out_class_mean",
        "variance",
        "out_class_in_top_k",
    ])?;
    let mut distance = Table::new(&["method", "distilled_id", "pearson"])?;

    for (m, set) in &sets {
        let ds = set.as_dataset();
        log::info!("leave-one-out influence for {}", m.name());
        let mats = seeds
            .par_iter()
            .map(|&s| loo_influence(&spec, &ds, &real.test, &ids, &InfluenceConfig::new(iterations, s)))
            .collect::<std::result::Result<Vec<InfluenceMatrix>, CoreError>>()?;
        for (s, mat) in seeds.iter().zip(&mats) {
            st.write(&format!("matrix_{}_seed{s}.csv", m.name()), mat.to_csv())?;
        }
        let base = &mats[0];
        if let [a, b, ..] = mats.as_slice() {
            for (d, r) in seed_consistency(a, b)?.into_iter().enumerate() {
                consistency.row(cells![m.name(), d, opt(r)])?;
                for (c, &t) in ids.iter().enumerate() {
                    pairs.row(cells![m.name(), d, t, num(a.get(d, c)), num(b.get(d, c))])?;
                }
            }
        }
        let with_bg = real_background_influence(
            &spec,
            &ds,
            &background,
            &real.test,
            &ids,
            &InfluenceConfig::new(iterations, seeds[0]),
        )?;
        for d in 0..base.rows() {
            for (c, &t) in ids.iter().enumerate() {
                bg.row(cells![m.name(), d, t, num(base.get(d, c)), num(with_bg.get(d, c))])?;
            }
        }

        for d in 0..base.rows() {
            let class = ds.labels()[d];
            let mut best: Option<(f64, String, i64, ddlab_core::influence::PrCurve)> = None;
            for name in &real.test_attributes.names {
                let full = real.test_attributes.column(name).expect("listed attribute");
                let col: Vec<i64> = ids.iter().map(|&t| full[t]).collect();
                let mut values: Vec<i64> =
                    col.iter().zip(&labels).filter(|(_, &l)| l == class).map(|(v, _)| *v).collect();
                let in_class = values.len();
                values.sort_unstable();
                values.dedup();
                for v in values {
                    let curve = attribute_pr_for_class(base.row(d), &col, v, &labels, class)?;
                    let positives = col.iter().zip(&labels).filter(|(&a, &l)| l == class && a == v).count();
                    pr_summary.row(cells![
                        m.name(),
                        d,
                        name,
                        v,
                        num(curve.average_precision),
                        num(positives as f64 / in_class as f64)
                    ])?;
                    if best.as_ref().is_none_or(|b| curve.average_precision > b.0) {
                        best = Some((curve.average_precision, name.clone(), v, curve));
                    }
                }
            }
            if let Some((_, name, v, curve)) = best {
                for (r, p) in curve.points {
                    pr_curves.row(cells![m.name(), d, name, v, num(r), num(p)])?;
                }
            }
        }

        for (d, c) in class_influence_stats(base, ds.labels(), &labels, top_k)?.into_iter().enumerate() {
            classes.row(cells![
                m.name(),
                d,
                ds.labels()[d],
                opt(c.in_class_mean),
                opt(c.out_class_mean),
                opt(c.variance),
                c.out_class_in_top_k
            ])?;
        }
        for (d, r) in influence_vs_feature_distance(base, &spec, &real_params, &ds, &real.test)?.into_iter().enumerate()
        {
            distance.row(cells![m.name(), d, opt(r)])?;
        }
    }
    st.write("consistency.csv", consistency.finish()?)?;
    st.write("seed_pairs.csv", pairs.finish()?)?;
    st.write("background_pairs.csv", bg.finish()?)?;
    st.write("pr_summary.csv", pr_summary.finish()?)?;
    st.write("pr_curves.csv", pr_curves.finish()?)?;
    st.write("class_influence.csv", classes.finish()?)?;
    st.write("feature_distance.csv", distance.finish()?)?;
    st.commit()
}

pub fn curvature(run: &Run, only: Option<Method>) -> Result<Vec<PathBuf>> {
    let cfg = &run.cfg;
    let real = load_real(run)?;
    let sets = load_sets(run, only)?;
    let spec = cfg.spec()?;
    let seed = cfg.seed();
    let eval_cfg = cfg.eval_train(seed)?;
    let trace = TraceConfig {
        probes: cfg.usize("curvature.probes")?,
        window: cfg.usize("curvature.window")?,
        seed,
        mode: HvpMode::Exact,
    };
    let steps = cfg.usize("curvature.lanczos_steps")?.min(spec.num_params());
    let density_probes = cfg.usize("curvature.density_probes")?;
    let count = cfg.usize("curvature.eval_count")?;
    let train_view = subset(&real.train, count)?;
    let test_view = subset(&real.test, count)?;
    let owned: Vec<(String, Dataset)> = sets.iter().map(|(m, s)| (m.name().to_string(), s.as_dataset())).collect();
    let mut named: Vec<(&str, &Dataset)> = vec![("real_train", &train_view), ("real_test", &test_view)];
    named.extend(owned.iter().map(|(n, d)| (n.as_str(), d)));

    let mut st = run.stage(CURVATURE)?;
    log::info!("trace along real-data training");
    let traj = fit(&spec, &real.train, &cfg.train()?, seed)?;
    let mut t = Table::new(&["set", "iteration", "raw", "smoothed"])?;
    for s in trace_over_training(&spec, &traj, &named, None, &trace)? {
        trace_rows(&mut t, std::slice::from_ref(&s.name), &s)?;
    }
    st.write("trace.csv", t.finish()?)?;

    let mut t = Table::new(&["set", "lambda", "density", "probes"])?;
    for (name, data) in &named {
        let op = LossHessian::new(&spec, traj.final_params(), data, trace.mode)?;
        spectrum_rows(&mut t, &[name.to_string()], &lanczos_density(&op, steps, density_probes, seed, None)?)?;
    }
    st.write("density.csv", t.finish()?)?;

    let ccfg = CurvatureConfig {
        train: eval_cfg.clone(),
        init_seed: seed,
        trace: trace.clone(),
        lanczos_steps: steps,
        density_probes,
    };
    let mut tr = Table::new(&["method", "set", "iteration", "raw", "smoothed"])?;
    let mut de = Table::new(&["method", "iteration", "set", "lambda", "density", "probes"])?;
    let mut pk = Table::new(&["method", "peak_iteration"])?;
    for (name, data) in &owned {
        log::info!("trace along training on {name}");
        let c = distilled_training_curvature(&spec, data, &test_view, &ccfg)?;
        trace_rows(&mut tr, &[name.clone(), "synthetic".into()], &c.synthetic)?;
        trace_rows(&mut tr, &[name.clone(), "real".into()], &c.real)?;
        for md in &c.densities {
            spectrum_rows(&mut de, &[name.clone(), md.iteration.to_string(), "synthetic".into()], &md.synthetic)?;
            spectrum_rows(&mut de, &[name.clone(), md.iteration.to_string(), "real".into()], &md.real)?;
        }
        pk.row(cells![name, c.peak_iteration])?;
    }
    st.write("distilled_trace.csv", tr.finish()?)?;
    st.write("distilled_density.csv", de.finish()?)?;
    st.write("distilled_peaks.csv", pk.finish()?)?;

    let mut t = Table::new(&["ipc", "iteration", "raw", "smoothed"])?;
    let sweep_method = cfg.sweep_method()?;
    if let Some((_, primary_set)) = sets.iter().find(|(m, _)| *m == sweep_method) {
        let primary = cfg.usize("distill.ipc")?;
        let mut ipcs = vec![primary];
        ipcs.extend(cfg.list_usize_or_empty("sweep.ipcs")?.into_iter().filter(|&i| i != primary));
        let paths: Vec<PathBuf> =
            ipcs.iter().skip(1).map(|&i| set_path(run, &set_name(sweep_method, i, primary))).collect();
        run.require(&paths)?;
        let mut sweep = vec![primary_set.clone()];
        for p in &paths {
            sweep.push(SyntheticSet::load(p)?);
        }
        for (ipc, s) in ipcs.iter().zip(&sweep) {
            let d = s.as_dataset();
            let traj = fit(&spec, &d, &eval_cfg, seed)?;
            let series = trace_over_training(&spec, &traj, &[("synthetic", &d)], None, &trace)?;
            trace_rows(&mut t, &[ipc.to_string()], &series[0])?;
        }
    }
    st.write("ipc_sweep.csv", t.finish()?)?;
    st.commit()
}

pub fn landscape(run: &Run, only: Option<Method>) -> Result<Vec<PathBuf>> {
    let cfg = &run.cfg;
    let real = load_real(run)?;
    let sets = load_sets(run, only)?;
    let spec = cfg.spec()?;
    let seed = cfg.seed();
    let resolution = cfg.usize("landscape.resolution")?;
    let offset = cfg.f64("landscape.offset")?;
    let view = subset(&real.test, cfg.usize("landscape.eval_count")?)?;
    let theta0 = fresh(&spec, seed);
    let theta_r = train(&spec, &theta0, &real.train, &cfg.train()?, None)?.final_params().clone();
    let mut grid = Table::new(&["method", "set", "a", "b", "loss"])?;
    let mut planes = Table::new(&["method", "orthogonality"])?;
    for (m, set) in &sets {
        let ds = set.as_dataset();
        let theta_d = train(&spec, &theta0, &ds, &cfg.eval_train(seed)?, None)?.final_params().clone();
        let plane = landscape_plane(
            &spec,
            &theta0,
            &theta_r,
            &theta_d,
            &[("real_test", &view), ("distilled", &ds)],
            resolution,
            offset,
        )?;
        let r = plane.coords.len();
        for g in &plane.grids {
            for j in 0..r {
                for i in 0..r {
                    grid.row(cells![
                        m.name(),
                        g.name,
                        num(plane.coords[i]),
                        num(plane.coords[j]),
                        num(g.losses[j * r + i])
                    ])?;
                }
            }
        }
        planes.row(cells![m.name(), num(plane.orthogonality)])?;
    }
    let mut st = run.stage(LANDSCAPE)?;
    st.write("grid.csv", grid.finish()?)?;
    st.write("planes.csv", planes.finish()?)?;
    st.commit()
}

pub fn pool_config(run: &Run) -> Result<PoolConfig> {
    let cfg = &run.cfg;
    Ok(PoolConfig {
        train: cfg.train()?,
        subset_models: cfg.usize("pool.subset_models")?,
        subset_fraction: (cfg.f64("pool.subset_min")?, cfg.f64("pool.subset_max")?),
        subset_iterations: cfg.usize("pool.subset_iterations")?,
        early_stop_runs: cfg.usize("pool.early_stop_runs")?,
        early_stop_every: cfg.usize("pool.early_stop_every")?,
        weight_decay_models: cfg.usize("pool.weight_decay_models")?,
        weight_decay: (cfg.f64("pool.weight_decay_min")?, cfg.f64("pool.weight_decay_max")?),
        weight_decay_epochs: cfg.usize("pool.weight_decay_epochs")?,
        seed: cfg.seed(),
    })
}

pub fn agree(run: &Run, only: Option<Method>) -> Result<Vec<PathBuf>> {
    let cfg = &run.cfg;
    let real = load_real(run)?;
    let sets = load_sets(run, only)?;
    let spec = cfg.spec()?;
    let seed = cfg.seed();
    let window = cfg.f64("agree.window")?;
    log::info!("building model pools");
    let members = build_pools(&spec, &real.train, &real.test, &pool_config(run)?)?;

    let mut pools = Table::new(&["model_id", "pool", "accuracy", "detail"])?;
    for m in &members {
        pools.row(cells![m.id, m.pool.name(), num(m.accuracy), m.detail])?;
    }
    let mut distilled = Table::new(&["method", "accuracy"])?;
    let mut agreements = Table::new(&["method", "model_id", "pool", "accuracy", "agreement"])?;
    let mut probability = Table::new(&["method", "pool", "model_id", "probability"])?;
    let mut normality = Table::new(&["method", "pool", "n", "mean", "std", "statistic", "p_value"])?;
    for (m, set) in &sets {
        let traj = fit(&spec, &set.as_dataset(), &cfg.eval_train(seed)?, seed)?;
        let ev = evaluate(&spec, traj.final_params(), &real.test)?;
        distilled.row(cells![m.name(), num(ev.accuracy)])?;
        for pool in [Pool::Subset, Pool::EarlyStop, Pool::WeightDecay] {
            let kept = accuracy_filter(&members, pool, ev.accuracy, window);
            let recs = agreement_records(&ev.predictions, &kept)?;
            for r in &recs {
                agreements.row(cells![m.name(), r.model_id, pool.name(), num(r.accuracy), r.agreement])?;
            }
            if kept.len() >= 3 {
                let preds: Vec<&[usize]> = kept.iter().map(|k| k.predictions.as_slice()).collect();
                for (k, p) in kept.iter().zip(agreement_probability(&preds, &ev.predictions)?) {
                    probability.row(cells![m.name(), pool.name(), k.id, opt(p)])?;
                }
            }
            let counts: Vec<f64> = recs.iter().map(|r| r.agreement as f64).collect();
            let ks = ks_normality(&counts).ok();
            let (mu, sd) =
                if counts.len() >= 2 { (Some(mean(&counts)), Some(sample_std(&counts))) } else { (None, None) };
            normality.row(cells![
                m.name(),
                pool.name(),
                counts.len(),
                opt(mu),
                opt(sd),
                opt(ks.as_ref().map(|k| k.statistic)),
                opt(ks.as_ref().map(|k| k.p_value))
            ])?;
        }
    }
    let mut st = run.stage(AGREE)?;
    st.write("pools.csv", pools.finish()?)?;
    st.write("distilled.csv", distilled.finish()?)?;
    st.write("agreements.csv", agreements.finish()?)?;
    st.write("agreement_probability.csv", probability.finish()?)?;
    st.write("normality.csv", normality.finish()?)?;
    st.commit()
}

pub fn mix(run: &Run, only: Option<Method>) -> Result<Vec<PathBuf>> {
    let cfg = &run.cfg;
    let real = load_real(run)?;
    let sets = load_sets(run, only)?;
    let spec = cfg.spec()?;
    let seed = cfg.seed();
    let named: Vec<(&str, &SyntheticSet)> = sets.iter().map(|(m, s)| (m.name(), s)).collect();
    let points = mixing_curve(
        &spec,
        &real.train,
        &real.test,
        &named,
        &cfg.list_usize("mix.ks")?,
        &cfg.list_u64("eval.seeds")?,
        &cfg.eval_train(seed)?,
    )?;
    let mut clip = Table::new(&["method", "unclipped", "clipped", "clipped_fraction", "delta"])?;
    for (m, set) in &sets {
        let d = clip_delta(&spec, set, &real.test, &cfg.eval_train(seed)?, seed)?;
        clip.row(cells![m.name(), num(d.unclipped), num(d.clipped), num(d.clipped_fraction), num(d.delta())])?;
    }
    let mut st = run.stage(MIX)?;
    st.write("mix_curve.csv", mix_curve_csv(&points))?;
    st.write("clipping.csv", clip.finish()?)?;
    st.commit()
}

pub fn recognize(run: &Run, only: Option<Method>) -> Result<Vec<PathBuf>> {
    let cfg = &run.cfg;
    let real = load_real(run)?;
    let sets = load_sets(run, only)?;
    let spec = cfg.spec()?;
    let owned: Vec<(String, Dataset)> = sets.iter().map(|(m, s)| (m.name().to_string(), s.as_dataset())).collect();
    let named: Vec<(&str, &Dataset)> = owned.iter().map(|(n, d)| (n.as_str(), d)).collect();
    let tc = TrainConfig { record_every: cfg.usize("recognize.record_every")?, ..cfg.train()? };
    let r = recognition_over_time(
        &spec,
        &real.train,
        &real.test,
        &named,
        &tc,
        cfg.seed(),
        cfg.f64("recognize.tolerance")?,
    )?;
    let mut plateaus = Table::new(&["set", "plateau_iteration"])?;
    for (name, it) in &r.plateaus {
        plateaus.row(cells![name, it])?;
    }
    let mut st = run.stage(RECOGNIZE)?;
    st.write("recognition.csv", r.to_csv())?;
    st.write("plateaus.csv", plateaus.finish()?)?;
    st.commit()
}

pub fn search(run: &Run, only: Option<Method>) -> Result<Vec<PathBuf>> {
    let cfg = &run.cfg;
    let real = load_real(run)?;
    let sets = load_sets(run, only)?;
    let specs = cfg.search_specs()?;
    let names: Vec<&str> = cfg.str("search.models").split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
    let trials = cfg.usize("search.trials")?;
    let mut log_t = Table::new(&[
        "method",
        "model",
        "trial",
        "lr",
        "momentum",
        "weight_decay",
        "optimizer",
        "iterations",
        "clip",
        "accuracy",
    ])?;
    let mut best = Table::new(&["method", "model", "best_accuracy"])?;
    for (m, set) in &sets {
        log::info!("hyperparameter search on {}", m.name());
        let r = hyperparameter_search(&specs, &set.as_dataset(), &real.test, trials, cfg.seed())?;
        for t in &r.trials {
            log_t.row(cells![
                m.name(),
                names[t.spec_index],
                t.trial,
                num(t.lr),
                num(t.momentum),
                num(t.weight_decay),
                t.optimizer.name(),
                t.iterations,
                u8::from(t.clip),
                opt(t.accuracy)
            ])?;
        }
        for (name, b) in names.iter().zip(&r.best) {
            best.row(cells![m.name(), name, num(*b)])?;
        }
    }
    let mut st = run.stage(SEARCH)?;
    st.write("trials.csv", log_t.finish()?)?;
    st.write("best.csv", best.finish()?)?;
    st.commit()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_quotes_and_round_trips_floats() {
        let mut t = Table::new(&["a", "b"]).unwrap();
        t.row(cells!["x;y=1,2", num(0.1)]).unwrap();
        assert_eq!(t.finish().unwrap(), "a,b\n\"x;y=1,2\",0.1\n");
    }

    #[test]
    fn stratified_ids_take_each_class_evenly() {
        let blobs = generate_blobs(&ddlab_core::data::BlobConfig {
            num_classes: 3,
            train_per_class: 4,
            test_per_class: 4,
            image_shape: [1, 8, 8],
            seed: 0,
            noise_sigma: 0.5,
        })
        .unwrap();
        let ids = stratified_ids(&blobs.test, 6);
        let d = blobs.test.select(&ids).unwrap();
        assert_eq!(d.class_counts(), vec![2, 2, 2]);
        assert_eq!(stratified_ids(&blobs.test, 100).len(), 12);
    }
}
