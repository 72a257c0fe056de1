//! Renders every figure from the CSV outputs of the other subcommands.
//! Rendering depends only on those files, so re-running is byte-identical.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use ddlab_core::stats::{kde, Bandwidth};

use crate::commands::{AGREE, CURVATURE, DISTILL, INFLUENCE, LANDSCAPE, MIX, RECOGNIZE, REPORT, SEARCH, TRAIN};
use crate::plot::{heatmaps, Chart, HeatPanel, Mark};
use crate::store::Run;

/// Log densities are floored here so empty spectral regions stay on the axis.
const LOG_FLOOR: f64 = 1e-8;

/// Rows sharing a group key.
type Group<'a> = (String, Vec<&'a Vec<String>>);

struct Csv {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Csv {
    fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
        let header = r.headers()?.iter().map(str::to_string).collect();
        let rows = r
            .records()
            .map(|rec| Ok(rec?.iter().map(str::to_string).collect()))
            .collect::<Result<Vec<Vec<String>>>>()
            .with_context(|| format!("parsing {}", path.display()))?;
        Ok(Csv { header, rows })
    }

    fn idx(&self, name: &str) -> Result<usize> {
        self.header.iter().position(|h| h == name).with_context(|| format!("missing column `{name}`"))
    }

    /// Rows grouped by the joined values of `keys`, in first-appearance order.
    fn groups(&self, keys: &[&str]) -> Result<Vec<Group<'_>>> {
        let ix: Vec<usize> = keys.iter().map(|k| self.idx(k)).collect::<Result<_>>()?;
        let mut order: Vec<String> = Vec::new();
        let mut map: BTreeMap<String, Vec<&Vec<String>>> = BTreeMap::new();
        for row in &self.rows {
            let key = ix.iter().map(|&i| row[i].as_str()).collect::<Vec<_>>().join("/");
            if !map.contains_key(&key) {
                order.push(key.clone());
            }
            map.entry(key).or_default().push(row);
        }
        Ok(order
            .into_iter()
            .map(|k| {
                let v = map.remove(&k).unwrap_or_default();
                (k, v)
            })
            .collect())
    }

    fn xy(&self, rows: &[&Vec<String>], x: &str, y: &str) -> Result<Vec<(f64, f64)>> {
        let (xi, yi) = (self.idx(x)?, self.idx(y)?);
        Ok(rows.iter().map(|r| (val(&r[xi]), val(&r[yi]))).collect())
    }

    /// One line/point series per group.
    fn chart(&self, mut chart: Chart, keys: &[&str], x: &str, y: &str, mark: Mark) -> Result<Chart> {
        for (name, rows) in self.groups(keys)? {
            chart = chart.add(&name, self.xy(&rows, x, y)?, mark);
        }
        Ok(chart)
    }

    /// Bars over the categories in column `cat`, one series per value column.
    fn bars(&self, mut chart: Chart, cat: &[&str], values: &[&str]) -> Result<Chart> {
        let groups = self.groups(cat)?;
        let names: Vec<String> = groups.iter().map(|g| g.0.clone()).collect();
        for v in values {
            let vi = self.idx(v)?;
            let pts = groups.iter().enumerate().map(|(i, (_, rows))| (i as f64, val(&rows[0][vi]))).collect();
            chart = chart.add(v, pts, Mark::Bars);
        }
        Ok(chart.categories(names))
    }
}

/// Empty cells (undefined statistics) become NaN and are skipped by the plots.
fn val(s: &str) -> f64 {
    s.parse().unwrap_or(f64::NAN)
}

fn log_density(pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.into_iter().map(|(x, d)| (x, d.max(LOG_FLOOR).ln())).collect()
}

/// Every input the report reads, relative to the run directory.
pub fn required_inputs(run: &Run) -> Result<Vec<PathBuf>> {
    let mut rel: Vec<(&str, String)> = vec![(DISTILL, "pixels_real.csv".into())];
    for m in run.cfg.methods()? {
        rel.push((DISTILL, format!("pixels_{}.csv", m.name())));
    }
    for (sub, files) in [
        (TRAIN, &["inverse.csv", "projection.csv", "decomposition.csv", "additional.csv"][..]),
        (MIX, &["mix_curve.csv", "clipping.csv"]),
        (AGREE, &["agreements.csv", "normality.csv"]),
        (
            INFLUENCE,
            &["feature_distance.csv", "seed_pairs.csv", "background_pairs.csv", "pr_curves.csv", "class_influence.csv"],
        ),
        (RECOGNIZE, &["recognition.csv"]),
        (CURVATURE, &["trace.csv", "density.csv", "distilled_trace.csv", "distilled_density.csv", "ipc_sweep.csv"]),
        (LANDSCAPE, &["grid.csv"]),
        (SEARCH, &["trials.csv"]),
    ] {
        rel.extend(files.iter().map(|f| (sub, f.to_string())));
    }
    Ok(rel.into_iter().map(|(sub, f)| run.sub(sub).join(f)).collect())
}

pub fn render(run: &Run) -> Result<Vec<PathBuf>> {
    run.require(&required_inputs(run)?)?;
    let read = |sub: &str, f: &str| Csv::read(&run.sub(sub).join(f));
    let mut st = run.stage(REPORT)?;

    let inv = read(TRAIN, "inverse.csv")?;
    let mut c = Chart::new("Accuracy of real-trained networks", "architecture", "accuracy");
    let archs: Vec<String> = inv.groups(&["architecture"])?.into_iter().map(|g| g.0).collect();
    let a_idx = inv.idx("architecture")?;
    let acc = inv.idx("accuracy")?;
    for (set, rows) in inv.groups(&["set"])? {
        let pts = rows
            .iter()
            .map(|r| (archs.iter().position(|a| *a == r[a_idx]).unwrap_or(0) as f64, val(&r[acc])))
            .collect();
        c = c.add(&set, pts, Mark::Bars);
    }
    st.write("fig02_inverse.svg", c.categories(archs).render())?;

    let proj = read(TRAIN, "projection.csv")?;
    let c = proj.chart(
        Chart::new("Penultimate features, first two components", "pc1", "pc2"),
        &["set"],
        "pc1",
        "pc2",
        Mark::Points,
    )?;
    st.write("fig02_projection.svg", c.render())?;

    let mut c = Chart::new("Pixel value density", "pixel value", "density");
    let mut pixel_files = vec!["pixels_real.csv".to_string()];
    pixel_files.extend(run.cfg.methods()?.iter().map(|m| format!("pixels_{}.csv", m.name())));
    for f in &pixel_files {
        let t = read(DISTILL, f)?;
        for (name, rows) in t.groups(&["set"])? {
            c = c.add(&name, t.xy(&rows, "x", "density")?, Mark::Line);
        }
    }
    st.write("fig03_pixel_density.svg", c.render())?;

    let mix = read(MIX, "mix_curve.csv")?;
    let c = mix.chart(
        Chart::new("Distilled images mixed into real subsets", "real images added per class", "test accuracy"),
        &["method"],
        "k",
        "mean",
        Mark::Line,
    )?;
    st.write("fig03_mixing.svg", c.render())?;

    let clip = read(MIX, "clipping.csv")?;
    let c = clip.bars(
        Chart::new("Clipping distilled pixels to the valid range", "method", "test accuracy"),
        &["method"],
        &["unclipped", "clipped"],
    )?;
    st.write("fig03_clipping.svg", c.render())?;

    let ag = read(AGREE, "agreements.csv")?;
    let mut c = Chart::new("Prediction agreement with the distilled model", "agreements", "density");
    let ai = ag.idx("agreement")?;
    for (name, rows) in ag.groups(&["method", "pool"])? {
        let samples: Vec<f64> = rows.iter().map(|r| val(&r[ai])).collect();
        if let Ok(g) = kde(&samples, Bandwidth::Silverman) {
            c = c.add(&name, g.x.into_iter().zip(g.density).collect(), Mark::Line);
        }
    }
    st.write("fig04_agreement.svg", c.render())?;

    let fd = read(INFLUENCE, "feature_distance.csv")?;
    let c = fd.chart(
        Chart::new("Influence against feature distance", "distilled image", "pearson correlation"),
        &["method"],
        "distilled_id",
        "pearson",
        Mark::Points,
    )?;
    st.write("fig04_feature_distance.svg", c.render())?;

    let rec = read(RECOGNIZE, "recognition.csv")?;
    let c = rec.chart(
        Chart::new("Accuracy during real-data training", "iteration", "accuracy"),
        &["set"],
        "iteration",
        "accuracy",
        Mark::Line,
    )?;
    st.write("fig05_recognition.svg", c.render())?;

    let sp = read(INFLUENCE, "seed_pairs.csv")?;
    let c = sp.chart(
        Chart::new("Influence under two training seeds", "seed a", "seed b"),
        &["method"],
        "seed_a",
        "seed_b",
        Mark::Points,
    )?;
    st.write("fig06_seed_consistency.svg", c.render())?;

    let bg = read(INFLUENCE, "background_pairs.csv")?;
    let c = bg.chart(
        Chart::new("Influence with real background data", "distilled only", "with background"),
        &["method"],
        "synthetic_only",
        "with_background",
        Mark::Points,
    )?;
    st.write("fig06_background.svg", c.render())?;

    let tr = read(CURVATURE, "trace.csv")?;
    let c = tr.chart(
        Chart::new("Hessian trace along real-data training", "iteration", "trace (smoothed)"),
        &["set"],
        "iteration",
        "smoothed",
        Mark::Line,
    )?;
    st.write("fig07_trace.svg", c.render())?;

    let de = read(CURVATURE, "density.csv")?;
    let mut c = Chart::new("Hessian spectral density at the end of training", "eigenvalue", "log density");
    for (name, rows) in de.groups(&["set"])? {
        c = c.add(&name, log_density(de.xy(&rows, "lambda", "density")?), Mark::Line);
    }
    st.write("fig07_spectrum.svg", c.render())?;

    let pr = read(INFLUENCE, "pr_curves.csv")?;
    let c = pr.chart(
        Chart::new("Attribute precision-recall from influence ranking", "recall", "precision"),
        &["method", "distilled_id", "attribute", "value"],
        "recall",
        "precision",
        Mark::Line,
    )?;
    st.write("fig08_pr_curves.svg", c.render())?;

    let dec = read(TRAIN, "decomposition.csv")?;
    let mut c = Chart::new("Test loss increase by prediction outcome", "iteration", "loss increase");
    for (name, rows) in dec.groups(&["method"])? {
        c = c.add(&format!("{name} correct"), dec.xy(&rows, "iteration", "correct_loss")?, Mark::Line);
        c = c.add(&format!("{name} incorrect"), dec.xy(&rows, "iteration", "incorrect_loss")?, Mark::Line);
    }
    st.write("fig09_decomposition.svg", c.render())?;

    let grid = read(LANDSCAPE, "grid.csv")?;
    let li = grid.idx("loss")?;
    let panels: Vec<HeatPanel> = grid
        .groups(&["method", "set"])?
        .into_iter()
        .map(|(name, rows)| HeatPanel {
            title: name,
            resolution: (rows.len() as f64).sqrt().round() as usize,
            values: rows.iter().map(|r| val(&r[li])).collect(),
        })
        .collect();
    st.write("fig10_landscape.svg", heatmaps("Loss on the init/real/distilled plane", "a", "b", &panels))?;

    let dt = read(CURVATURE, "distilled_trace.csv")?;
    let c = dt.chart(
        Chart::new("Hessian trace along distilled-data training", "iteration", "trace (smoothed)"),
        &["method", "set"],
        "iteration",
        "smoothed",
        Mark::Line,
    )?;
    st.write("fig11_distilled_trace.svg", c.render())?;

    let dd = read(CURVATURE, "distilled_density.csv")?;
    let mut c = Chart::new("Spectral density along distilled-data training", "eigenvalue", "log density");
    for (name, rows) in dd.groups(&["method", "iteration", "set"])? {
        c = c.add(&name, log_density(dd.xy(&rows, "lambda", "density")?), Mark::Line);
    }
    st.write("fig11_distilled_spectrum.svg", c.render())?;

    let sw = read(CURVATURE, "ipc_sweep.csv")?;
    let c = sw.chart(
        Chart::new("Hessian trace by images per class", "iteration", "trace (smoothed)"),
        &["ipc"],
        "iteration",
        "smoothed",
        Mark::Line,
    )?;
    st.write("fig12_ipc_sweep.svg", c.render())?;

    let no = read(AGREE, "normality.csv")?;
    let c = no.bars(
        Chart::new("Normality of agreement counts", "method/pool", "value"),
        &["method", "pool"],
        &["statistic", "p_value"],
    )?;
    st.write("fig13_agreement_normality.svg", c.render())?;

    let ci = read(INFLUENCE, "class_influence.csv")?;
    let c = ci.bars(
        Chart::new("Mean influence by class membership", "method/distilled image", "mean influence"),
        &["method", "distilled_id"],
        &["in_class_mean", "out_class_mean"],
    )?;
    st.write("fig14_class_influence.svg", c.render())?;

    let se = read(SEARCH, "trials.csv")?;
    let c = se.chart(
        Chart::new("Hyperparameter search on distilled data", "trial", "test accuracy"),
        &["method", "model"],
        "trial",
        "accuracy",
        Mark::Points,
    )?;
    st.write("fig15_search.svg", c.render())?;

    let ad = read(TRAIN, "additional.csv")?;
    let c =
        ad.bars(Chart::new("Accuracy change from extra training", "set", "accuracy delta"), &["set"], &["delta"])?;
    st.write("fig17_additional_training.svg", c.render())?;

    st.commit()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn groups_keep_first_appearance_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        std::fs::write(&p, "k,x,y\nb,1,2\na,3,\nb,5,6\n").unwrap();
        let t = Csv::read(&p).unwrap();
        let g = t.groups(&["k"]).unwrap();
        assert_eq!(g.iter().map(|g| g.0.as_str()).collect::<Vec<_>>(), ["b", "a"]);
        let pts = t.xy(&g[1].1, "x", "y").unwrap();
        assert_eq!(pts[0].0, 3.0);
        assert!(pts[0].1.is_nan());
        assert!(t.idx("z").is_err());
    }
}
