//! Exact leave-one-out influence of training points on test losses, and the
//! analyses built on influence matrices.

use std::fmt::Write as _;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::data::Dataset;
use crate::error::{CoreError, Result};
use crate::model::{InitMode, ModelSpec, ParamVector};
use crate::stats;
use crate::train::{evaluate, train, Batch, TrainConfig};

/// Training protocol shared by every retraining: same initialisation and
/// full-batch deterministic gradient descent.
#[derive(Clone, Debug, PartialEq)]
pub struct InfluenceConfig {
    pub train: TrainConfig,
    pub init: InitMode,
    pub init_seed: u64,
}

impl InfluenceConfig {
    pub fn new(iterations: usize, init_seed: u64) -> Self {
        InfluenceConfig {
            train: TrainConfig::full_batch(iterations, init_seed),
            init: InitMode::XavierUniform,
            init_seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.train.batch != Batch::Full {
            return Err(CoreError::invalid("influence config", "retraining must be full batch"));
        }
        self.train.validate()
    }

    fn digest(&self, spec: &ModelSpec) -> [u8; 32] {
        let text = format!(
            "{};{};init={:?};init_seed={}",
            spec.canonical(),
            self.train.canonical(),
            self.init,
            self.init_seed
        );
        Sha256::digest(text.as_bytes()).into()
    }

    /// Final parameters after training on `data`.
    pub fn fit(&self, spec: &ModelSpec, data: &Dataset) -> Result<ParamVector> {
        let init = spec.init(self.init, self.init_seed);
        let cfg = TrainConfig { record_every: self.train.iterations.max(1), ..self.train.clone() };
        Ok(train(spec, &init, data, &cfg, None)?.final_params().clone())
    }
}

/// Row `d`, column `t` holds the influence of training point `d` on test point `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct InfluenceMatrix {
    pub values: Vec<f64>,
    pub distilled_ids: Vec<usize>,
    pub test_ids: Vec<usize>,
    pub training_digest: [u8; 32],
}

impl InfluenceMatrix {
    pub fn rows(&self) -> usize {
        self.distilled_ids.len()
    }

    pub fn cols(&self) -> usize {
        self.test_ids.len()
    }

    pub fn row(&self, d: usize) -> &[f64] {
        &self.values[d * self.cols()..(d + 1) * self.cols()]
    }

    pub fn get(&self, d: usize, t: usize) -> f64 {
        self.values[d * self.cols() + t]
    }

    /// Header of test ids, then one row per distilled id.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("distilled_id");
        for t in &self.test_ids {
            let _ = write!(s, ",{t}");
        }
        s.push('\n');
        for (d, id) in self.distilled_ids.iter().enumerate() {
            let _ = write!(s, "{id}");
            for v in self.row(d) {
                let _ = write!(s, ",{v:?}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str, training_digest: [u8; 32]) -> Result<Self> {
        let what = "influence csv";
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| CoreError::format(what, "empty file"))?;
        let mut cols = header.split(',');
        if cols.next() != Some("distilled_id") {
            return Err(CoreError::format(what, "missing header"));
        }
        let test_ids = cols
            .map(|c| c.parse().map_err(|_| CoreError::format(what, format!("bad test id {c:?}"))))
            .collect::<Result<Vec<usize>>>()?;
        let mut distilled_ids = Vec::new();
        let mut values = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let mut f = line.split(',');
            let bad = || CoreError::format(what, format!("bad row {line:?}"));
            distilled_ids.push(f.next().ok_or_else(bad)?.parse().map_err(|_| bad())?);
            let row: Vec<f64> = f.map(|v| v.parse().map_err(|_| bad())).collect::<Result<_>>()?;
            if row.len() != test_ids.len() || row.iter().any(|v| !v.is_finite()) {
                return Err(bad());
            }
            values.extend(row);
        }
        Ok(InfluenceMatrix { values, distilled_ids, test_ids, training_digest })
    }
}

fn test_losses(spec: &ModelSpec, params: &ParamVector, test: &Dataset, test_ids: &[usize]) -> Result<Vec<f64>> {
    Ok(evaluate(spec, params, &test.select(test_ids)?)?.losses)
}

fn check_ids(test: &Dataset, test_ids: &[usize]) -> Result<()> {
    if let Some(&t) = test_ids.iter().find(|&&t| t >= test.len()) {
        return Err(CoreError::invalid("influence", format!("test id {t} out of range")));
    }
    Ok(())
}

/// `I[d, t] = L(x_t; theta_{-d}) - L(x_t; theta)` where `theta` is trained on
/// all of `train_set` and `theta_{-d}` on all but point `d`, from the same
/// initialisation. Retrainings run in parallel.
pub fn loo_influence(
    spec: &ModelSpec,
    train_set: &Dataset,
    test: &Dataset,
    test_ids: &[usize],
    cfg: &InfluenceConfig,
) -> Result<InfluenceMatrix> {
    cfg.validate()?;
    check_ids(test, test_ids)?;
    let n = train_set.len();
    if n < 2 {
        return Err(CoreError::invalid("influence", "leave-one-out needs at least two training points"));
    }
    let distilled_ids: Vec<usize> = (0..n).collect();
    let training_digest = cfg.digest(spec);
    if test_ids.is_empty() {
        return Ok(InfluenceMatrix { values: Vec::new(), distilled_ids, test_ids: Vec::new(), training_digest });
    }
    let full = test_losses(spec, &cfg.fit(spec, train_set)?, test, test_ids)?;
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|d| {
            let keep: Vec<usize> = (0..n).filter(|&i| i != d).collect();
            let params = cfg.fit(spec, &train_set.select(&keep)?)?;
            let loo = test_losses(spec, &params, test, test_ids)?;
            Ok(loo.iter().zip(&full).map(|(a, b)| a - b).collect())
        })
        .collect::<Result<_>>()?;
    Ok(InfluenceMatrix { values: rows.concat(), distilled_ids, test_ids: test_ids.to_vec(), training_digest })
}

/// `I[d, t] = L(x_t; theta_B) - L(x_t; theta_{B+d})` with `B` the real
/// background set; positive values mean adding `d` helps.
pub fn real_background_influence(
    spec: &ModelSpec,
    train_set: &Dataset,
    background: &Dataset,
    test: &Dataset,
    test_ids: &[usize],
    cfg: &InfluenceConfig,
) -> Result<InfluenceMatrix> {
    cfg.validate()?;
    check_ids(test, test_ids)?;
    let n = train_set.len();
    let distilled_ids: Vec<usize> = (0..n).collect();
    let training_digest = cfg.digest(spec);
    if test_ids.is_empty() {
        return Ok(InfluenceMatrix { values: Vec::new(), distilled_ids, test_ids: Vec::new(), training_digest });
    }
    let base = test_losses(spec, &cfg.fit(spec, background)?, test, test_ids)?;
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|d| {
            let with = background.concat(&train_set.select(&[d])?)?;
            let added = test_losses(spec, &cfg.fit(spec, &with)?, test, test_ids)?;
            Ok(base.iter().zip(&added).map(|(a, b)| a - b).collect())
        })
        .collect::<Result<_>>()?;
    Ok(InfluenceMatrix { values: rows.concat(), distilled_ids, test_ids: test_ids.to_vec(), training_digest })
}

/// Row-wise Pearson correlation of two equally shaped matrices; `None` where
/// a row is constant.
pub fn seed_consistency(a: &InfluenceMatrix, b: &InfluenceMatrix) -> Result<Vec<Option<f64>>> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(CoreError::invalid("seed consistency", "matrices differ in shape"));
    }
    Ok((0..a.rows()).map(|d| stats::pearson(a.row(d), b.row(d)).ok()).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrCurve {
    /// (recall, precision) after each ranked item.
    pub points: Vec<(f64, f64)>,
    pub average_precision: f64,
}

/// Precision-recall sweep over items ranked by descending score (ties keep
/// input order). Average precision is the mean of precision at each positive.
pub fn attribute_pr_curve(scores: &[f64], positive: &[bool]) -> Result<PrCurve> {
    if scores.len() != positive.len() {
        return Err(CoreError::invalid("pr curve", "scores and labels differ in length"));
    }
    let total = positive.iter().filter(|&&p| p).count();
    if total == 0 {
        return Err(CoreError::invalid("pr curve", "attribute has no positives"));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]));
    let mut hits = 0;
    let mut ap = 0.0;
    let mut points = Vec::with_capacity(order.len());
    for (k, &i) in order.iter().enumerate() {
        if positive[i] {
            hits += 1;
            ap += hits as f64 / (k + 1) as f64;
        }
        points.push((hits as f64 / total as f64, hits as f64 / (k + 1) as f64));
    }
    Ok(PrCurve { points, average_precision: ap / total as f64 })
}

/// PR curve of one influence row restricted to test images of `class`, with
/// positives where the attribute equals `value`.
pub fn attribute_pr_for_class(
    row: &[f64],
    attribute: &[i64],
    value: i64,
    test_labels: &[usize],
    class: usize,
) -> Result<PrCurve> {
    let idx: Vec<usize> = (0..row.len()).filter(|&t| test_labels[t] == class).collect();
    let scores: Vec<f64> = idx.iter().map(|&t| row[t]).collect();
    let pos: Vec<bool> = idx.iter().map(|&t| attribute[t] == value).collect();
    attribute_pr_curve(&scores, &pos)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassInfluence {
    pub in_class_mean: Option<f64>,
    pub out_class_mean: Option<f64>,
    /// Sample variance of the whole row.
    pub variance: Option<f64>,
    /// Out-of-class images among the `k` most positively influenced.
    pub out_class_in_top_k: usize,
}

pub fn class_influence_stats(
    m: &InfluenceMatrix,
    distilled_labels: &[usize],
    test_labels: &[usize],
    k: usize,
) -> Result<Vec<ClassInfluence>> {
    if distilled_labels.len() != m.rows() || test_labels.len() != m.cols() {
        return Err(CoreError::invalid("class influence", "labels do not cover the matrix"));
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| stats::mean(v));
    Ok((0..m.rows())
        .map(|d| {
            let row = m.row(d);
            let c = distilled_labels[d];
            let (inside, outside): (Vec<(usize, f64)>, Vec<(usize, f64)>) =
                row.iter().copied().enumerate().partition(|&(t, _)| test_labels[t] == c);
            let inside: Vec<f64> = inside.into_iter().map(|p| p.1).collect();
            let outside: Vec<f64> = outside.into_iter().map(|p| p.1).collect();
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&i, &j| row[j].total_cmp(&row[i]));
            let out_class_in_top_k = order.iter().take(k).filter(|&&t| test_labels[t] != c).count();
            ClassInfluence {
                in_class_mean: mean(&inside),
                out_class_mean: mean(&outside),
                variance: (row.len() >= 2).then(|| stats::sample_variance(row)),
                out_class_in_top_k,
            }
        })
        .collect())
}

/// Per training point, Pearson correlation between its influence row and the
/// Euclidean distance from it to each test image in the penultimate feature
/// space of `params`.
pub fn influence_vs_feature_distance(
    m: &InfluenceMatrix,
    spec: &ModelSpec,
    params: &ParamVector,
    train_set: &Dataset,
    test: &Dataset,
) -> Result<Vec<Option<f64>>> {
    if train_set.len() != m.rows() {
        return Err(CoreError::invalid("feature distance", "training set does not match the matrix rows"));
    }
    let fd = spec.feature_dim();
    let fs = spec.features(params, train_set.images())?;
    let ft = spec.features(params, test.select(&m.test_ids)?.images())?;
    Ok((0..m.rows())
        .map(|d| {
            let a = &fs.data()[d * fd..(d + 1) * fd];
            let dist: Vec<f64> = ft
                .data()
                .chunks(fd)
                .map(|b| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
                .collect();
            stats::pearson(m.row(d), &dist).ok()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: usize, values: Vec<f64>) -> InfluenceMatrix {
        let cols = values.len() / rows;
        InfluenceMatrix {
            values,
            distilled_ids: (0..rows).collect(),
            test_ids: (0..cols).collect(),
            training_digest: [0; 32],
        }
    }

    #[test]
    fn seed_consistency_examples() {
        let a = matrix(2, vec![1.0, 2.0, 4.0, 0.5, -1.0, 3.0]);
        let neg = matrix(2, a.values.iter().map(|v| -v).collect());
        assert!(seed_consistency(&a, &a).unwrap().iter().all(|r| (r.unwrap() - 1.0).abs() < 1e-12));
        assert!(seed_consistency(&a, &neg).unwrap().iter().all(|r| (r.unwrap() + 1.0).abs() < 1e-12));
        let flat = matrix(2, vec![1.0, 1.0, 1.0, 0.5, -1.0, 3.0]);
        assert_eq!(seed_consistency(&flat, &a).unwrap()[0], None);
    }

    #[test]
    fn pr_examples() {
        let c = attribute_pr_curve(&[0.9, 0.8, 0.1, 0.0], &[true, true, false, false]).unwrap();
        assert_eq!(c.average_precision, 1.0);
        // ranking: + - + - - +  -> precisions at hits 1, 2/3, 3/6
        let c = attribute_pr_curve(&[6.0, 5.0, 4.0, 3.0, 2.0, 1.0], &[true, false, true, false, false, true]).unwrap();
        assert!((c.average_precision - (1.0 + 2.0 / 3.0 + 0.5) / 3.0).abs() < 1e-15);
        assert_eq!(c.points[1], (1.0 / 3.0, 0.5));
        assert!(attribute_pr_curve(&[1.0], &[false]).is_err());
    }

    #[test]
    fn class_stats_fixture() {
        // 3 distilled x 4 test
        let m = matrix(3, vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0, 0.0, -1.0, 5.0, 2.0, 0.0]);
        let s = class_influence_stats(&m, &[0, 1, 1], &[0, 0, 1, 1], 2).unwrap();
        assert_eq!(s[0].in_class_mean, Some(1.5));
        assert_eq!(s[0].out_class_mean, Some(3.5));
        assert_eq!(s[0].out_class_in_top_k, 2);
        assert!((s[0].variance.unwrap() - 5.0 / 3.0).abs() < 1e-15);
        assert_eq!(s[1].in_class_mean, Some(0.0));
        assert_eq!(s[2].in_class_mean, Some(1.0));
        assert_eq!(s[2].out_class_mean, Some(2.0));
        // top 2: t1 (5.0, class 0 -> out), t2 (2.0, class 1 -> in)
        assert_eq!(s[2].out_class_in_top_k, 1);
        let single = class_influence_stats(&matrix(1, vec![1.0, 2.0]), &[0], &[0, 0], 10).unwrap();
        assert_eq!(single[0].out_class_mean, None);
    }

    #[test]
    fn csv_roundtrip() {
        let m = matrix(2, vec![0.1, -2.5e-7, 3.0, 1e300, 0.0, -0.0]);
        let back = InfluenceMatrix::from_csv(&m.to_csv(), [0; 32]).unwrap();
        assert_eq!(back, m);
    }
}
