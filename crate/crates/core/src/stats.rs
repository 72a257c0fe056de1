//! Small statistics toolkit shared by the analyses.

use crate::error::{CoreError, Result};

pub fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Unbiased sample variance (`n - 1` denominator).
pub fn sample_variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

pub fn sample_std(x: &[f64]) -> f64 {
    sample_variance(x).sqrt()
}

/// Product-moment correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(CoreError::invalid("pearson", format!("lengths {} and {}", x.len(), y.len())));
    }
    let (mx, my) = (mean(x), mean(y));
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(CoreError::ZeroVariance("pearson"));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// `P(X <= x)` for `X ~ Normal(mu, sigma)`.
pub fn normal_cdf(x: f64, mu: f64, sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(CoreError::invalid("normal_cdf", format!("sigma must be positive, got {sigma}")));
    }
    let z = (x - mu) / sigma;
    Ok(0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2))
}

/// Silverman's rule of thumb, `1.06 * std * n^(-1/5)`.
pub fn silverman_bandwidth(samples: &[f64]) -> f64 {
    1.06 * sample_std(samples) * (samples.len() as f64).powf(-0.2)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bandwidth {
    Silverman,
    Fixed(f64),
}

#[derive(Clone, Debug)]
pub struct DensityGrid {
    pub bandwidth: f64,
    pub x: Vec<f64>,
    pub density: Vec<f64>,
}

impl DensityGrid {
    /// Trapezoid-rule integral of the density.
    pub fn integral(&self) -> f64 {
        trapezoid(&self.x, &self.density)
    }
}

pub const KDE_GRID_POINTS: usize = 512;

/// Gaussian kernel density estimate on a 512-point grid spanning the data
/// plus three bandwidths on either side.
pub fn kde(samples: &[f64], bandwidth: Bandwidth) -> Result<DensityGrid> {
    if samples.len() < 2 {
        return Err(CoreError::invalid("kde", "need at least two samples"));
    }
    let h = match bandwidth {
        Bandwidth::Silverman => silverman_bandwidth(samples),
        Bandwidth::Fixed(h) => h,
    };
    if !(h > degenerate_bandwidth(samples)) {
        return Err(CoreError::ZeroVariance("kde"));
    }
    Ok(kde_with(samples, h, 3.0))
}

/// Bandwidths at or below this are rounding noise from constant data.
pub(crate) fn degenerate_bandwidth(samples: &[f64]) -> f64 {
    1e-12 * (1.0 + samples.iter().fold(0.0f64, |m, v| m.max(v.abs())))
}

/// KDE with an explicit positive bandwidth and grid margin of `extent`
/// bandwidths; no variance requirement.
pub(crate) fn kde_with(samples: &[f64], h: f64, extent: f64) -> DensityGrid {
    let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min) - extent * h;
    let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + extent * h;
    let step = (hi - lo) / (KDE_GRID_POINTS - 1) as f64;
    let x: Vec<f64> = (0..KDE_GRID_POINTS).map(|i| lo + step * i as f64).collect();
    let norm = 1.0 / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let density =
        x.iter().map(|&xi| samples.iter().map(|s| (-0.5 * ((xi - s) / h).powi(2)).exp()).sum::<f64>() * norm).collect();
    DensityGrid { bandwidth: h, x, density }
}

pub fn trapezoid(x: &[f64], y: &[f64]) -> f64 {
    x.windows(2).zip(y.windows(2)).map(|(xs, ys)| 0.5 * (xs[1] - xs[0]) * (ys[0] + ys[1])).sum()
}

/// Centered moving average; windows are truncated at the edges.
pub fn moving_average(series: &[f64], window: usize) -> Result<Vec<f64>> {
    if window == 0 || window.is_multiple_of(2) {
        return Err(CoreError::invalid("moving_average", format!("window must be odd and positive, got {window}")));
    }
    if window > series.len() {
        return Err(CoreError::invalid(
            "moving_average",
            format!("window {window} exceeds series length {}", series.len()),
        ));
    }
    let half = window / 2;
    Ok((0..series.len())
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half + 1).min(series.len());
            mean(&series[lo..hi])
        })
        .collect())
}

/// Counts of `values` in `bins` equal-width bins over `[lo, hi]`; values
/// outside the range are ignored, `hi` falls in the last bin.
pub fn histogram(values: &[f64], bins: usize, lo: f64, hi: f64) -> Vec<usize> {
    let mut counts = vec![0; bins];
    let width = (hi - lo) / bins as f64;
    for &v in values {
        if v < lo || v > hi {
            continue;
        }
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pearson_fixtures() {
        let x = [1.0, 2.0, 3.0, 4.0];
        assert!((pearson(&x, &x).unwrap() - 1.0).abs() < 1e-15);
        let neg: Vec<f64> = x.iter().map(|v| -v).collect();
        assert!((pearson(&x, &neg).unwrap() + 1.0).abs() < 1e-15);
        // {(1,2),(2,1),(3,4),(4,3)}: cov 1.0, var 1.25 each
        let r = pearson(&x, &[2.0, 1.0, 4.0, 3.0]).unwrap();
        assert!((r - 0.6).abs() < 1e-12);
    }

    #[test]
    fn pearson_zero_variance_is_error() {
        assert!(matches!(pearson(&[1.0, 1.0, 1.0], &[1.0, 2.0, 3.0]), Err(CoreError::ZeroVariance(_))));
        assert!(pearson(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn normal_cdf_table_values() {
        assert_eq!(normal_cdf(3.0, 3.0, 2.0).unwrap(), 0.5);
        assert!((normal_cdf(1.96, 0.0, 1.0).unwrap() - 0.975002).abs() < 1e-5);
        assert!((normal_cdf(90.0, 100.0, 10.0).unwrap() - 0.158655).abs() < 1e-5);
        assert!((normal_cdf(-3.0, 0.0, 1.0).unwrap() - 0.001350).abs() < 1e-5);
        assert!(normal_cdf(0.0, 0.0, 0.0).is_err());
        assert!(normal_cdf(0.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn normal_cdf_is_monotone() {
        let mut prev = 0.0;
        for i in -400..=400 {
            let p = normal_cdf(i as f64 * 0.02, 0.0, 1.0).unwrap();
            assert!(p >= prev);
            prev = p;
        }
    }

    #[test]
    fn moving_average_fixtures() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(moving_average(&s, 1).unwrap(), s.to_vec());
        assert_eq!(moving_average(&s, 3).unwrap(), vec![1.5, 2.0, 3.0, 4.0, 4.5]);
        assert_eq!(moving_average(&[7.0; 6], 5).unwrap(), vec![7.0; 6]);
        assert!(moving_average(&s, 2).is_err());
        assert!(moving_average(&s, 7).is_err());
    }

    #[test]
    fn kde_integrates_to_one_and_is_symmetric() {
        let samples: Vec<f64> = (0..50).map(|i| (i as f64 * 0.37).sin() * 2.0).collect();
        let d = kde(&samples, Bandwidth::Silverman).unwrap();
        assert_eq!(d.x.len(), KDE_GRID_POINTS);
        assert!((d.integral() - 1.0).abs() < 1e-3);
        assert!(d.density.iter().all(|&v| v >= 0.0));

        let sym = [-2.0, -1.0, -0.5, 0.5, 1.0, 2.0];
        let d = kde(&sym, Bandwidth::Silverman).unwrap();
        let n = d.density.len();
        for i in 0..n {
            assert!((d.density[i] - d.density[n - 1 - i]).abs() < 1e-9);
        }
    }

    #[test]
    fn kde_matches_kernel_sum_oracle() {
        let samples: Vec<f64> = (0..50).map(|i| ((i * 37 % 11) as f64) * 0.1).collect();
        let d = kde(&samples, Bandwidth::Fixed(0.2)).unwrap();
        for (x, y) in d.x.iter().zip(&d.density).step_by(37) {
            let mut acc = 0.0;
            for s in &samples {
                let u = (x - s) / 0.2;
                acc += (-u * u / 2.0).exp() / (2.0 * std::f64::consts::PI).sqrt() / 0.2;
            }
            acc /= samples.len() as f64;
            assert!((acc - y).abs() < 1e-12);
        }
    }

    #[test]
    fn kde_rejects_constant_samples() {
        assert!(matches!(kde(&[0.3, 0.3, 0.3], Bandwidth::Silverman), Err(CoreError::ZeroVariance(_))));
    }

    #[test]
    fn histogram_counts() {
        assert_eq!(histogram(&[0.0, 0.1, 0.5, 0.99, 1.0, 1.5], 2, 0.0, 1.0), vec![2, 3]);
    }
}
