//! Small numerical helpers shared by the estimators.
//!
//! All reductions go through [`pairwise_sum`] over index-ordered slices, which
//! keeps reported sums independent of the worker count.

use serde::{Deserialize, Serialize};

/// Point estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
}

impl Estimate {
    pub fn new(value: f64, stderr: f64) -> Self {
        Self { value, stderr }
    }

    /// |a - b| over the combined standard error (independence assumed).
    /// Two exactly equal estimates with zero error give 0.
    pub fn z_against(&self, other: &Estimate) -> f64 {
        let diff = (self.value - other.value).abs();
        let se = self.stderr.hypot(other.stderr);
        if diff == 0.0 {
            0.0
        } else if se == 0.0 {
            f64::INFINITY
        } else {
            diff / se
        }
    }
}

pub fn pairwise_sum(xs: &[f64]) -> f64 {
    const BLOCK: usize = 32;
    if xs.len() <= BLOCK {
        xs.iter().sum()
    } else {
        let mid = xs.len() / 2;
        pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    pairwise_sum(xs) / xs.len() as f64
}

/// Unbiased sample variance (two-pass).
pub fn variance(xs: &[f64]) -> f64 {
    let n = xs.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(xs);
    let dev: Vec<f64> = xs.iter().map(|x| (x - m) * (x - m)).collect();
    pairwise_sum(&dev) / (n - 1) as f64
}

/// Sample mean and the standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> Estimate {
    let n = xs.len();
    let m = mean(xs);
    let se = if n < 2 { 0.0 } else { (variance(xs) / n as f64).sqrt() };
    Estimate::new(m, se)
}

/// Mean of `xs` with a batch-means standard error over `batches` contiguous
/// blocks. Trailing elements that do not fill a block are dropped from the
/// error estimate but not from the mean.
pub fn batch_means(xs: &[f64], batches: usize) -> Estimate {
    let m = mean(xs);
    let len = xs.len() / batches.max(1);
    if batches < 2 || len == 0 {
        return Estimate::new(m, f64::NAN);
    }
    let bm: Vec<f64> = xs.chunks_exact(len).take(batches).map(mean).collect();
    Estimate::new(m, (variance(&bm) / batches as f64).sqrt())
}

/// Quantile by linear interpolation between order statistics (type 7).
pub fn quantile(xs: &[f64], p: f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    quantile_sorted(&v, p)
}

pub fn quantile_sorted(v: &[f64], p: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let h = (v.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

/// Result of a straight-line least-squares fit `y ≈ intercept + slope·x`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub slope_stderr: f64,
}

pub fn line_fit(xs: &[f64], ys: &[f64]) -> Option<LineFit> {
    let w = vec![1.0; xs.len()];
    weighted_line_fit(xs, ys, &w)
}

/// Weighted least squares. Returns `None` for fewer than two points or a
/// degenerate design.
pub fn weighted_line_fit(xs: &[f64], ys: &[f64], ws: &[f64]) -> Option<LineFit> {
    let n = xs.len();
    if n < 2 || ys.len() != n || ws.len() != n {
        return None;
    }
    let sw = pairwise_sum(ws);
    let wx: Vec<f64> = xs.iter().zip(ws).map(|(x, w)| w * x).collect();
    let wy: Vec<f64> = ys.iter().zip(ws).map(|(y, w)| w * y).collect();
    let mx = pairwise_sum(&wx) / sw;
    let my = pairwise_sum(&wy) / sw;
    let sxx: Vec<f64> = xs.iter().zip(ws).map(|(x, w)| w * (x - mx) * (x - mx)).collect();
    let sxy: Vec<f64> = xs
        .iter()
        .zip(ys)
        .zip(ws)
        .map(|((x, y), w)| w * (x - mx) * (y - my))
        .collect();
    let sxx = pairwise_sum(&sxx);
    if !(sxx > 0.0) {
        return None;
    }
    let slope = pairwise_sum(&sxy) / sxx;
    let intercept = my - slope * mx;
    let res: Vec<f64> = xs
        .iter()
        .zip(ys)
        .zip(ws)
        .map(|((x, y), w)| {
            let r = y - intercept - slope * x;
            w * r * r
        })
        .collect();
    let tot: Vec<f64> = ys.iter().zip(ws).map(|(y, w)| w * (y - my) * (y - my)).collect();
    let ss_res = pairwise_sum(&res);
    let ss_tot = pairwise_sum(&tot);
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    let slope_stderr = if n > 2 {
        (ss_res / (n - 2) as f64 / sxx).sqrt()
    } else {
        0.0
    };
    Some(LineFit {
        slope,
        intercept,
        r2,
        slope_stderr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_naive_on_small_ints() {
        let xs: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
        assert_eq!(pairwise_sum(&xs), 500_500.0);
    }

    #[test]
    fn exact_line() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let ys = [3.0, 5.0, 7.0, 9.0];
        let f = line_fit(&xs, &ys).unwrap();
        assert!((f.slope - 2.0).abs() < 1e-12);
        assert!((f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn quantile_endpoints() {
        let xs = [3.0, 1.0, 2.0];
        assert_eq!(quantile(&xs, 0.0), 1.0);
        assert_eq!(quantile(&xs, 1.0), 3.0);
        assert_eq!(quantile(&xs, 0.5), 2.0);
    }

    #[test]
    fn batch_means_of_constant() {
        let xs = vec![2.5; 320];
        let e = batch_means(&xs, 32);
        assert_eq!(e.value, 2.5);
        assert_eq!(e.stderr, 0.0);
    }

    #[test]
    fn z_of_identical_zero_error() {
        let a = Estimate::new(0.0, 0.0);
        assert_eq!(a.z_against(&a), 0.0);
    }
}
