//! Small descriptive statistics shared by the metric and fidelity reports.

use serde::{Deserialize, Serialize};

pub const Z95: f64 = 1.96;

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Sample standard deviation (n - 1 denominator); 0 for fewer than two values.
pub fn sample_sd(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let m = mean(xs);
    (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (xs.len() - 1) as f64).sqrt()
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Half-width of the normal-approximation 95% interval: 1.96 * sd / sqrt(n).
pub fn ci95_half_width(sd: f64, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    Z95 * sd / (n as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub sd: f64,
    pub median: f64,
    pub ci95_low: f64,
    pub ci95_high: f64,
}

impl Summary {
    pub fn of(xs: &[f64]) -> Self {
        let (m, sd) = (mean(xs), sample_sd(xs));
        let h = ci95_half_width(sd, xs.len());
        Self { n: xs.len(), mean: m, sd, median: median(xs), ci95_low: m - h, ci95_high: m + h }
    }
}
