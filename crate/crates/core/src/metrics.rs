//! Series smoothing and normal-approximation confidence intervals.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const Z_95: f64 = 1.96;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSeries {
    pub window: usize,
    pub raw: Vec<f64>,
    pub smoothed: Vec<f64>,
    pub rolling_std: Vec<f64>,
}

/// Gaussian-kernel rolling mean and weighted rolling standard deviation.
///
/// Kernel: `sigma = window / 4`, taps `-window/2..=window/2`; taps falling
/// outside the series are dropped and the rest renormalised.
pub fn smooth(series: &[f64], window: usize) -> Result<MetricsSeries> {
    if series.is_empty() {
        return Err(Error::Config("cannot smooth an empty series".into()));
    }
    if window == 0 {
        return Err(Error::Config("smoothing window must be at least 1".into()));
    }
    let half = (window / 2) as isize;
    let sigma = window as f64 / 4.0;
    let taps: Vec<f64> = (-half..=half)
        .map(|k| (-0.5 * (k as f64 / sigma).powi(2)).exp())
        .collect();
    let n = series.len() as isize;
    let mut smoothed = Vec::with_capacity(series.len());
    let mut rolling_std = Vec::with_capacity(series.len());
    for i in 0..n {
        let (mut wsum, mut m) = (0.0, 0.0);
        for (t, w) in taps.iter().enumerate() {
            let j = i + t as isize - half;
            if (0..n).contains(&j) {
                wsum += w;
                m += w * series[j as usize];
            }
        }
        m /= wsum;
        let mut var = 0.0;
        for (t, w) in taps.iter().enumerate() {
            let j = i + t as isize - half;
            if (0..n).contains(&j) {
                var += w * (series[j as usize] - m).powi(2);
            }
        }
        smoothed.push(m);
        rolling_std.push((var / wsum).max(0.0).sqrt());
    }
    Ok(MetricsSeries {
        window,
        raw: series.to_vec(),
        smoothed,
        rolling_std,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub lo: f64,
    pub hi: f64,
}

/// `mean +- 1.96 * s / sqrt(n)` with the sample standard deviation `s`.
pub fn confidence_interval(samples: &[f64]) -> Result<Interval> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::Config(format!(
            "confidence interval needs at least 2 samples, got {n}"
        )));
    }
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    let std = var.sqrt();
    let half = Z_95 * std / (n as f64).sqrt();
    Ok(Interval {
        n,
        mean,
        std,
        lo: mean - half,
        hi: mean + half,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_and_identity() {
        let s = smooth(&[3.5; 250], 100).unwrap();
        assert!(s.smoothed.iter().all(|&v| (v - 3.5).abs() < 1e-12));
        assert!(s.rolling_std.iter().all(|&v| v < 1e-6));
        let x: Vec<f64> = (0..40).map(|i| (i as f64).sin()).collect();
        let s = smooth(&x, 1).unwrap();
        assert_eq!(s.smoothed, x);
        assert!(s.rolling_std.iter().all(|&v| v == 0.0));
        assert!(smooth(&[], 5).is_err());
        assert!(smooth(&[1.0], 0).is_err());
    }

    #[test]
    fn step_series_matches_direct_sum() {
        let x: Vec<f64> = (0..300).map(|i| if i < 150 { 0.0 } else { 1.0 }).collect();
        let w = 100;
        let s = smooth(&x, w).unwrap();
        assert_eq!(s.smoothed.len(), x.len());
        let sigma = w as f64 / 4.0;
        for i in 0..x.len() {
            let (mut num, mut den) = (0.0, 0.0);
            for j in 0..x.len() {
                let d = j as f64 - i as f64;
                if d.abs() <= (w / 2) as f64 {
                    let k = (-0.5 * (d / sigma).powi(2)).exp();
                    num += k * x[j];
                    den += k;
                }
            }
            assert!((s.smoothed[i] - num / den).abs() < 1e-12);
        }
    }

    #[test]
    fn interval_formula() {
        let ci = confidence_interval(&[2.0; 10]).unwrap();
        assert_eq!((ci.lo, ci.hi, ci.std), (2.0, 2.0, 0.0));
        assert!(confidence_interval(&[1.0]).is_err());
        // 100 samples whose sample std is 11.22 around 96.7 give 96.7 [94.5, 98.9].
        let half: Vec<f64> = (0..50).map(|_| 1.0).collect();
        let base: Vec<f64> = half
            .iter()
            .map(|v| 96.7 + v)
            .chain(half.iter().map(|v| 96.7 - v))
            .collect();
        let s0 = confidence_interval(&base).unwrap().std;
        let target = 2.2 / 1.96 * 10.0;
        let xs: Vec<f64> = base.iter().map(|v| 96.7 + (v - 96.7) * target / s0).collect();
        let ci = confidence_interval(&xs).unwrap();
        assert!((ci.mean - 96.7).abs() < 1e-9);
        assert_eq!(
            format!("{:.1} [{:.1}, {:.1}]", ci.mean, ci.lo, ci.hi),
            "96.7 [94.5, 98.9]"
        );
        assert!(((ci.mean - ci.lo) - (ci.hi - ci.mean)).abs() < 1e-12);
        assert!(((ci.hi - ci.mean) - 1.96 * ci.std / 10.0).abs() < 1e-12);
    }
}
