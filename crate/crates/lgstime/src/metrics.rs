//! Forecast error metrics and multi-run aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// MSE / MAE / RMSE over `n` scalar points. `rmse` is always the square
/// root of `mse`, never computed independently.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse: f64,
    pub mae: f64,
    pub rmse: f64,
    pub n: usize,
}

/// Mean squared / absolute error over all points, flattened across samples
/// and channels.
pub fn compute_metrics(y: &Tensor, y_hat: &Tensor) -> Result<MetricsReport> {
    if y.shape() != y_hat.shape() {
        return Err(Error::Dimension {
            op: "compute_metrics",
            lhs: y.shape(),
            rhs: y_hat.shape(),
        });
    }
    compute_metrics_flat(y.data(), y_hat.data())
}

pub fn compute_metrics_flat(y: &[f64], y_hat: &[f64]) -> Result<MetricsReport> {
    if y.len() != y_hat.len() {
        return Err(Error::Dimension {
            op: "compute_metrics",
            lhs: vec![y.len()],
            rhs: vec![y_hat.len()],
        });
    }
    if y.is_empty() {
        return Err(Error::EmptyInput("compute_metrics"));
    }
    let n = y.len();
    let mut se = 0.0;
    let mut ae = 0.0;
    for (a, b) in y.iter().zip(y_hat.iter()) {
        let d = a - b;
        se += d * d;
        ae += d.abs();
    }
    let mse = se / n as f64;
    let mae = ae / n as f64;
    Ok(MetricsReport {
        mse,
        mae,
        rmse: mse.sqrt(),
        n,
    })
}

/// Per-metric arithmetic mean and sample standard deviation (n−1
/// denominator) over repeated runs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RepeatSummary {
    pub runs: Vec<MetricsReport>,
    pub mean: MetricsReport,
    pub std: MetricsReport,
}

pub fn aggregate(runs: &[MetricsReport]) -> Result<RepeatSummary> {
    if runs.is_empty() {
        return Err(Error::EmptyInput("aggregate"));
    }
    let k = runs.len() as f64;
    let mean_of = |f: fn(&MetricsReport) -> f64| runs.iter().map(f).sum::<f64>() / k;
    let std_of = |f: fn(&MetricsReport) -> f64, mean: f64| {
        if runs.len() < 2 {
            0.0
        } else {
            let ss: f64 = runs.iter().map(|r| (f(r) - mean).powi(2)).sum();
            (ss / (k - 1.0)).sqrt()
        }
    };
    let m_mse = mean_of(|r| r.mse);
    let m_mae = mean_of(|r| r.mae);
    let m_rmse = mean_of(|r| r.rmse);
    let mean = MetricsReport {
        mse: m_mse,
        mae: m_mae,
        rmse: m_rmse,
        n: runs[0].n,
    };
    let std = MetricsReport {
        mse: std_of(|r| r.mse, m_mse),
        mae: std_of(|r| r.mae, m_mae),
        rmse: std_of(|r| r.rmse, m_rmse),
        n: runs[0].n,
    };
    Ok(RepeatSummary {
        runs: runs.to_vec(),
        mean,
        std,
    })
}

/// Run `runner` with seeds `base_seed, base_seed + 1, ...` and aggregate.
pub fn repeat_and_aggregate(
    repeats: usize,
    base_seed: u64,
    mut runner: impl FnMut(u64) -> Result<MetricsReport>,
) -> Result<RepeatSummary> {
    if repeats == 0 {
        return Err(Error::Validation("repeats must be >= 1".into()));
    }
    let mut runs = Vec::with_capacity(repeats);
    for r in 0..repeats {
        runs.push(runner(base_seed + r as u64)?);
    }
    aggregate(&runs)
}

/// Units-in-last-place distance between two finite non-negative doubles.
pub fn ulp_diff(a: f64, b: f64) -> u64 {
    debug_assert!(a >= 0.0 && b >= 0.0);
    let (x, y) = (a.to_bits(), b.to_bits());
    x.abs_diff(y)
}
