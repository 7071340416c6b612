//! Accuracy metrics over paired labels and predictions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mse: f64,
    pub rmse: f64,
    pub mae: f64,
    /// Sample standard deviation (n - 1) of the errors `y_hat - y`.
    pub std_of_errors: f64,
    pub n: usize,
}

pub fn compute_metrics(y: &[f64], y_hat: &[f64]) -> Result<MetricsReport> {
    if y.len() != y_hat.len() {
        return Err(Error::Metrics(format!(
            "{} labels but {} predictions",
            y.len(),
            y_hat.len()
        )));
    }
    let n = y.len();
    if n < 2 {
        return Err(Error::Metrics(format!("standard deviation of errors needs n >= 2, got {n}")));
    }
    let errors: Vec<f64> = y.iter().zip(y_hat).map(|(a, b)| b - a).collect();
    let nf = n as f64;
    let mse = errors.iter().map(|e| e * e).sum::<f64>() / nf;
    let mae = errors.iter().map(|e| e.abs()).sum::<f64>() / nf;
    let mean = errors.iter().sum::<f64>() / nf;
    let var = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / (nf - 1.0);
    Ok(MetricsReport {
        mse,
        rmse: mse.sqrt(),
        mae,
        std_of_errors: var.sqrt(),
        n,
    })
}

/// Component-wise mean of several reports (`n` summed).
pub fn mean_report(reports: &[MetricsReport]) -> Option<MetricsReport> {
    if reports.is_empty() {
        return None;
    }
    let k = reports.len() as f64;
    let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / k;
    Some(MetricsReport {
        mse: avg(|r| r.mse),
        rmse: avg(|r| r.rmse),
        mae: avg(|r| r.mae),
        std_of_errors: avg(|r| r.std_of_errors),
        n: reports.iter().map(|r| r.n).sum(),
    })
}
