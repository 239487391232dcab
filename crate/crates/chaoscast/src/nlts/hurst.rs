//! Hurst exponent by rescaled-range analysis.

use super::{least_squares_slope, NltsError, Result};

/// Rescaled-range Hurst estimate.
///
/// Splits the series into non-overlapping windows at dyadic sizes from 8
/// up to half the series length, computes the mean R/S statistic per size,
/// and fits log(R/S) against log(size) by least squares. The slope is the
/// estimate, clamped to [0, 1.5] to keep pathological fits from leaking
/// into downstream features.
pub fn hurst_exponent(series: &[f64]) -> Result<f64> {
    if series.len() < 64 {
        return Err(NltsError::SeriesTooShort {
            needed: 64,
            got: series.len(),
        });
    }
    let mut sizes = Vec::new();
    let mut w = 8usize;
    while w <= series.len() / 2 {
        sizes.push(w);
        w *= 2;
    }

    let mut log_n = Vec::with_capacity(sizes.len());
    let mut log_rs = Vec::with_capacity(sizes.len());
    for &size in &sizes {
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in series.chunks_exact(size) {
            if let Some(rs) = rescaled_range(chunk) {
                total += rs;
                count += 1;
            }
        }
        if count > 0 {
            log_n.push((size as f64).ln());
            log_rs.push((total / count as f64).ln());
        }
    }
    if log_n.len() < 2 {
        return Err(NltsError::DegenerateSeries {
            detail: "rescaled range is undefined at every window size",
        });
    }

    let slope = least_squares_slope(&log_n, &log_rs);
    Ok(slope.clamp(0.0, 1.5))
}

/// R/S statistic for a single window; None when the window is constant.
fn rescaled_range(window: &[f64]) -> Option<f64> {
    let n = window.len() as f64;
    let mean = window.iter().sum::<f64>() / n;
    let std = (window.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    if std == 0.0 {
        return None;
    }
    let mut cum = 0.0;
    let mut hi = f64::MIN;
    let mut lo = f64::MAX;
    for &v in window {
        cum += v - mean;
        hi = hi.max(cum);
        lo = lo.min(cum);
    }
    Some((hi - lo) / std)
}
