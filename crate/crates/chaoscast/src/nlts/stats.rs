//! Moment, spectral, and decomposition-based series descriptors.

use super::{NltsError, Result};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

/// Summary statistics of a single series.
///
/// `variance` is the population variance, `kurtosis` is excess kurtosis,
/// and `cv` is σ/|μ| (zero when the mean is zero). `spectral_energy` sums
/// squared Fourier magnitudes over the non-zero bins, normalized by
/// length. The two strength fields compare residual variance after
/// removing a least-squares line (trend) or the per-phase means at the
/// dominant Fourier period (seasonal) against the raw variance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesStats {
    pub mean: f64,
    pub variance: f64,
    pub cv: f64,
    pub autocorr_lag1: f64,
    pub skewness: f64,
    pub kurtosis: f64,
    pub spectral_energy: f64,
    pub trend_strength: f64,
    pub seasonal_strength: f64,
}

pub fn statistical_descriptors(series: &[f64]) -> Result<SeriesStats> {
    if series.len() < 8 {
        return Err(NltsError::SeriesTooShort {
            needed: 8,
            got: series.len(),
        });
    }
    let n = series.len();
    let nf = n as f64;
    let mean = series.iter().sum::<f64>() / nf;

    let mut m2 = 0.0;
    let mut m3 = 0.0;
    let mut m4 = 0.0;
    for &v in series {
        let d = v - mean;
        m2 += d * d;
        m3 += d * d * d;
        m4 += d * d * d * d;
    }
    m2 /= nf;
    m3 /= nf;
    m4 /= nf;
    let variance = m2;
    let std = variance.sqrt();

    if variance == 0.0 {
        return Ok(SeriesStats {
            mean,
            variance: 0.0,
            cv: 0.0,
            autocorr_lag1: 0.0,
            skewness: 0.0,
            kurtosis: 0.0,
            spectral_energy: 0.0,
            trend_strength: 0.0,
            seasonal_strength: 0.0,
        });
    }

    let cv = if mean == 0.0 { 0.0 } else { std / mean.abs() };
    let skewness = m3 / (std * std * std);
    let kurtosis = m4 / (variance * variance) - 3.0;

    let mut acf_num = 0.0;
    for t in 0..n - 1 {
        acf_num += (series[t] - mean) * (series[t + 1] - mean);
    }
    let autocorr_lag1 = acf_num / (m2 * nf);

    let spectrum = magnitudes(series);
    let spectral_energy = spectrum[1..].iter().map(|a| a * a).sum::<f64>() / nf;

    // Dominant period from the strongest bin below Nyquist.
    let mut best_k = 1;
    for k in 2..=n / 2 {
        if spectrum[k] > spectrum[best_k] {
            best_k = k;
        }
    }
    let period = ((nf / best_k as f64).round() as usize).clamp(2, n / 2);

    let trend_strength = {
        let detrended = detrend(series);
        residual_strength(&detrended, variance)
    };
    let seasonal_strength = {
        let deseasoned = remove_phase_means(series, period);
        residual_strength(&deseasoned, variance)
    };

    Ok(SeriesStats {
        mean,
        variance,
        cv,
        autocorr_lag1,
        skewness,
        kurtosis,
        spectral_energy,
        trend_strength,
        seasonal_strength,
    })
}

/// Magnitudes |X_k| of the discrete Fourier transform, all n bins.
fn magnitudes(series: &[f64]) -> Vec<f64> {
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(series.len());
    let mut buf: Vec<Complex<f64>> = series.iter().map(|&v| Complex::new(v, 0.0)).collect();
    fft.process(&mut buf);
    buf.iter().map(|c| c.norm()).collect()
}

fn residual_strength(residual: &[f64], raw_variance: f64) -> f64 {
    let nf = residual.len() as f64;
    let rm = residual.iter().sum::<f64>() / nf;
    let rv = residual.iter().map(|v| (v - rm) * (v - rm)).sum::<f64>() / nf;
    (1.0 - rv / raw_variance).max(0.0)
}

fn detrend(series: &[f64]) -> Vec<f64> {
    let n = series.len() as f64;
    let mx = (n - 1.0) / 2.0;
    let my = series.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, &v) in series.iter().enumerate() {
        let dx = t as f64 - mx;
        num += dx * (v - my);
        den += dx * dx;
    }
    let slope = num / den;
    series
        .iter()
        .enumerate()
        .map(|(t, &v)| v - (my + slope * (t as f64 - mx)))
        .collect()
}

fn remove_phase_means(series: &[f64], period: usize) -> Vec<f64> {
    let mut sums = vec![0.0; period];
    let mut counts = vec![0usize; period];
    for (t, &v) in series.iter().enumerate() {
        sums[t % period] += v;
        counts[t % period] += 1;
    }
    for (s, &c) in sums.iter_mut().zip(&counts) {
        *s /= c as f64;
    }
    series
        .iter()
        .enumerate()
        .map(|(t, &v)| v - sums[t % period])
        .collect()
}
