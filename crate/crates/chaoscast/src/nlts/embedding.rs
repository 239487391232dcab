//! Takens delay embedding of a scalar series.

use super::{NltsError, Result};

/// Delay-coordinate reconstruction of a scalar series.
///
/// Point `i` is ordered most-recent-first:
/// `(x[i + (m-1)*tau], ..., x[i + tau], x[i])`.
#[derive(Debug, Clone)]
pub struct DelayEmbedding {
    pub m: usize,
    pub tau: usize,
    count: usize,
    data: Vec<f64>,
}

impl DelayEmbedding {
    /// Number of embedded points.
    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Embedding dimension (same as `m`).
    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.m..(i + 1) * self.m]
    }

    /// Squared Euclidean distance between points `i` and `j`.
    pub fn dist_sq(&self, i: usize, j: usize) -> f64 {
        let a = self.point(i);
        let b = self.point(j);
        let mut s = 0.0;
        for k in 0..self.m {
            let d = a[k] - b[k];
            s += d * d;
        }
        s
    }

    pub fn dist(&self, i: usize, j: usize) -> f64 {
        self.dist_sq(i, j).sqrt()
    }

    /// Wrap an explicit point cloud (row-major, `dim` coordinates per
    /// point) so the dimension estimators can run on states that never
    /// came from a scalar series.
    pub fn from_points(dim: usize, flat: Vec<f64>) -> Result<DelayEmbedding> {
        if dim == 0 || flat.is_empty() || flat.len() % dim != 0 {
            return Err(NltsError::DegenerateSeries {
                detail: "point cloud must be a non-empty multiple of dim",
            });
        }
        Ok(DelayEmbedding {
            m: dim,
            tau: 1,
            count: flat.len() / dim,
            data: flat,
        })
    }
}

/// Embed `series` with dimension `m` and delay `tau`.
///
/// Requires `m >= 1`, `tau >= 1`, and at least `(m-1)*tau + 1` samples.
pub fn delay_embed(series: &[f64], m: usize, tau: usize) -> Result<DelayEmbedding> {
    if m < 1 || tau < 1 {
        return Err(NltsError::DegenerateSeries {
            detail: "embedding needs m >= 1 and tau >= 1",
        });
    }
    let needed = (m - 1) * tau + 2;
    if series.len() < needed {
        return Err(NltsError::SeriesTooShort {
            needed,
            got: series.len(),
        });
    }
    let count = series.len() - (m - 1) * tau;
    let mut data = Vec::with_capacity(count * m);
    for i in 0..count {
        for j in 0..m {
            data.push(series[i + (m - 1 - j) * tau]);
        }
    }
    Ok(DelayEmbedding { m, tau, count, data })
}

/// Default delay: first lag at which the autocorrelation drops below 1/e,
/// capped at `cap` (and never below 1).
pub fn default_delay(series: &[f64], cap: usize) -> usize {
    let n = series.len();
    if n < 2 {
        return 1;
    }
    let mu = series.iter().sum::<f64>() / n as f64;
    let denom: f64 = series.iter().map(|v| (v - mu) * (v - mu)).sum();
    if denom <= 0.0 {
        return 1;
    }
    let threshold = 1.0 / std::f64::consts::E;
    for lag in 1..=cap.min(n - 1) {
        let num: f64 = (0..n - lag)
            .map(|i| (series[i] - mu) * (series[i + lag] - mu))
            .sum();
        if num / denom < threshold {
            return lag;
        }
    }
    cap.max(1)
}
