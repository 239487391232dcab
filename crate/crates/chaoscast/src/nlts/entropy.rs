//! Sample entropy: template-match regularity of a series.

use super::{NltsError, Result};

/// Sample entropy with the tolerance given as a multiple of the series'
/// population standard deviation (0.2 is the customary choice).
///
/// A constant series (zero variance) carries no information to match
/// against and returns 0.
pub fn sample_entropy(series: &[f64], m: usize, r: f64) -> Result<f64> {
    if r <= 0.0 {
        return Err(NltsError::DegenerateSeries {
            detail: "tolerance must be positive",
        });
    }
    let n = series.len() as f64;
    let mu = series.iter().sum::<f64>() / n;
    let sigma = (series.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / n).sqrt();
    if sigma == 0.0 {
        if series.len() < 2 * m + 2 {
            return Err(NltsError::SeriesTooShort {
                needed: 2 * m + 2,
                got: series.len(),
            });
        }
        return Ok(0.0);
    }
    sample_entropy_abs(series, m, r * sigma)
}

/// Sample entropy with an absolute tolerance.
///
/// Counts ordered template pairs (self-matches excluded) under the
/// Chebyshev distance: `B` at length `m`, `A` at length `m+1`, both over
/// the first `n - m` template positions so the two counts are comparable.
/// Returns `-ln(A/B)`, capped at `ln(B+1)` when `A` is zero.
pub fn sample_entropy_abs(series: &[f64], m: usize, r_abs: f64) -> Result<f64> {
    if series.len() < 2 * m + 2 {
        return Err(NltsError::SeriesTooShort {
            needed: 2 * m + 2,
            got: series.len(),
        });
    }
    if r_abs <= 0.0 {
        return Err(NltsError::DegenerateSeries {
            detail: "tolerance must be positive",
        });
    }
    let n_templates = series.len() - m;
    let mut a = 0u64;
    let mut b = 0u64;
    for i in 0..n_templates {
        for j in 0..n_templates {
            if i == j {
                continue;
            }
            if chebyshev_within(&series[i..i + m], &series[j..j + m], r_abs) {
                b += 1;
                if chebyshev_within(&series[i..=i + m], &series[j..=j + m], r_abs) {
                    a += 1;
                }
            }
        }
    }
    if a == 0 {
        return Ok(((b + 1) as f64).ln());
    }
    Ok(-((a as f64) / (b as f64)).ln())
}

fn chebyshev_within(a: &[f64], b: &[f64], r: f64) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= r)
}
