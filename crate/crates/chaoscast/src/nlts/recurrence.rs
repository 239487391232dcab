//! Recurrence-plot statistics of an embedded series.

use super::embedding::DelayEmbedding;
use super::{NltsError, Result};
use crate::par;

/// Recurrence rate and determinism of an embedded series.
///
/// Two points recur when their distance is at most `eps`; when `eps` is
/// `None` it defaults to 10% of the embedding diameter. The rate is the
/// recurrent fraction of all unordered point pairs. Determinism is the
/// fraction of recurrent pairs sitting on diagonal runs of length at
/// least two in the recurrence matrix; the corner diagonal holding a
/// single pair cannot carry a run and is left out of that ratio. Both
/// are 0 when nothing recurs.
pub fn recurrence_metrics(emb: &DelayEmbedding, eps: Option<f64>) -> Result<(f64, f64)> {
    let n = emb.len();
    if n < 50 {
        return Err(NltsError::InsufficientPoints { needed: 50, got: n });
    }
    let eps = match eps {
        Some(e) if e.is_finite() && e >= 0.0 => e,
        Some(_) => {
            return Err(NltsError::DegenerateSeries {
                detail: "recurrence threshold must be finite and non-negative",
            })
        }
        None => 0.1 * diameter(emb),
    };
    let eps_sq = eps * eps;

    // One diagonal of the recurrence matrix per offset; integer tallies
    // make the parallel merge order-independent.
    let per_offset = par::map_range(n - 1, |idx| {
        let offset = idx + 1;
        let mut recurrent = 0u64;
        let mut on_runs = 0u64;
        let mut run = 0u64;
        for i in 0..n - offset {
            if emb.dist_sq(i, i + offset) <= eps_sq {
                recurrent += 1;
                run += 1;
            } else {
                if run >= 2 {
                    on_runs += run;
                }
                run = 0;
            }
        }
        if run >= 2 {
            on_runs += run;
        }
        let line_capable = if offset <= n - 2 { recurrent } else { 0 };
        (recurrent, on_runs, line_capable)
    });

    let mut recurrent = 0u64;
    let mut on_runs = 0u64;
    let mut line_capable = 0u64;
    for (r, d, c) in per_offset {
        recurrent += r;
        on_runs += d;
        line_capable += c;
    }

    let pairs = (n * (n - 1) / 2) as f64;
    let rate = recurrent as f64 / pairs;
    let det = if line_capable == 0 {
        0.0
    } else {
        on_runs as f64 / line_capable as f64
    };
    Ok((rate, det))
}

/// Largest pairwise distance between embedded points.
fn diameter(emb: &DelayEmbedding) -> f64 {
    let n = emb.len();
    const ROWS_PER_CHUNK: usize = 64;
    let n_chunks = (n - 1).div_ceil(ROWS_PER_CHUNK);
    par::map_range(n_chunks, |c| {
        let mut best = 0.0f64;
        for i in c * ROWS_PER_CHUNK..((c + 1) * ROWS_PER_CHUNK).min(n - 1) {
            for j in i + 1..n {
                best = best.max(emb.dist_sq(i, j));
            }
        }
        best
    })
    .into_iter()
    .fold(0.0f64, f64::max)
    .sqrt()
}
