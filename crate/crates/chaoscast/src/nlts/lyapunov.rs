//! Largest Lyapunov exponent from nearest-neighbour divergence.

use super::embedding::{delay_embed, DelayEmbedding};
use super::{least_squares_slope, NltsError, Result};
use crate::par;

/// Steps the divergence of a neighbour pair is followed for.
const EXPANSION_STEPS: usize = 10;

/// Divergence curves flatter than this total rise (in nats) are treated
/// as non-expanding and fitted over the whole window.
const MIN_RISE: f64 = 0.5;

/// Largest Lyapunov exponent of a scalar series, in nats per step.
///
/// Embeds the series, pairs every usable point with its nearest
/// neighbour outside a Theiler exclusion window of `m·tau` steps, and
/// averages log separation as both trajectories are advanced together.
/// The exponent is the least-squares slope of that curve. Expanding
/// curves saturate once the separation reaches the attractor size, so
/// the fit stops where the curve first comes within 10% of its final
/// rise; curves with no meaningful rise keep the whole window.
pub fn largest_lyapunov(series: &[f64], m: usize, tau: usize) -> Result<f64> {
    let n = series.len() as f64;
    let mean = series.iter().sum::<f64>() / n;
    let var = series.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var < 1e-12 {
        return Err(NltsError::DegenerateSeries {
            detail: "variance below 1e-12",
        });
    }
    let emb = delay_embed(series, m, tau)?;
    divergence_exponent(&emb, m * tau)
}

fn divergence_exponent(emb: &DelayEmbedding, theiler: usize) -> Result<f64> {
    let n = emb.len();
    if n <= EXPANSION_STEPS + theiler + 1 {
        return Err(NltsError::InsufficientPoints {
            needed: EXPANSION_STEPS + theiler + 2,
            got: n,
        });
    }
    let n_refs = n - EXPANSION_STEPS;

    // Nearest neighbour per reference point, excluding temporal
    // neighbours and exact duplicates.
    let neighbours: Vec<Option<usize>> = par::map_range(n_refs, |i| {
        let mut best = None;
        let mut best_d = f64::INFINITY;
        for j in 0..n_refs {
            if j.abs_diff(i) <= theiler {
                continue;
            }
            let d = emb.dist_sq(i, j);
            if d > 0.0 && d < best_d {
                best_d = d;
                best = Some(j);
            }
        }
        best
    });

    // Mean log separation while advancing each pair k steps. Chunked so
    // the parallel and sequential paths accumulate in the same order.
    const CHUNK: usize = 256;
    let n_chunks = n_refs.div_ceil(CHUNK);
    let partials: Vec<([f64; EXPANSION_STEPS + 1], [u64; EXPANSION_STEPS + 1])> =
        par::map_range(n_chunks, |c| {
            let mut lnd = [0.0; EXPANSION_STEPS + 1];
            let mut cnt = [0u64; EXPANSION_STEPS + 1];
            for i in c * CHUNK..((c + 1) * CHUNK).min(n_refs) {
                let Some(j) = neighbours[i] else { continue };
                for (k, (l, c)) in lnd.iter_mut().zip(&mut cnt).enumerate() {
                    let d = emb.dist_sq(i + k, j + k);
                    if d > 0.0 {
                        *l += 0.5 * d.ln();
                        *c += 1;
                    }
                }
            }
            (lnd, cnt)
        });

    let mut lnd = [0.0; EXPANSION_STEPS + 1];
    let mut cnt = [0u64; EXPANSION_STEPS + 1];
    for (pl, pc) in &partials {
        for k in 0..=EXPANSION_STEPS {
            lnd[k] += pl[k];
            cnt[k] += pc[k];
        }
    }
    if cnt[0] == 0 {
        return Err(NltsError::InsufficientPoints {
            needed: theiler + 2,
            got: n,
        });
    }

    let y: Vec<f64> = lnd
        .iter()
        .zip(&cnt)
        .map(|(l, &c)| l / (c.max(1) as f64))
        .collect();

    let rise = y[EXPANSION_STEPS] - y[0];
    let kend = if rise < MIN_RISE {
        EXPANSION_STEPS
    } else {
        let margin = 0.1 * rise;
        let mut kend = 1;
        for (k, &yk) in y.iter().enumerate().skip(1) {
            if yk <= y[EXPANSION_STEPS] - margin {
                kend = k;
            }
        }
        kend
    };

    let ks: Vec<f64> = (0..=kend).map(|k| k as f64).collect();
    Ok(least_squares_slope(&ks, &y[..=kend]))
}
