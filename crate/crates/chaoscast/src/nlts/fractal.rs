//! Correlation and box-counting dimension estimates for embedded series.

use std::collections::HashSet;

use super::embedding::DelayEmbedding;
use super::{least_squares_slope, NltsError, Result};
use crate::par;

const BINS: usize = 48;
const MAX_GRID_LEVELS: usize = 12;

/// Grassberger–Procaccia correlation dimension.
///
/// Builds the correlation integral C(ε) at 48 log-spaced radii spanning
/// the pairwise-distance range, then fits log C against log ε over the
/// middle half of that range. Near-duplicate pairs (closer than one
/// millionth of the diameter) are dropped entirely so exactly periodic
/// embeddings don't pin the lower end of the range at zero.
pub fn correlation_dimension(emb: &DelayEmbedding) -> Result<f64> {
    let n = emb.len();
    if n < 500 {
        return Err(NltsError::InsufficientPoints { needed: 500, got: n });
    }

    const ROWS_PER_CHUNK: usize = 64;
    let n_chunks = (n - 1).div_ceil(ROWS_PER_CHUNK);
    let row_range = |c: usize| (c * ROWS_PER_CHUNK, ((c + 1) * ROWS_PER_CHUNK).min(n - 1));

    // Pass 1: distance extremes.
    let extremes = par::map_range(n_chunks, |c| {
        let (lo, hi) = row_range(c);
        let mut dmax = 0.0f64;
        let mut dmin = f64::INFINITY;
        for i in lo..hi {
            for j in i + 1..n {
                let d = emb.dist_sq(i, j);
                if d > 0.0 {
                    dmax = dmax.max(d);
                    dmin = dmin.min(d);
                }
            }
        }
        (dmax, dmin)
    });
    let dmax_sq = extremes.iter().fold(0.0f64, |a, e| a.max(e.0));
    let mut dmin_sq = extremes.iter().fold(f64::INFINITY, |a, e| a.min(e.1));
    if dmax_sq == 0.0 {
        return Ok(0.0); // every point coincides
    }

    let floor_sq = dmax_sq * 1e-12;
    if dmin_sq <= floor_sq {
        // Duplicates (or near-duplicates) present: rescan for the
        // smallest distance that survives the floor. The diameter pair
        // itself always does.
        dmin_sq = par::map_range(n_chunks, |c| {
            let (lo, hi) = row_range(c);
            let mut best = f64::INFINITY;
            for i in lo..hi {
                for j in i + 1..n {
                    let d = emb.dist_sq(i, j);
                    if d > floor_sq && d < best {
                        best = d;
                    }
                }
            }
            best
        })
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    }

    let llo = 0.5 * dmin_sq.ln();
    let lhi = 0.5 * dmax_sq.ln();
    let range = lhi - llo;
    if range < 1e-9 {
        return Ok(0.0); // single distance scale, nothing to fit
    }
    let step = range / (BINS - 1) as f64;

    // Pass 2: histogram over log-spaced radii; bin k holds pairs with
    // eps_{k-1} < d <= eps_k, so the cumulative sum is C(eps_k).
    let partial_hists = par::map_range(n_chunks, |c| {
        let (lo, hi) = row_range(c);
        let mut hist = [0u64; BINS];
        for i in lo..hi {
            for j in i + 1..n {
                let d = emb.dist_sq(i, j);
                if d > floor_sq {
                    let k = ((0.5 * d.ln() - llo) / step).ceil() as i64;
                    hist[k.clamp(0, BINS as i64 - 1) as usize] += 1;
                }
            }
        }
        hist
    });
    let mut hist = [0u64; BINS];
    for ph in &partial_hists {
        for (h, p) in hist.iter_mut().zip(ph) {
            *h += p;
        }
    }

    let total: u64 = hist.iter().sum();
    let mut cum = 0u64;
    let mut log_eps = Vec::with_capacity(BINS);
    let mut log_c = Vec::with_capacity(BINS);
    let w_lo = llo + 0.25 * range;
    let w_hi = llo + 0.75 * range;
    let mut log_eps_all = Vec::with_capacity(BINS);
    let mut log_c_all = Vec::with_capacity(BINS);
    for (k, &h) in hist.iter().enumerate() {
        cum += h;
        if cum == 0 {
            continue;
        }
        let le = llo + k as f64 * step;
        let lc = ((cum as f64) / (total as f64)).ln();
        log_eps_all.push(le);
        log_c_all.push(lc);
        if le >= w_lo && le <= w_hi {
            log_eps.push(le);
            log_c.push(lc);
        }
    }
    if log_eps.len() < 2 {
        if log_eps_all.len() < 2 {
            return Ok(0.0);
        }
        return Ok(least_squares_slope(&log_eps_all, &log_c_all));
    }
    Ok(least_squares_slope(&log_eps, &log_c))
}

/// Box-counting dimension on dyadic refinements of the bounding box.
///
/// Coordinates are rescaled by the largest side of the bounding box,
/// then occupied cells are counted on 2^k-per-side grids until either
/// the grid outresolves the data (more occupied cells than half the
/// points) or twelve levels are reached. The slope of log N(ε) against
/// log(1/ε) is fitted over the middle half of the levels when more than
/// four levels are available.
pub fn box_counting_dimension(emb: &DelayEmbedding) -> Result<f64> {
    let n = emb.len();
    if n < 2 {
        return Err(NltsError::InsufficientPoints { needed: 2, got: n });
    }
    let m = emb.dim();

    let mut lo = vec![f64::INFINITY; m];
    let mut hi = vec![f64::NEG_INFINITY; m];
    for i in 0..n {
        for (d, &x) in emb.point(i).iter().enumerate() {
            lo[d] = lo[d].min(x);
            hi[d] = hi[d].max(x);
        }
    }
    let span = lo
        .iter()
        .zip(&hi)
        .map(|(l, h)| h - l)
        .fold(0.0f64, f64::max);
    if span <= 0.0 {
        return Ok(0.0); // all points coincide
    }

    let mut log_inv_eps = Vec::new();
    let mut log_count = Vec::new();
    for k in 1..=MAX_GRID_LEVELS {
        let grid = (1u64 << k) as f64;
        let mut cells: HashSet<Vec<u16>> = HashSet::with_capacity(n);
        for i in 0..n {
            let cell: Vec<u16> = emb
                .point(i)
                .iter()
                .zip(&lo)
                .map(|(&x, l)| (((x - l) / span * grid) as u16).min(grid as u16 - 1))
                .collect();
            cells.insert(cell);
        }
        let count = cells.len();
        log_inv_eps.push(k as f64 * std::f64::consts::LN_2);
        log_count.push((count as f64).ln());
        if count > n / 2 {
            break;
        }
    }
    if log_inv_eps.len() < 2 {
        return Ok(0.0);
    }

    let r = log_inv_eps[log_inv_eps.len() - 1] - log_inv_eps[0];
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    if log_inv_eps.len() > 3 {
        let w_lo = log_inv_eps[0] + 0.25 * r;
        let w_hi = log_inv_eps[0] + 0.75 * r;
        for (x, y) in log_inv_eps.iter().zip(&log_count) {
            if *x >= w_lo && *x <= w_hi {
                xs.push(*x);
                ys.push(*y);
            }
        }
    }
    if xs.len() < 2 {
        xs = log_inv_eps;
        ys = log_count;
    }
    Ok(least_squares_slope(&xs, &ys))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nlts::embedding::delay_embed;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn circle_points(n: usize, revolutions: f64) -> DelayEmbedding {
        let mut flat = Vec::with_capacity(2 * n);
        for t in 0..n {
            let a = std::f64::consts::TAU * revolutions * t as f64 / n as f64;
            flat.push(a.cos());
            flat.push(a.sin());
        }
        DelayEmbedding::from_points(2, flat).unwrap()
    }

    #[test]
    fn circle_has_dimension_one() {
        // Frozen reference: 1.094 for 2000 points over 10 revolutions.
        let d = correlation_dimension(&circle_points(2000, 10.0)).unwrap();
        assert!((d - 1.0).abs() < 0.2, "d = {d}");
    }

    #[test]
    fn filled_square_has_dimension_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let flat: Vec<f64> = (0..8000).map(|_| rng.gen::<f64>()).collect();
        let emb = DelayEmbedding::from_points(2, flat).unwrap();
        let d = correlation_dimension(&emb).unwrap();
        assert!((d - 2.0).abs() < 0.25, "corr d = {d}");
        let b = box_counting_dimension(&emb).unwrap();
        assert!((b - 2.0).abs() < 0.2, "box d = {b}");
    }

    #[test]
    fn too_few_points_rejected() {
        let emb = circle_points(400, 3.0);
        assert!(matches!(
            correlation_dimension(&emb),
            Err(NltsError::InsufficientPoints { needed: 500, got: 400 })
        ));
    }

    #[test]
    fn line_segment_counts_as_one_dimensional() {
        let mut flat = Vec::with_capacity(2000);
        for t in 0..1000 {
            let x = t as f64 / 999.0;
            flat.push(x);
            flat.push(2.0 * x);
        }
        let emb = DelayEmbedding::from_points(2, flat).unwrap();
        let d = box_counting_dimension(&emb).unwrap();
        assert!((d - 1.0).abs() < 0.15, "d = {d}");
    }

    #[test]
    fn repeated_point_is_zero_dimensional() {
        let emb = DelayEmbedding::from_points(3, vec![0.0; 150]).unwrap();
        assert_eq!(box_counting_dimension(&emb).unwrap(), 0.0);
        let emb2 = DelayEmbedding::from_points(1, vec![7.0; 600]).unwrap();
        assert_eq!(correlation_dimension(&emb2).unwrap(), 0.0);
    }

    #[test]
    fn periodic_embedding_survives_duplicate_pairs() {
        // 10 exact revolutions: most pairs are exact duplicates, which
        // must be excluded rather than collapse the radius range.
        let series: Vec<f64> = (0..2000)
            .map(|t| (std::f64::consts::TAU * t as f64 / 200.0).sin())
            .collect();
        let emb = delay_embed(&series, 2, 50).unwrap();
        let d = correlation_dimension(&emb).unwrap();
        assert!((d - 1.0).abs() < 0.2, "d = {d}");
    }
}
