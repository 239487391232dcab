//! Nonlinear time-series analysis: delay embeddings, dynamical
//! invariants (Lyapunov exponent, fractal dimensions, recurrence),
//! entropy and moment descriptors, and the fixed-layout profile vector
//! the forecasting stack conditions on.

mod embedding;
mod entropy;
mod fractal;
mod hurst;
mod lyapunov;
mod recurrence;
mod stats;

pub use embedding::{default_delay, delay_embed, DelayEmbedding};
pub use entropy::{sample_entropy, sample_entropy_abs};
pub use fractal::{box_counting_dimension, correlation_dimension};
pub use hurst::hurst_exponent;
pub use lyapunov::largest_lyapunov;
pub use recurrence::recurrence_metrics;
pub use stats::{statistical_descriptors, SeriesStats};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum NltsError {
    #[error("series too short: need {needed} samples, got {got}")]
    SeriesTooShort { needed: usize, got: usize },
    #[error("degenerate series: {detail}")]
    DegenerateSeries { detail: &'static str },
    #[error("not enough embedded points: need {needed}, got {got}")]
    InsufficientPoints { needed: usize, got: usize },
    #[error("non-finite value in input series")]
    NonFiniteInput,
}

pub type Result<T> = std::result::Result<T, NltsError>;

/// Least-squares slope of `ys` against `xs`.
pub(crate) fn least_squares_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (x, y) in xs.iter().zip(ys) {
        num += (x - mx) * (y - my);
        den += (x - mx) * (x - mx);
    }
    num / den
}

/// Dynamical regime of a series, keyed off the largest Lyapunov
/// exponent: below 0.3 is Regular, above 0.8 is Chaotic, in between is
/// WeakChaotic.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RegimeLabel {
    Regular,
    WeakChaotic,
    Chaotic,
}

impl RegimeLabel {
    pub fn from_lyapunov(lambda: f64) -> Self {
        if lambda < 0.3 {
            RegimeLabel::Regular
        } else if lambda <= 0.8 {
            RegimeLabel::WeakChaotic
        } else {
            RegimeLabel::Chaotic
        }
    }
}

impl std::fmt::Display for RegimeLabel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RegimeLabel::Regular => "Regular",
            RegimeLabel::WeakChaotic => "WeakChaotic",
            RegimeLabel::Chaotic => "Chaotic",
        })
    }
}

/// Fixed 20-slot feature vector describing one series, with the slot
/// order frozen for serialization and for conditioning tensors.
///
/// The last four slots are reserved and always zero. `degraded` records
/// that at least one slot fell back to its default because the series
/// was too short or too degenerate for the estimator behind it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChaosProfile {
    pub lyapunov: f64,
    pub hurst: f64,
    pub sample_entropy: f64,
    pub corr_dimension: f64,
    pub box_dimension: f64,
    pub recurrence_rate: f64,
    pub determinism: f64,
    pub spectral_energy: f64,
    pub mean: f64,
    pub variance: f64,
    pub coeff_variation: f64,
    pub autocorr_lag1: f64,
    pub skewness: f64,
    pub kurtosis: f64,
    pub trend_strength: f64,
    pub seasonal_strength: f64,
    pub reserved_0: f64,
    pub reserved_1: f64,
    pub reserved_2: f64,
    pub reserved_3: f64,
    pub regime: RegimeLabel,
    pub degraded: bool,
}

impl ChaosProfile {
    pub const SLOTS: usize = 20;

    pub const SLOT_NAMES: [&'static str; Self::SLOTS] = [
        "lyapunov",
        "hurst",
        "sample_entropy",
        "corr_dimension",
        "box_dimension",
        "recurrence_rate",
        "determinism",
        "spectral_energy",
        "mean",
        "variance",
        "coeff_variation",
        "autocorr_lag1",
        "skewness",
        "kurtosis",
        "trend_strength",
        "seasonal_strength",
        "reserved_0",
        "reserved_1",
        "reserved_2",
        "reserved_3",
    ];

    /// The slots in their canonical order.
    pub fn slots(&self) -> [f64; Self::SLOTS] {
        [
            self.lyapunov,
            self.hurst,
            self.sample_entropy,
            self.corr_dimension,
            self.box_dimension,
            self.recurrence_rate,
            self.determinism,
            self.spectral_energy,
            self.mean,
            self.variance,
            self.coeff_variation,
            self.autocorr_lag1,
            self.skewness,
            self.kurtosis,
            self.trend_strength,
            self.seasonal_strength,
            self.reserved_0,
            self.reserved_1,
            self.reserved_2,
            self.reserved_3,
        ]
    }

    pub fn from_slots(slots: [f64; Self::SLOTS], degraded: bool) -> Self {
        ChaosProfile {
            lyapunov: slots[0],
            hurst: slots[1],
            sample_entropy: slots[2],
            corr_dimension: slots[3],
            box_dimension: slots[4],
            recurrence_rate: slots[5],
            determinism: slots[6],
            spectral_energy: slots[7],
            mean: slots[8],
            variance: slots[9],
            coeff_variation: slots[10],
            autocorr_lag1: slots[11],
            skewness: slots[12],
            kurtosis: slots[13],
            trend_strength: slots[14],
            seasonal_strength: slots[15],
            reserved_0: slots[16],
            reserved_1: slots[17],
            reserved_2: slots[18],
            reserved_3: slots[19],
            regime: RegimeLabel::from_lyapunov(slots[0]),
            degraded,
        }
    }
}

/// Embedding defaults used by [`chaos_profile`]: dimension 5 and the
/// autocorrelation-decay delay capped at 10.
pub const DEFAULT_EMBED_DIM: usize = 5;
pub const DEFAULT_DELAY_CAP: usize = 10;

const ENTROPY_TEMPLATE_LEN: usize = 2;
const ENTROPY_TOLERANCE: f64 = 0.2;

/// Minimum length for the dynamical estimators (Lyapunov exponent and
/// the two fractal dimensions); shorter series get those slots zeroed
/// and the profile marked degraded.
pub const FULL_PROFILE_LEN: usize = 128;

/// Extract the 20-slot profile with default embedding parameters.
pub fn chaos_profile(series: &[f64]) -> Result<ChaosProfile> {
    let tau = default_delay(series, DEFAULT_DELAY_CAP);
    chaos_profile_with(series, DEFAULT_EMBED_DIM, tau)
}

/// Extract the 20-slot profile with explicit embedding parameters.
///
/// Statistical slots are always computed (8 samples suffice). The
/// estimators with stronger preconditions fall back per slot instead of
/// failing the whole profile: Lyapunov exponent and the fractal
/// dimensions need 128 samples (and the correlation dimension 500
/// embedded points), the Hurst exponent 64 samples, the recurrence
/// metrics 50 embedded points. Any fallback sets `degraded`.
pub fn chaos_profile_with(series: &[f64], m: usize, tau: usize) -> Result<ChaosProfile> {
    if series.iter().any(|v| !v.is_finite()) {
        return Err(NltsError::NonFiniteInput);
    }
    if series.len() < 8 {
        return Err(NltsError::SeriesTooShort {
            needed: 8,
            got: series.len(),
        });
    }
    let mut degraded = series.len() < FULL_PROFILE_LEN;

    let st = statistical_descriptors(series)?;

    let entropy = sample_entropy(series, ENTROPY_TEMPLATE_LEN, ENTROPY_TOLERANCE)
        .unwrap_or_else(|_| {
            degraded = true;
            0.0
        });

    let hurst = if series.len() >= 64 {
        hurst_exponent(series).unwrap_or_else(|_| {
            degraded = true;
            0.5
        })
    } else {
        degraded = true;
        0.5
    };

    let emb = delay_embed(series, m, tau).ok();

    let (recurrence_rate, determinism) = match &emb {
        Some(e) if e.len() >= 50 => recurrence_metrics(e, None).unwrap_or_else(|_| {
            degraded = true;
            (0.0, 0.0)
        }),
        _ => {
            degraded = true;
            (0.0, 0.0)
        }
    };

    let mut lyapunov = 0.0;
    let mut corr_dimension = 0.0;
    let mut box_dimension = 0.0;
    if series.len() >= FULL_PROFILE_LEN {
        lyapunov = largest_lyapunov(series, m, tau).unwrap_or_else(|_| {
            degraded = true;
            0.0
        });
        match &emb {
            Some(e) if e.len() >= 500 => {
                corr_dimension = correlation_dimension(e).unwrap_or_else(|_| {
                    degraded = true;
                    0.0
                });
            }
            _ => degraded = true,
        }
        match &emb {
            Some(e) => {
                box_dimension = box_counting_dimension(e).unwrap_or_else(|_| {
                    degraded = true;
                    0.0
                });
            }
            None => degraded = true,
        }
    }

    let mut slots = [
        lyapunov,
        hurst,
        entropy,
        corr_dimension,
        box_dimension,
        recurrence_rate,
        determinism,
        st.spectral_energy,
        st.mean,
        st.variance,
        st.cv,
        st.autocorr_lag1,
        st.skewness,
        st.kurtosis,
        st.trend_strength,
        st.seasonal_strength,
        0.0,
        0.0,
        0.0,
        0.0,
    ];
    for s in &mut slots {
        if !s.is_finite() {
            *s = 0.0;
            degraded = true;
        }
    }
    Ok(ChaosProfile::from_slots(slots, degraded))
}

/// Weighted Euclidean distance between two profiles.
///
/// Negative weights are treated as zero, so the result is always a
/// pseudometric over the slot vectors.
pub fn profile_distance(a: &ChaosProfile, b: &ChaosProfile, weights: &[f64; 20]) -> f64 {
    let ones = [1.0; 20];
    let zeros = [0.0; 20];
    profile_distance_zscored(a, b, weights, &zeros, &ones)
}

/// Weighted Euclidean distance over z-scored slots, with the centering
/// and scaling statistics supplied by the caller. Scales with magnitude
/// below 1e-12 are treated as 1 to keep the distance finite.
pub fn profile_distance_zscored(
    a: &ChaosProfile,
    b: &ChaosProfile,
    weights: &[f64; 20],
    center: &[f64; 20],
    scale: &[f64; 20],
) -> f64 {
    let sa = a.slots();
    let sb = b.slots();
    let mut acc = 0.0;
    for i in 0..ChaosProfile::SLOTS {
        let s = if scale[i].abs() < 1e-12 { 1.0 } else { scale[i] };
        let za = (sa[i] - center[i]) / s;
        let zb = (sb[i] - center[i]) / s;
        let w = weights[i].max(0.0);
        acc += w * (za - zb) * (za - zb);
    }
    acc.sqrt()
}
