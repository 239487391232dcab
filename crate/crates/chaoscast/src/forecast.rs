//! Horizon-split forecast heads with fused aleatoric uncertainty.
//!
//! Three heads each predict means and log-variances for the full horizon.
//! A softmax over the conditioning vector blends the heads, and the same
//! weights blend their variances, so uncertainty widens whenever the
//! blend leans on a head that is itself uncertain. Specialization comes
//! from the loss side: each head's likelihood is upweighted on the slice
//! of the horizon it owns.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

/// Log-variance outputs are clamped to this symmetric range before
/// exponentiation, keeping variances inside [e^-10, e^10].
pub const LOGVAR_CLAMP: f64 = 10.0;

#[derive(Debug, Error)]
pub enum ForecastError {
    #[error("variance must be positive everywhere, found {got}")]
    NonPositiveVariance { got: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, ForecastError>;

/// Which slice of the horizon a head is trained to own.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HorizonTag {
    Short,
    Mid,
    Long,
}

/// Head order used everywhere: fusion weight columns, collected
/// parameter names, and the per-head vectors in a forecast.
pub const HORIZON_TAGS: [HorizonTag; 3] = [HorizonTag::Short, HorizonTag::Mid, HorizonTag::Long];

impl HorizonTag {
    fn label(self) -> &'static str {
        match self {
            HorizonTag::Short => "short",
            HorizonTag::Mid => "mid",
            HorizonTag::Long => "long",
        }
    }
}

/// Steps a head is responsible for. The short head owns the leading
/// ceil(H/3) steps, the long head the trailing floor(H/3), and the mid
/// head whatever sits between.
pub fn horizon_band(tag: HorizonTag, horizon: usize) -> std::ops::Range<usize> {
    let lead = horizon.div_ceil(3);
    let trail = horizon / 3;
    match tag {
        HorizonTag::Short => 0..lead,
        HorizonTag::Mid => lead..horizon - trail,
        HorizonTag::Long => horizon - trail..horizon,
    }
}

/// One prediction head: a linear mean map and a linear log-variance map,
/// both reading the node representation with the conditioning vector
/// appended.
#[derive(Debug)]
pub struct HeadParams {
    pub tag: HorizonTag,
    pub w_mean: Tensor,
    pub b_mean: Tensor,
    pub w_logvar: Tensor,
    pub b_logvar: Tensor,
}

#[derive(Debug)]
pub struct ForecastParams {
    pub heads: Vec<HeadParams>,
    pub w_omega: Tensor,
    pub b_omega: Tensor,
    pub horizon: usize,
}

impl ForecastParams {
    pub fn init<R: Rng>(d_z: usize, cond_dim: usize, horizon: usize, rng: &mut R) -> ForecastParams {
        let heads = HORIZON_TAGS
            .iter()
            .map(|&tag| HeadParams {
                tag,
                w_mean: glorot(d_z + cond_dim, horizon, rng),
                b_mean: Tensor::zeros(1, horizon),
                w_logvar: glorot(d_z + cond_dim, horizon, rng),
                b_logvar: Tensor::zeros(1, horizon),
            })
            .collect();
        ForecastParams {
            heads,
            w_omega: glorot(cond_dim, 3, rng),
            b_omega: Tensor::zeros(1, 3),
            horizon,
        }
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for head in &self.heads {
            let name = head.tag.label();
            out.push((format!("{prefix}.{name}.mean.w"), head.w_mean.clone()));
            out.push((format!("{prefix}.{name}.mean.b"), head.b_mean.clone()));
            out.push((format!("{prefix}.{name}.logvar.w"), head.w_logvar.clone()));
            out.push((format!("{prefix}.{name}.logvar.b"), head.b_logvar.clone()));
        }
        out.push((format!("{prefix}.fusion.w"), self.w_omega.clone()));
        out.push((format!("{prefix}.fusion.b"), self.b_omega.clone()));
    }
}

fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new(-limit, limit);
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(rows, cols, data).expect("sized data")
}

/// Blended multi-horizon forecast plus everything needed to inspect it.
#[derive(Debug)]
pub struct ForecastWithUncertainty {
    pub y_fused: Tensor,
    pub var_fused: Tensor,
    /// 1x3 softmax weights, in [`HORIZON_TAGS`] order.
    pub omega: Tensor,
    pub head_means: Vec<Tensor>,
    pub head_vars: Vec<Tensor>,
}

/// Softmax blend weights over the three heads, driven by the
/// conditioning vector.
pub fn fusion_weights(c: &Tensor, w_omega: &Tensor, b_omega: &Tensor) -> Result<Tensor> {
    Ok(c.matmul(w_omega)?.add(b_omega)?.softmax())
}

/// Runs every head on `z` (N rows of node representation) and blends
/// means and variances with the conditioning-driven weights.
pub fn predict(z: &Tensor, c: &Tensor, params: &ForecastParams) -> Result<ForecastWithUncertainty> {
    let zc = Tensor::concat_cols(&[z.clone(), c.tile_rows(z.rows())])?;
    let omega = fusion_weights(c, &params.w_omega, &params.b_omega)?;

    let mut head_means = Vec::with_capacity(params.heads.len());
    let mut head_vars = Vec::with_capacity(params.heads.len());
    for head in &params.heads {
        let mean = zc.matmul(&head.w_mean)?.add(&head.b_mean)?;
        let logvar = zc
            .matmul(&head.w_logvar)?
            .add(&head.b_logvar)?
            .clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP);
        head_means.push(mean);
        head_vars.push(logvar.exp());
    }

    let mut y_fused = head_means[0].mul(&omega.slice(0, 1, 0, 1)?)?;
    let mut var_fused = head_vars[0].mul(&omega.slice(0, 1, 0, 1)?)?;
    for h in 1..head_means.len() {
        let w = omega.slice(0, 1, h, h + 1)?;
        y_fused = y_fused.add(&head_means[h].mul(&w)?)?;
        var_fused = var_fused.add(&head_vars[h].mul(&w)?)?;
    }

    Ok(ForecastWithUncertainty {
        y_fused,
        var_fused,
        omega,
        head_means,
        head_vars,
    })
}

fn check_positive(var: &Tensor) -> Result<()> {
    if let Some(&bad) = var.data().iter().find(|v| **v <= 0.0) {
        return Err(ForecastError::NonPositiveVariance { got: bad });
    }
    Ok(())
}

/// Per-element negative log-likelihood matrix under independent
/// Gaussians: 0.5*ln(2*pi*var) + (y - y_hat)^2 / (2*var).
fn nll_elements(y: &Tensor, y_hat: &Tensor, var: &Tensor) -> Result<Tensor> {
    let diff = y.sub(y_hat)?;
    let quad = diff.mul(&diff)?.mul(&var.powf(-1.0))?.scale(0.5);
    let log_term = var.log().shift(std::f64::consts::TAU.ln()).scale(0.5);
    Ok(log_term.add(&quad)?)
}

/// Mean Gaussian negative log-likelihood over all entries.
pub fn gaussian_nll(y: &Tensor, y_hat: &Tensor, var: &Tensor) -> Result<Tensor> {
    check_positive(var)?;
    Ok(nll_elements(y, y_hat, var)?.mean())
}

/// Head likelihood with the head's own horizon band counted twice.
///
/// Weights are normalized to mean one so this stays on the same scale as
/// the plain likelihood and reduces to it when the band is empty.
pub fn weighted_head_nll(
    y: &Tensor,
    y_hat: &Tensor,
    var: &Tensor,
    tag: HorizonTag,
) -> Result<Tensor> {
    check_positive(var)?;
    let h = y.cols();
    let band = horizon_band(tag, h);
    let mut w: Vec<f64> = (0..h).map(|j| if band.contains(&j) { 2.0 } else { 1.0 }).collect();
    let mean_w = w.iter().sum::<f64>() / h as f64;
    for v in &mut w {
        *v /= mean_w;
    }
    let weights = Tensor::from_vec(1, h, w)?;
    Ok(nll_elements(y, y_hat, var)?.mul(&weights)?.mean())
}

/// Uncertainty objective: fused likelihood plus the average of the three
/// band-weighted head likelihoods.
pub fn uncertainty_loss(y: &Tensor, forecast: &ForecastWithUncertainty) -> Result<Tensor> {
    let mut loss = gaussian_nll(y, &forecast.y_fused, &forecast.var_fused)?;
    for (i, &tag) in HORIZON_TAGS.iter().enumerate() {
        let head = weighted_head_nll(y, &forecast.head_means[i], &forecast.head_vars[i], tag)?;
        loss = loss.add(&head.scale(1.0 / 3.0))?;
    }
    Ok(loss)
}

/// Inverse of the standard normal CDF, Acklam's rational approximation.
/// Absolute error stays below 1e-8 across (0, 1); endpoints map to
/// signed infinity.
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }

    const A: [f64; 6] = [
        -3.969683028665376e1,
        2.209460984245205e2,
        -2.759285104469687e2,
        1.383577518672690e2,
        -3.066479806614716e1,
        2.506628277459239e0,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e1,
        1.615858368580409e2,
        -1.556989798598866e2,
        6.680131188771972e1,
        -1.328068155288572e1,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-3,
        -3.223964580411365e-1,
        -2.400758277161838e0,
        -2.549732539343734e0,
        4.374664141464968e0,
        2.938163982698783e0,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-3,
        3.224671290700398e-1,
        2.445134137142996e0,
        3.754408661907416e0,
    ];
    const P_LOW: f64 = 0.02425;

    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };

    if p < P_LOW {
        tail((-2.0 * p.ln()).sqrt())
    } else if p <= 1.0 - P_LOW {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -tail((-2.0 * (1.0 - p).ln()).sqrt())
    }
}

/// Fraction of targets inside the central (1 - alpha) interval of the
/// fused Gaussian forecast.
pub fn coverage(y: &Tensor, forecast: &ForecastWithUncertainty, alpha: f64) -> f64 {
    let z = normal_quantile(1.0 - alpha / 2.0);
    let yv = y.value();
    let mu = forecast.y_fused.value();
    let var = forecast.var_fused.value();
    let inside = yv
        .iter()
        .zip(mu.iter().zip(var.iter()))
        .filter(|(yi, (mi, vi))| (*yi - *mi).abs() <= z * vi.sqrt())
        .count();
    inside as f64 / yv.len() as f64
}
