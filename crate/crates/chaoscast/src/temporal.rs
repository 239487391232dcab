//! Multi-scale temporal encoder.
//!
//! An input sequence is mean-pooled at four dyadic factors, each branch is
//! run through its own LSTM, the branch outputs are spline-interpolated
//! back to the input length, concatenated, projected, and finally passed
//! through a small stack of conditioned attention blocks.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use thiserror::Error;

use crate::attention::{chaos_attention, AttentionError, AttnParams};
use crate::tensor::{Tensor, TensorError};

/// Pooling factors of the four encoder branches.
pub const SCALE_FACTORS: [usize; 4] = [1, 2, 4, 8];

#[derive(Debug, Error)]
pub enum TemporalError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Attention(#[from] AttentionError),
}

type Result<T> = std::result::Result<T, TemporalError>;

/// Shape decisions for one encoder instance.
#[derive(Debug, Clone)]
pub struct MultiScaleConfig {
    pub d_hidden: usize,
    pub seq_len: usize,
    pub depth: usize,
    pub heads: usize,
    pub cond_dim: usize,
}

impl Default for MultiScaleConfig {
    fn default() -> Self {
        MultiScaleConfig {
            d_hidden: 16,
            seq_len: 12,
            depth: 2,
            heads: 8,
            cond_dim: crate::nlts::ChaosProfile::SLOTS,
        }
    }
}

/// One recurrent step's hidden and cell vectors, both 1 x d_hidden.
#[derive(Debug, Clone)]
pub struct CellState {
    pub h: Tensor,
    pub c: Tensor,
}

impl CellState {
    pub fn zero(d_hidden: usize) -> CellState {
        CellState {
            h: Tensor::zeros(1, d_hidden),
            c: Tensor::zeros(1, d_hidden),
        }
    }
}

/// LSTM weights. The four gates live side by side in the column dimension,
/// ordered input, forget, candidate, output.
#[derive(Debug)]
pub struct LstmParams {
    pub w_x: Tensor,
    pub w_h: Tensor,
    pub b: Tensor,
}

impl LstmParams {
    /// Glorot-uniform weights; biases zero except the forget gate, which
    /// starts at one so early training does not flush the cell state.
    pub fn init<R: Rng>(d_in: usize, d_hidden: usize, rng: &mut R) -> LstmParams {
        let mut bias = vec![0.0; 4 * d_hidden];
        for v in bias[d_hidden..2 * d_hidden].iter_mut() {
            *v = 1.0;
        }
        LstmParams {
            w_x: glorot(d_in, 4 * d_hidden, rng),
            w_h: glorot(d_hidden, 4 * d_hidden, rng),
            b: Tensor::from_vec(1, 4 * d_hidden, bias).expect("sized data"),
        }
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w_x"), self.w_x.clone()));
        out.push((format!("{prefix}.w_h"), self.w_h.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }

    fn d_hidden(&self) -> usize {
        self.w_h.rows()
    }
}

fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new(-limit, limit);
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(rows, cols, data).expect("sized data")
}

/// Non-overlapping mean pooling with window `k`; a ragged tail is averaged
/// over its actual length. `k = 1` returns the input unchanged.
pub fn downsample(x: &Tensor, k: usize) -> Tensor {
    assert!(k >= 1, "pooling window must be positive");
    let t = x.rows();
    if k == 1 || t == 0 {
        return x.clone();
    }
    let out_len = t.div_ceil(k);
    let mut pool = vec![0.0; out_len * t];
    for i in 0..out_len {
        let start = i * k;
        let end = ((i + 1) * k).min(t);
        let w = 1.0 / (end - start) as f64;
        for j in start..end {
            pool[i * t + j] = w;
        }
    }
    let pool = Tensor::from_vec(out_len, t, pool).expect("sized data");
    pool.matmul(x).expect("pooling shapes agree")
}

/// One LSTM step.
pub fn lstm_cell(x: &Tensor, state: &CellState, params: &LstmParams) -> Result<CellState> {
    let d = params.d_hidden();
    let z = x
        .matmul(&params.w_x)?
        .add(&state.h.matmul(&params.w_h)?)?
        .add(&params.b)?;
    let input = z.slice(0, 1, 0, d)?.sigmoid();
    let forget = z.slice(0, 1, d, 2 * d)?.sigmoid();
    let candidate = z.slice(0, 1, 2 * d, 3 * d)?.tanh();
    let output = z.slice(0, 1, 3 * d, 4 * d)?.sigmoid();
    let c = forget.mul(&state.c)?.add(&input.mul(&candidate)?)?;
    let h = output.mul(&c.tanh())?;
    Ok(CellState { h, c })
}

/// Runs the recurrence over every row of `x` and stacks the hidden states.
pub fn lstm_encode(x: &Tensor, params: &LstmParams) -> Result<Tensor> {
    let mut state = CellState::zero(params.d_hidden());
    let mut hidden = Vec::with_capacity(x.rows());
    for t in 0..x.rows() {
        state = lstm_cell(&x.row(t)?, &state, params)?;
        hidden.push(state.h.clone());
    }
    Ok(Tensor::concat_rows(&hidden)?)
}

/// Cubic-spline interpolation of each column onto `target_len` uniformly
/// spaced points spanning the input's index range; endpoints are preserved
/// exactly. Degenerate lengths fall back to quadratic (3 points), linear
/// (2) or repetition (1). The interpolation matrix is a constant, so
/// gradients pass straight through to `y`.
pub fn spline_upsample(y: &Tensor, target_len: usize) -> Tensor {
    let n = y.rows();
    assert!(n >= 1, "need at least one sample");
    assert!(target_len >= 1, "need at least one output step");
    if n == target_len {
        return y.clone();
    }
    let matrix = interpolation_matrix(n, target_len);
    let u = Tensor::from_vec(target_len, n, matrix).expect("sized data");
    u.matmul(y).expect("interpolation shapes agree")
}

/// Row-major `target_len x n` matrix mapping knot values to interpolated
/// values. Knots sit at 0..n-1; targets at j * (n-1) / (target_len - 1).
fn interpolation_matrix(n: usize, target_len: usize) -> Vec<f64> {
    let mut u = vec![0.0; target_len * n];
    let positions: Vec<f64> = (0..target_len)
        .map(|j| {
            if target_len == 1 {
                0.0
            } else {
                j as f64 * (n - 1) as f64 / (target_len - 1) as f64
            }
        })
        .collect();

    match n {
        1 => {
            for j in 0..target_len {
                u[j * n] = 1.0;
            }
        }
        2 => {
            for (j, &x) in positions.iter().enumerate() {
                u[j * n] = 1.0 - x;
                u[j * n + 1] = x;
            }
        }
        3 => {
            // Three points determine a single quadratic.
            for (j, &x) in positions.iter().enumerate() {
                u[j * n] = (x - 1.0) * (x - 2.0) / 2.0;
                u[j * n + 1] = -x * (x - 2.0);
                u[j * n + 2] = x * (x - 1.0) / 2.0;
            }
        }
        _ => {
            // Second derivatives from the not-a-knot system, solved for all
            // unit knot vectors at once. Unit spacing keeps the algebra flat:
            // interior rows M[i-1] + 4 M[i] + M[i+1] = 6 (y[i-1] - 2 y[i] + y[i+1]),
            // end rows force third-derivative continuity at the first and
            // last interior knots.
            let mut a = DMatrix::<f64>::zeros(n, n);
            let mut b = DMatrix::<f64>::zeros(n, n);
            a[(0, 0)] = 1.0;
            a[(0, 1)] = -2.0;
            a[(0, 2)] = 1.0;
            for i in 1..n - 1 {
                a[(i, i - 1)] = 1.0;
                a[(i, i)] = 4.0;
                a[(i, i + 1)] = 1.0;
                b[(i, i - 1)] = 6.0;
                b[(i, i)] = -12.0;
                b[(i, i + 1)] = 6.0;
            }
            a[(n - 1, n - 3)] = 1.0;
            a[(n - 1, n - 2)] = -2.0;
            a[(n - 1, n - 1)] = 1.0;
            let m = a.lu().solve(&b).expect("not-a-knot system is nonsingular");

            for (j, &x) in positions.iter().enumerate() {
                let seg = (x.floor() as usize).min(n - 2);
                let t = x - seg as f64;
                let w_lo = 1.0 - t;
                let cub_lo = (w_lo * w_lo * w_lo - w_lo) / 6.0;
                let cub_hi = (t * t * t - t) / 6.0;
                for col in 0..n {
                    u[j * n + col] = cub_lo * m[(seg, col)] + cub_hi * m[(seg + 1, col)];
                }
                u[j * n + seg] += w_lo;
                u[j * n + seg + 1] += t;
            }
        }
    }
    u
}

/// Concatenates the four branch outputs channel-wise and projects back to
/// the hidden width.
pub fn fuse_scales(branches: &[Tensor], w_p: &Tensor, b_p: &Tensor) -> Result<Tensor> {
    let stacked = Tensor::concat_cols(branches)?;
    Ok(stacked.matmul(w_p)?.add(b_p)?)
}

/// One attention block: conditioned attention with residual, layer norm,
/// position-wise feed-forward with residual, layer norm. Post-norm layout.
#[derive(Debug)]
pub struct EncoderBlock {
    pub attn: AttnParams,
    pub ln1_gamma: Tensor,
    pub ln1_beta: Tensor,
    pub ffn_w1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_w2: Tensor,
    pub ffn_b2: Tensor,
    pub ln2_gamma: Tensor,
    pub ln2_beta: Tensor,
}

impl EncoderBlock {
    pub fn init<R: Rng>(cfg: &MultiScaleConfig, rng: &mut R) -> EncoderBlock {
        let d = cfg.d_hidden;
        let wide = 4 * d;
        EncoderBlock {
            attn: AttnParams::init(d, d, cfg.cond_dim, cfg.seq_len, cfg.heads, rng),
            ln1_gamma: Tensor::ones(1, d),
            ln1_beta: Tensor::zeros(1, d),
            ffn_w1: glorot(d, wide, rng),
            ffn_b1: Tensor::zeros(1, wide),
            ffn_w2: glorot(wide, d, rng),
            ffn_b2: Tensor::zeros(1, d),
            ln2_gamma: Tensor::ones(1, d),
            ln2_beta: Tensor::zeros(1, d),
        }
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        self.attn.collect(&format!("{prefix}.attn"), out);
        out.push((format!("{prefix}.ln1.gamma"), self.ln1_gamma.clone()));
        out.push((format!("{prefix}.ln1.beta"), self.ln1_beta.clone()));
        out.push((format!("{prefix}.ffn.w1"), self.ffn_w1.clone()));
        out.push((format!("{prefix}.ffn.b1"), self.ffn_b1.clone()));
        out.push((format!("{prefix}.ffn.w2"), self.ffn_w2.clone()));
        out.push((format!("{prefix}.ffn.b2"), self.ffn_b2.clone()));
        out.push((format!("{prefix}.ln2.gamma"), self.ln2_gamma.clone()));
        out.push((format!("{prefix}.ln2.beta"), self.ln2_beta.clone()));
    }

    fn forward(&self, h: &Tensor, c: &Tensor) -> Result<Tensor> {
        let attended = chaos_attention(h, c, &self.attn)?.h_att;
        let normed = attended
            .layer_norm()
            .mul(&self.ln1_gamma)?
            .add(&self.ln1_beta)?;
        let ffn = normed
            .matmul(&self.ffn_w1)?
            .add(&self.ffn_b1)?
            .relu()
            .matmul(&self.ffn_w2)?
            .add(&self.ffn_b2)?;
        Ok(normed
            .add(&ffn)?
            .layer_norm()
            .mul(&self.ln2_gamma)?
            .add(&self.ln2_beta)?)
    }
}

/// Full encoder parameter set: one LSTM per scale factor, the fusion
/// projection, and the attention blocks.
#[derive(Debug)]
pub struct EncoderParams {
    pub branches: Vec<LstmParams>,
    pub w_p: Tensor,
    pub b_p: Tensor,
    pub blocks: Vec<EncoderBlock>,
}

impl EncoderParams {
    pub fn init<R: Rng>(d_in: usize, cfg: &MultiScaleConfig, rng: &mut R) -> EncoderParams {
        let branches = SCALE_FACTORS
            .iter()
            .map(|_| LstmParams::init(d_in, cfg.d_hidden, rng))
            .collect();
        let blocks = (0..cfg.depth).map(|_| EncoderBlock::init(cfg, rng)).collect();
        EncoderParams {
            branches,
            w_p: glorot(SCALE_FACTORS.len() * cfg.d_hidden, cfg.d_hidden, rng),
            b_p: Tensor::zeros(1, cfg.d_hidden),
            blocks,
        }
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        for (i, branch) in self.branches.iter().enumerate() {
            branch.collect(&format!("{prefix}.branch{i}"), out);
        }
        out.push((format!("{prefix}.proj.w"), self.w_p.clone()));
        out.push((format!("{prefix}.proj.b"), self.b_p.clone()));
        for (i, block) in self.blocks.iter().enumerate() {
            block.collect(&format!("{prefix}.block{i}"), out);
        }
    }
}

/// Encodes one node's `T x d_in` feature sequence into `T x d_hidden`.
pub fn encode(x: &Tensor, c: &Tensor, params: &EncoderParams) -> Result<Tensor> {
    let t = x.rows();
    let mut upsampled = Vec::with_capacity(SCALE_FACTORS.len());
    for (branch, &k) in params.branches.iter().zip(SCALE_FACTORS.iter()) {
        let pooled = downsample(x, k);
        let hidden = lstm_encode(&pooled, branch)?;
        upsampled.push(spline_upsample(&hidden, t));
    }
    let mut h = fuse_scales(&upsampled, &params.w_p, &params.b_p)?;
    for block in params.blocks.iter() {
        h = block.forward(&h, c)?;
    }
    Ok(h)
}
