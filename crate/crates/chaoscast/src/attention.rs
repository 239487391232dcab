//! Conditioned multi-head attention.
//!
//! The attention weights are shaped by a per-series conditioning vector in
//! three places: a FiLM-style rescaling of the QKV projections, a
//! multiplicative sigmoid gate on the score matrix, and an additive
//! symmetric bias. `realize_target_pattern` inverts the mechanism: given a
//! desired row-stochastic weight matrix it solves for parameters that
//! reproduce it and reports the residual.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

/// Head count used by the forecaster's encoder blocks.
pub const ATTENTION_HEADS: usize = 8;

/// Gate pre-activation magnitude used when a realized pattern must hold the
/// gate fully open. sigmoid(6 * 6) is 1 minus ~2e-16, i.e. saturated in f64.
pub const GATE_KAPPA: f64 = 6.0;

#[derive(Debug, Error)]
pub enum AttentionError {
    #[error("projection width {width} is not divisible by {heads} heads")]
    HeadSplit { width: usize, heads: usize },
    #[error("gate and bias maps are sized for sequence length {expected}, got {got}")]
    SequenceLength { expected: usize, got: usize },
    #[error("invalid target pattern: {detail}")]
    InvalidTarget { detail: String },
    #[error("context rows are linearly dependent; projection targets cannot be hit")]
    RankDeficient,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, AttentionError>;

/// Parameters of one conditioned attention layer.
///
/// Base projections are `d_model x width`; `cond_*` map an `f`-dimensional
/// conditioning row to a per-feature scale so that the effective projection
/// is `diag(1 + c . cond) . w`. `w_g` and `w_b` map the conditioning row to
/// the length-`t` gate and bias vectors, which ties a layer to the sequence
/// length it was built for.
#[derive(Debug)]
pub struct AttnParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub cond_q: Tensor,
    pub cond_k: Tensor,
    pub cond_v: Tensor,
    pub w_g: Tensor,
    pub w_b: Tensor,
    pub heads: usize,
}

/// Attention result: the mixed sequence and the per-head weight matrices.
#[derive(Debug)]
pub struct AttentionOutput {
    pub h_att: Tensor,
    pub weights: Vec<Tensor>,
}

impl AttnParams {
    /// Fresh layer with Glorot-uniform projections, zero conditioning scales
    /// and small random gate/bias maps. Starting `cond_*` at zero makes the
    /// initial layer ignore the conditioning vector; the gate/bias maps get
    /// a small spread because the gate gradient vanishes at exactly zero.
    pub fn init<R: Rng>(
        d_model: usize,
        width: usize,
        cond_dim: usize,
        seq_len: usize,
        heads: usize,
        rng: &mut R,
    ) -> AttnParams {
        let glorot = |rows: usize, cols: usize, rng: &mut R| {
            let limit = (6.0 / (rows + cols) as f64).sqrt();
            let dist = Uniform::new(-limit, limit);
            let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
            Tensor::from_vec(rows, cols, data).expect("sized data")
        };
        let spread = Normal::new(0.0, 0.1).expect("valid std");
        let small = |rows: usize, cols: usize, rng: &mut R| {
            let data = (0..rows * cols).map(|_| spread.sample(rng)).collect();
            Tensor::from_vec(rows, cols, data).expect("sized data")
        };
        AttnParams {
            w_q: glorot(d_model, width, rng),
            w_k: glorot(d_model, width, rng),
            w_v: glorot(d_model, width, rng),
            w_o: glorot(width, d_model, rng),
            cond_q: Tensor::zeros(cond_dim, d_model),
            cond_k: Tensor::zeros(cond_dim, d_model),
            cond_v: Tensor::zeros(cond_dim, d_model),
            w_g: small(cond_dim, seq_len, rng),
            w_b: small(cond_dim, seq_len, rng),
            heads,
        }
    }

    /// Registers every tensor under `prefix` in a stable order.
    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.w_q"), self.w_q.clone()));
        out.push((format!("{prefix}.w_k"), self.w_k.clone()));
        out.push((format!("{prefix}.w_v"), self.w_v.clone()));
        out.push((format!("{prefix}.w_o"), self.w_o.clone()));
        out.push((format!("{prefix}.cond_q"), self.cond_q.clone()));
        out.push((format!("{prefix}.cond_k"), self.cond_k.clone()));
        out.push((format!("{prefix}.cond_v"), self.cond_v.clone()));
        out.push((format!("{prefix}.w_g"), self.w_g.clone()));
        out.push((format!("{prefix}.w_b"), self.w_b.clone()));
    }
}

/// Conditioned QKV projection.
///
/// Each projection rescales the input features by `1 + c . cond` before the
/// base matmul, so a zero conditioning vector (or zero `cond_*` map) leaves
/// the base projection untouched.
pub fn project_qkv(
    h: &Tensor,
    c: &Tensor,
    params: &AttnParams,
) -> Result<(Tensor, Tensor, Tensor)> {
    let one = Tensor::ones(1, h.cols());
    let project = |w: &Tensor, cond: &Tensor| -> Result<Tensor> {
        let scale = one.add(&c.matmul(cond)?)?;
        Ok(h.mul(&scale)?.matmul(w)?)
    };
    Ok((
        project(&params.w_q, &params.cond_q)?,
        project(&params.w_k, &params.cond_k)?,
        project(&params.w_v, &params.cond_v)?,
    ))
}

/// Gate and bias matrices for a length-`t` sequence.
///
/// The gate is `sigmoid(g g^T)` with `g = c . w_g`, the bias is
/// `u 1^T + 1 u^T` with `u = c . w_b`; both are symmetric by construction.
pub fn gate_and_bias(c: &Tensor, params: &AttnParams, t: usize) -> Result<(Tensor, Tensor)> {
    if params.w_g.cols() != t || params.w_b.cols() != t {
        return Err(AttentionError::SequenceLength {
            expected: params.w_g.cols(),
            got: t,
        });
    }
    let g = c.matmul(&params.w_g)?;
    let gate = g.transpose().matmul(&g)?.sigmoid();
    let u = c.matmul(&params.w_b)?;
    let bias = u
        .transpose()
        .matmul(&Tensor::ones(1, t))?
        .add(&Tensor::ones(t, 1).matmul(&u)?)?;
    Ok((gate, bias))
}

/// Full conditioned attention layer with residual output.
pub fn chaos_attention(h: &Tensor, c: &Tensor, params: &AttnParams) -> Result<AttentionOutput> {
    let (q, k, v) = project_qkv(h, c, params)?;
    let (gate, bias) = gate_and_bias(c, params, h.rows())?;
    attention_with_gate_bias(h, &q, &k, &v, &gate, &bias, &params.w_o, params.heads)
}

/// Attention core with the gate and bias supplied explicitly.
///
/// Per head, `A = softmax((Q K^T / sqrt(d_head)) * G + B)`; head outputs are
/// concatenated, mixed by `w_o` and added back onto `h`.
pub fn attention_with_gate_bias(
    h: &Tensor,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    gate: &Tensor,
    bias: &Tensor,
    w_o: &Tensor,
    heads: usize,
) -> Result<AttentionOutput> {
    let t = h.rows();
    let width = q.cols();
    if heads == 0 || width % heads != 0 {
        return Err(AttentionError::HeadSplit { width, heads });
    }
    if gate.shape() != (t, t) || bias.shape() != (t, t) {
        return Err(AttentionError::SequenceLength {
            expected: t,
            got: gate.rows(),
        });
    }
    let d_head = width / heads;
    let inv_sqrt = 1.0 / (d_head as f64).sqrt();
    let mut mixed = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for head in 0..heads {
        let c0 = head * d_head;
        let c1 = c0 + d_head;
        let qh = q.slice(0, t, c0, c1)?;
        let kh = k.slice(0, t, c0, c1)?;
        let vh = v.slice(0, t, c0, c1)?;
        let scores = qh.matmul(&kh.transpose())?.scale(inv_sqrt);
        let a = scores.mul(gate)?.add(bias)?.softmax();
        mixed.push(a.matmul(&vh)?);
        weights.push(a);
    }
    let h_att = Tensor::concat_cols(&mixed)?.matmul(w_o)?.add(h)?;
    Ok(AttentionOutput { h_att, weights })
}

/// A parameter set that reproduces a requested attention pattern, plus the
/// pattern it actually produces and the Frobenius distance between the two.
#[derive(Debug)]
pub struct RealizedPattern {
    pub params: AttnParams,
    pub attention: Tensor,
    pub error: f64,
}

/// Solves for single-head parameters whose attention weights match `a_star`.
///
/// The log-pattern is split into symmetric and skew parts. The symmetric
/// part is reproduced exactly through an eigenfactorization of the score
/// matrix (with the gate saturated open so the elementwise product is a
/// known constant); the skew part is fitted in a least-squares sense by the
/// bias vector, which can absorb exactly the column-effect component.
/// Row-wise softmax ignores the remaining row-effect, so patterns whose
/// skew part is a pure row/column effect are reproduced to round-off.
///
/// `c` anchors the gate and bias maps: they are rank-one maps that produce
/// the required vectors when fed this conditioning row. `d_k` must be at
/// least the sequence length so the score factorization fits.
pub fn realize_target_pattern(
    a_star: &Tensor,
    h: &Tensor,
    c: &Tensor,
    d_k: usize,
) -> Result<RealizedPattern> {
    let t = a_star.rows();
    let invalid = |detail: String| AttentionError::InvalidTarget { detail };
    if a_star.cols() != t || t == 0 {
        return Err(invalid(format!(
            "pattern must be square and non-empty, got {}x{}",
            a_star.rows(),
            a_star.cols()
        )));
    }
    let star = a_star.value();
    for (idx, &v) in star.iter().enumerate() {
        if !v.is_finite() || v <= 0.0 {
            return Err(invalid(format!(
                "entry ({}, {}) is {v}; all entries must be positive",
                idx / t,
                idx % t
            )));
        }
    }
    for i in 0..t {
        let sum: f64 = star[i * t..(i + 1) * t].iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(invalid(format!("row {i} sums to {sum}, expected 1")));
        }
    }
    if h.rows() != t {
        return Err(invalid(format!(
            "context has {} rows for a {t}-step pattern",
            h.rows()
        )));
    }
    if d_k < t {
        return Err(invalid(format!("d_k = {d_k} is below sequence length {t}")));
    }
    let c_row = c.value();
    let c_norm2: f64 = c_row.iter().map(|v| v * v).sum();
    if c_norm2 <= 0.0 || !c_norm2.is_finite() {
        return Err(invalid("conditioning row must be nonzero".into()));
    }

    // Log-pattern, row-centered so the gauge freedom of softmax is fixed.
    let mut logits = vec![0.0; t * t];
    for i in 0..t {
        let row = &star[i * t..(i + 1) * t];
        let mean = row.iter().map(|v| v.ln()).sum::<f64>() / t as f64;
        for j in 0..t {
            logits[i * t + j] = row[j].ln() - mean;
        }
    }
    let mut sym = DMatrix::zeros(t, t);
    let mut skew_col_mean = vec![0.0; t];
    for i in 0..t {
        for j in 0..t {
            let l = logits[i * t + j];
            let lt = logits[j * t + i];
            sym[(i, j)] = 0.5 * (l + lt);
            skew_col_mean[j] += 0.5 * (l - lt);
        }
    }
    for v in skew_col_mean.iter_mut() {
        *v /= t as f64;
    }

    // Factor the symmetric part into Q K^T, compensating for the score
    // scaling and the saturated gate value.
    let gate_value = 1.0 / (1.0 + (-GATE_KAPPA * GATE_KAPPA).exp());
    let scale = (d_k as f64).sqrt() / gate_value;
    let eig = SymmetricEigen::new(sym);
    let mut q_target = DMatrix::zeros(t, t);
    let mut k_target = DMatrix::zeros(t, t);
    for j in 0..t {
        let lambda = eig.eigenvalues[j];
        let mag = (lambda.abs() * scale).sqrt();
        let sign = if lambda < 0.0 { -1.0 } else { 1.0 };
        for i in 0..t {
            q_target[(i, j)] = eig.eigenvectors[(i, j)] * mag;
            k_target[(i, j)] = eig.eigenvectors[(i, j)] * mag * sign;
        }
    }

    // Pull the targets back through the context rows.
    let d = h.cols();
    let h_na = DMatrix::from_row_slice(t, d, &h.value());
    let svd = h_na.svd(true, true);
    let tol = svd.singular_values.max() * (t.max(d) as f64) * f64::EPSILON;
    if svd.rank(tol) < t {
        return Err(AttentionError::RankDeficient);
    }
    let pinv = svd
        .pseudo_inverse(tol)
        .map_err(|_| AttentionError::RankDeficient)?;
    let wq = &pinv * &q_target;
    let wk = &pinv * &k_target;
    let pad = |m: &DMatrix<f64>| {
        let mut data = vec![0.0; d * d_k];
        for i in 0..d {
            for j in 0..t {
                data[i * d_k + j] = m[(i, j)];
            }
        }
        Tensor::from_vec(d, d_k, data).expect("sized data")
    };

    // Rank-one maps that emit the saturating gate vector and the fitted
    // bias vector when fed the anchoring conditioning row.
    let f = c_row.len();
    let mut w_g = vec![0.0; f * t];
    let mut w_b = vec![0.0; f * t];
    for (fi, &cv) in c_row.iter().enumerate() {
        for j in 0..t {
            w_g[fi * t + j] = GATE_KAPPA * cv / c_norm2;
            w_b[fi * t + j] = skew_col_mean[j] * cv / c_norm2;
        }
    }

    let params = AttnParams {
        w_q: pad(&wq),
        w_k: pad(&wk),
        w_v: Tensor::zeros(d, d_k),
        w_o: Tensor::zeros(d_k, d),
        cond_q: Tensor::zeros(f, d),
        cond_k: Tensor::zeros(f, d),
        cond_v: Tensor::zeros(f, d),
        w_g: Tensor::from_vec(f, t, w_g).expect("sized data"),
        w_b: Tensor::from_vec(f, t, w_b).expect("sized data"),
        heads: 1,
    };

    let out = chaos_attention(h, c, &params)?;
    let attention = out.weights.into_iter().next().expect("one head");
    let produced = attention.value();
    let error = produced
        .iter()
        .zip(star.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    Ok(RealizedPattern {
        params,
        attention,
        error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seeded(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_tensor(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
        let data = (0..rows * cols)
            .map(|_| scale * (rng.gen::<f64>() - 0.5))
            .collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    fn tiny_params(d: usize, f: usize, t: usize, heads: usize, rng: &mut ChaCha8Rng) -> AttnParams {
        let mut p = AttnParams::init(d, d, f, t, heads, rng);
        p.cond_q = random_tensor(f, d, 0.4, rng);
        p.cond_k = random_tensor(f, d, 0.4, rng);
        p.cond_v = random_tensor(f, d, 0.4, rng);
        p
    }

    #[test]
    fn zero_conditioning_is_the_base_projection() {
        let mut rng = seeded(11);
        let p = tiny_params(4, 5, 3, 2, &mut rng);
        let h = random_tensor(3, 4, 2.0, &mut rng);
        let c = Tensor::zeros(1, 5);
        let (q, k, v) = project_qkv(&h, &c, &p).unwrap();
        assert_eq!(q.value(), h.matmul(&p.w_q).unwrap().value());
        assert_eq!(k.value(), h.matmul(&p.w_k).unwrap().value());
        assert_eq!(v.value(), h.matmul(&p.w_v).unwrap().value());
    }

    #[test]
    fn zero_modulation_map_ignores_conditioning() {
        let mut rng = seeded(12);
        let mut p = tiny_params(4, 5, 3, 2, &mut rng);
        p.cond_q = Tensor::zeros(5, 4);
        p.cond_k = Tensor::zeros(5, 4);
        p.cond_v = Tensor::zeros(5, 4);
        let h = random_tensor(3, 4, 2.0, &mut rng);
        let c1 = random_tensor(1, 5, 3.0, &mut rng);
        let c2 = random_tensor(1, 5, 3.0, &mut rng);
        let (q1, _, v1) = project_qkv(&h, &c1, &p).unwrap();
        let (q2, _, v2) = project_qkv(&h, &c2, &p).unwrap();
        assert_eq!(q1.value(), q2.value());
        assert_eq!(v1.value(), v2.value());
    }

    #[test]
    fn projection_gradient_matches_finite_differences_in_c() {
        let mut rng = seeded(13);
        let p = tiny_params(3, 4, 2, 1, &mut rng);
        let h = random_tensor(2, 3, 1.5, &mut rng);
        let c0 = random_tensor(1, 4, 1.0, &mut rng).value();

        let eval = |cd: &[f64]| -> f64 {
            let c = Tensor::from_vec(1, 4, cd.to_vec()).unwrap();
            let (q, k, v) = project_qkv(&h, &c, &p).unwrap();
            q.mul(&q).unwrap().sum()
                .add(&k.mul(&v).unwrap().sum())
                .unwrap()
                .item()
        };

        let c = Tensor::from_vec(1, 4, c0.clone()).unwrap();
        let (q, k, v) = project_qkv(&h, &c, &p).unwrap();
        let loss = q.mul(&q).unwrap().sum().add(&k.mul(&v).unwrap().sum()).unwrap();
        loss.backward().unwrap();
        let grad = c.grad();

        let eps = 1e-6;
        for i in 0..4 {
            let mut up = c0.clone();
            let mut dn = c0.clone();
            up[i] += eps;
            dn[i] -= eps;
            let fd = (eval(&up) - eval(&dn)) / (2.0 * eps);
            let err = (fd - grad[i]).abs();
            assert!(
                err < 1e-9 || err / fd.abs().max(1e-12) < 1e-5,
                "slot {i}: fd {fd} vs grad {}",
                grad[i]
            );
        }
    }

    #[test]
    fn large_gate_map_saturates_to_ones() {
        let mut rng = seeded(14);
        let mut p = tiny_params(4, 3, 5, 2, &mut rng);
        p.w_g = Tensor::from_vec(3, 5, vec![50.0; 15]).unwrap();
        p.w_b = Tensor::zeros(3, 5);
        let c = Tensor::from_vec(1, 3, vec![1.0, 2.0, 1.0]).unwrap();
        let (gate, bias) = gate_and_bias(&c, &p, 5).unwrap();
        for &v in gate.value().iter() {
            assert!(v > 1.0 - 1e-12, "gate entry {v} not saturated");
        }
        assert!(bias.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_matrix_is_symmetric() {
        let mut rng = seeded(15);
        let p = tiny_params(4, 6, 7, 2, &mut rng);
        let c = random_tensor(1, 6, 2.0, &mut rng);
        let (gate, bias) = gate_and_bias(&c, &p, 7).unwrap();
        for i in 0..7 {
            for j in 0..7 {
                assert_eq!(bias.at(i, j), bias.at(j, i));
                assert_eq!(gate.at(i, j), gate.at(j, i));
                assert!(gate.at(i, j) > 0.0 && gate.at(i, j) < 1.0);
            }
        }
    }

    #[test]
    fn open_gate_and_zero_bias_match_plain_attention() {
        let mut rng = seeded(16);
        let p = tiny_params(4, 3, 6, 2, &mut rng);
        let h = random_tensor(6, 4, 1.5, &mut rng);
        let c = random_tensor(1, 3, 1.0, &mut rng);
        let (q, k, v) = project_qkv(&h, &c, &p).unwrap();
        let gate = Tensor::ones(6, 6);
        let bias = Tensor::zeros(6, 6);
        let out =
            attention_with_gate_bias(&h, &q, &k, &v, &gate, &bias, &p.w_o, 2).unwrap();

        // Plain scaled dot-product attention assembled by hand.
        let mut mixed = Vec::new();
        for head in 0..2 {
            let (c0, c1) = (head * 2, head * 2 + 2);
            let qh = q.slice(0, 6, c0, c1).unwrap();
            let kh = k.slice(0, 6, c0, c1).unwrap();
            let vh = v.slice(0, 6, c0, c1).unwrap();
            let a = qh
                .matmul(&kh.transpose())
                .unwrap()
                .scale(1.0 / (2.0f64).sqrt())
                .softmax();
            mixed.push(a.matmul(&vh).unwrap());
        }
        let plain = Tensor::concat_cols(&mixed)
            .unwrap()
            .matmul(&p.w_o)
            .unwrap()
            .add(&h)
            .unwrap();
        assert_eq!(out.h_att.value(), plain.value());
    }

    #[test]
    fn single_step_attention_is_identity_weight() {
        let mut rng = seeded(17);
        let p = tiny_params(4, 3, 1, 2, &mut rng);
        let h = random_tensor(1, 4, 1.0, &mut rng);
        let c = random_tensor(1, 3, 1.0, &mut rng);
        let out = chaos_attention(&h, &c, &p).unwrap();
        for a in out.weights.iter() {
            assert_eq!(a.value(), vec![1.0]);
        }
        let (_, _, v) = project_qkv(&h, &c, &p).unwrap();
        let expected = v.matmul(&p.w_o).unwrap().add(&h).unwrap();
        for (a, b) in out.h_att.value().iter().zip(expected.value().iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = seeded(18);
        let p = tiny_params(8, 5, 7, 4, &mut rng);
        let h = random_tensor(7, 8, 2.0, &mut rng);
        let c = random_tensor(1, 5, 1.0, &mut rng);
        let out = chaos_attention(&h, &c, &p).unwrap();
        assert_eq!(out.weights.len(), 4);
        for a in out.weights.iter() {
            for i in 0..7 {
                let sum: f64 = (0..7).map(|j| a.at(i, j)).sum();
                assert!((sum - 1.0).abs() < 1e-12);
                assert!((0..7).all(|j| a.at(i, j) >= 0.0));
            }
        }
    }

    #[test]
    fn softmax_ignores_row_constant_shifts() {
        let mut rng = seeded(19);
        let logits = random_tensor(4, 4, 3.0, &mut rng);
        let shifts = random_tensor(4, 1, 10.0, &mut rng);
        let shifted = logits
            .add(&shifts.matmul(&Tensor::ones(1, 4)).unwrap())
            .unwrap();
        let a = logits.softmax().value();
        let b = shifted.softmax().value();
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn closed_gate_leaves_softmax_of_bias() {
        let mut rng = seeded(20);
        let p = tiny_params(4, 3, 5, 2, &mut rng);
        let h = random_tensor(5, 4, 1.5, &mut rng);
        let c = random_tensor(1, 3, 1.0, &mut rng);
        let (q, k, v) = project_qkv(&h, &c, &p).unwrap();
        let gate = Tensor::zeros(5, 5);
        let bias = random_tensor(5, 5, 2.0, &mut rng);
        let sym_bias = bias.add(&bias.transpose()).unwrap();
        let out =
            attention_with_gate_bias(&h, &q, &k, &v, &gate, &sym_bias, &p.w_o, 2).unwrap();
        let expected = sym_bias.softmax().value();
        for a in out.weights.iter() {
            assert_eq!(a.value(), expected);
        }
    }

    #[test]
    fn uniform_pattern_is_realized_exactly() {
        let t = 6;
        let a_star = Tensor::from_vec(t, t, vec![1.0 / t as f64; t * t]).unwrap();
        let mut rng = seeded(21);
        let h = random_tensor(t, 8, 2.0, &mut rng);
        let c = random_tensor(1, 20, 1.0, &mut rng);
        let real = realize_target_pattern(&a_star, &h, &c, 8).unwrap();
        assert!(real.error <= 1e-12, "error {}", real.error);
        // Row-centering the log pattern leaves ~1e-16 noise whose square
        // root shows up in the factor columns, hence the loose zero check.
        assert!(real.params.w_q.value().iter().all(|&v| v.abs() < 1e-6));
    }

    #[test]
    fn symmetric_log_patterns_are_realized_to_roundoff() {
        let mut rng = seeded(22);
        let t = 6;
        let raw = random_tensor(t, t, 2.0, &mut rng);
        let sym_logits = raw.add(&raw.transpose()).unwrap();
        let a_star = sym_logits.softmax().detach();
        let h = random_tensor(t, 9, 2.0, &mut rng);
        let c = random_tensor(1, 20, 1.0, &mut rng);
        let real = realize_target_pattern(&a_star, &h, &c, 9).unwrap();
        assert!(real.error <= 1e-6, "error {}", real.error);
    }

    #[test]
    fn antisymmetric_shift_patterns_are_realized_to_roundoff() {
        let mut rng = seeded(23);
        let t = 7;
        let u = random_tensor(t, 1, 3.0, &mut rng);
        let ones = Tensor::ones(1, t);
        let logits = u
            .matmul(&ones)
            .unwrap()
            .sub(&Tensor::ones(t, 1).matmul(&u.transpose()).unwrap())
            .unwrap()
            .shift(0.3);
        let a_star = logits.softmax().detach();
        let h = random_tensor(t, 10, 2.0, &mut rng);
        let c = random_tensor(1, 20, 1.0, &mut rng);
        let real = realize_target_pattern(&a_star, &h, &c, 10).unwrap();
        assert!(real.error <= 1e-6, "error {}", real.error);
    }

    #[test]
    fn realized_parameters_replay_through_the_attention_op() {
        let mut rng = seeded(24);
        let t = 6;
        let raw = random_tensor(t, t, 1.5, &mut rng);
        let sym = raw.add(&raw.transpose()).unwrap();
        let u = random_tensor(t, 1, 2.0, &mut rng);
        let skew = u
            .matmul(&Tensor::ones(1, t))
            .unwrap()
            .sub(&Tensor::ones(t, 1).matmul(&u.transpose()).unwrap())
            .unwrap();
        let a_star = sym.add(&skew).unwrap().softmax().detach();
        let h = random_tensor(t, 8, 2.0, &mut rng);
        let c = random_tensor(1, 20, 1.0, &mut rng);
        let real = realize_target_pattern(&a_star, &h, &c, 8).unwrap();

        let replay = chaos_attention(&h, &c, &real.params).unwrap();
        let a = &replay.weights[0];
        let mut frob = 0.0;
        for (x, y) in a.value().iter().zip(a_star.value().iter()) {
            frob += (x - y) * (x - y);
        }
        assert!(frob.sqrt() <= 1e-3, "frobenius {}", frob.sqrt());
    }

    #[test]
    fn dependent_context_rows_are_rejected() {
        let t = 4;
        let a_star = Tensor::from_vec(t, t, vec![0.25; 16]).unwrap();
        let mut rows = vec![vec![1.0, 2.0, 3.0, 4.0, 5.0]; 2];
        rows.push(vec![2.0, 4.0, 6.0, 8.0, 10.0]);
        rows.push(vec![0.0, 1.0, 0.0, 1.0, 0.0]);
        rows[1] = vec![-1.0, 0.5, 2.0, 1.0, 0.0];
        let h = Tensor::from_rows(&rows).unwrap();
        let c = Tensor::from_vec(1, 3, vec![1.0, 0.0, 0.0]).unwrap();
        let err = realize_target_pattern(&a_star, &h, &c, 5).unwrap_err();
        assert!(matches!(err, AttentionError::RankDeficient));
    }

    #[test]
    fn malformed_targets_are_rejected() {
        let mut rng = seeded(25);
        let h = random_tensor(3, 4, 1.0, &mut rng);
        let c = Tensor::ones(1, 2);
        let zero_entry = Tensor::from_vec(3, 3, vec![
            0.5, 0.5, 0.0,
            0.2, 0.3, 0.5,
            0.1, 0.1, 0.8,
        ])
        .unwrap();
        assert!(matches!(
            realize_target_pattern(&zero_entry, &h, &c, 4),
            Err(AttentionError::InvalidTarget { .. })
        ));
        let bad_rows = Tensor::from_vec(3, 3, vec![0.5; 9]).unwrap();
        assert!(matches!(
            realize_target_pattern(&bad_rows, &h, &c, 4),
            Err(AttentionError::InvalidTarget { .. })
        ));
        let uniform = Tensor::from_vec(3, 3, vec![1.0 / 3.0; 9]).unwrap();
        assert!(matches!(
            realize_target_pattern(&uniform, &h, &c, 2),
            Err(AttentionError::InvalidTarget { .. })
        ));
        assert!(matches!(
            realize_target_pattern(&uniform, &h, &Tensor::zeros(1, 2), 4),
            Err(AttentionError::InvalidTarget { .. })
        ));
    }

    #[test]
    fn gradients_flow_through_every_parameter_path() {
        let mut rng = seeded(26);
        let d = 4;
        let f = 3;
        let t = 3;
        let p = tiny_params(d, f, t, 2, &mut rng);
        let h = random_tensor(t, d, 1.0, &mut rng);
        let c = random_tensor(1, f, 1.0, &mut rng);

        let run = || {
            let out = chaos_attention(&h, &c, &p).unwrap();
            out.h_att.mul(&out.h_att).unwrap().sum()
        };
        let loss = run();
        loss.backward().unwrap();

        let checks: Vec<(&str, &Tensor)> = vec![
            ("w_q", &p.w_q),
            ("w_k", &p.w_k),
            ("w_v", &p.w_v),
            ("w_o", &p.w_o),
            ("w_g", &p.w_g),
            ("w_b", &p.w_b),
            ("cond_q", &p.cond_q),
            ("c", &c),
        ];
        let eps = 1e-6;
        for (name, tensor) in checks {
            let grad = tensor.grad();
            let base = tensor.value();
            // Probe a few entries of each parameter.
            for &idx in &[0usize, base.len() / 2, base.len() - 1] {
                let mut up = base.clone();
                let mut dn = base.clone();
                up[idx] += eps;
                dn[idx] -= eps;
                tensor.set_data(&up);
                let lu = run().item();
                tensor.set_data(&dn);
                let ld = run().item();
                tensor.set_data(&base);
                let fd = (lu - ld) / (2.0 * eps);
                let err = (fd - grad[idx]).abs();
                assert!(
                    err < 1e-8 || err / fd.abs().max(1e-12) < 1e-4,
                    "{name}[{idx}]: fd {fd} vs grad {}",
                    grad[idx]
                );
            }
        }
    }
}
