//! Learned graph topology and graph convolution.
//!
//! Node states are embedded, refined by a pair of attention passes (one
//! restricted to geographic neighbours, one global) plus a broadcast
//! conditioning row, and scored pairwise into a dense adjacency. The
//! adjacency is sparsified per row, symmetrized, and used in a single
//! degree-normalized convolution.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("neighbourhood radius must be positive, got {got}")]
    InvalidRadius { got: f64 },
    #[error("coordinate table has {got} rows for {expected} nodes")]
    CoordinateCount { expected: usize, got: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, GraphError>;

/// Default per-row edge budget.
pub fn default_top_k(n: usize) -> usize {
    n.saturating_sub(1).clamp(1, 8)
}

/// Default local-attention radius: the 30th percentile of pairwise
/// coordinate distances, so roughly a third of all pairs count as nearby.
pub fn default_radius(coords: &[[f64; 2]]) -> f64 {
    let mut dists = Vec::new();
    for i in 0..coords.len() {
        for j in i + 1..coords.len() {
            let dx = coords[i][0] - coords[j][0];
            let dy = coords[i][1] - coords[j][1];
            dists.push(dx.hypot(dy));
        }
    }
    if dists.is_empty() {
        return 1.0;
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let r = crate::data::quantile_sorted(&dists, 0.30);
    if r > 0.0 {
        r
    } else {
        1.0
    }
}

/// Parameters for node embedding, refinement and adjacency scoring.
#[derive(Debug)]
pub struct GraphParams {
    pub w_n: Tensor,
    pub w_c: Tensor,
    pub b_c: Tensor,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub score_w1: Tensor,
    pub score_b1: Tensor,
    pub score_w2: Tensor,
    pub score_b2: Tensor,
    pub w_z: Tensor,
}

impl GraphParams {
    pub fn init<R: Rng>(
        d_state: usize,
        d_embed: usize,
        d_out: usize,
        cond_dim: usize,
        rng: &mut R,
    ) -> GraphParams {
        GraphParams {
            w_n: glorot(d_state, d_embed, rng),
            w_c: glorot(cond_dim, d_embed, rng),
            b_c: Tensor::zeros(1, d_embed),
            w_q: glorot(d_embed, d_embed, rng),
            w_k: glorot(d_embed, d_embed, rng),
            w_v: glorot(d_embed, d_embed, rng),
            score_w1: glorot(2 * d_embed + cond_dim, d_embed, rng),
            score_b1: Tensor::zeros(1, d_embed),
            score_w2: glorot(d_embed, 1, rng),
            score_b2: Tensor::zeros(1, 1),
            w_z: glorot(d_embed, d_out, rng),
        }
    }

    pub fn collect(&self, prefix: &str, out: &mut Vec<(String, Tensor)>) {
        out.push((format!("{prefix}.nodes.w"), self.w_n.clone()));
        out.push((format!("{prefix}.context.w"), self.w_c.clone()));
        out.push((format!("{prefix}.context.b"), self.b_c.clone()));
        out.push((format!("{prefix}.refine.w_q"), self.w_q.clone()));
        out.push((format!("{prefix}.refine.w_k"), self.w_k.clone()));
        out.push((format!("{prefix}.refine.w_v"), self.w_v.clone()));
        out.push((format!("{prefix}.scorer.w1"), self.score_w1.clone()));
        out.push((format!("{prefix}.scorer.b1"), self.score_b1.clone()));
        out.push((format!("{prefix}.scorer.w2"), self.score_w2.clone()));
        out.push((format!("{prefix}.scorer.b2"), self.score_b2.clone()));
        out.push((format!("{prefix}.conv.w"), self.w_z.clone()));
    }
}

fn glorot<R: Rng>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new(-limit, limit);
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Tensor::from_vec(rows, cols, data).expect("sized data")
}

/// Embeds node states and broadcasts the conditioning row.
///
/// Returns `(E_n, E_c)`: a ReLU projection of the per-node states and the
/// tanh-squashed conditioning embedding tiled to one row per node.
pub fn encode_nodes(x_s: &Tensor, c: &Tensor, params: &GraphParams) -> Result<(Tensor, Tensor)> {
    let e_n = x_s.matmul(&params.w_n)?.relu();
    let context = c.matmul(&params.w_c)?.add(&params.b_c)?.tanh();
    let e_c = context.tile_rows(x_s.rows());
    Ok((e_n, e_c))
}

/// Refines node embeddings with parallel local and global attention.
///
/// Both passes share projections and differ only in their mask: the local
/// pass restricts attention to pairs within `radius` of each other (a node
/// is always within radius of itself, so nobody is left without targets),
/// the global pass is unmasked. The two results and the broadcast context
/// are summed and row-normalized to zero mean, unit variance.
pub fn refine(
    e_n: &Tensor,
    e_c: &Tensor,
    coords: &[[f64; 2]],
    radius: f64,
    params: &GraphParams,
) -> Result<Tensor> {
    if !(radius > 0.0) {
        return Err(GraphError::InvalidRadius { got: radius });
    }
    let n = e_n.rows();
    if coords.len() != n {
        return Err(GraphError::CoordinateCount {
            expected: n,
            got: coords.len(),
        });
    }
    let q = e_n.matmul(&params.w_q)?;
    let k = e_n.matmul(&params.w_k)?;
    let v = e_n.matmul(&params.w_v)?;
    let logits = q
        .matmul(&k.transpose())?
        .scale(1.0 / (e_n.cols() as f64).sqrt());

    // Out-of-radius pairs get a large negative offset instead of a hard
    // mask so the whole thing stays one softmax.
    let mut penalty = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let dx = coords[i][0] - coords[j][0];
            let dy = coords[i][1] - coords[j][1];
            if dx.hypot(dy) > radius {
                penalty[i * n + j] = -1e30;
            }
        }
    }
    let penalty = Tensor::from_vec(n, n, penalty).expect("sized data");

    let local = logits.add(&penalty)?.softmax().matmul(&v)?;
    let global = logits.softmax().matmul(&v)?;
    Ok(local.add(&global)?.add(e_c)?.layer_norm())
}

/// Sparsified symmetric adjacency with the weights that produced it.
///
/// `mask` marks the per-row top-k selection before symmetrization. The
/// final matrix may hold more than `k` nonzeros in a row: an edge survives
/// the elementwise-max symmetrization when either endpoint selected it.
#[derive(Debug)]
pub struct LearnedAdjacency {
    pub a: Tensor,
    pub mask: Vec<bool>,
    pub k: usize,
}

/// Scores every ordered node pair and assembles the learned adjacency.
///
/// The score of a pair is the embedding dot product plus a small ReLU
/// network over the concatenated embeddings and conditioning row, squashed
/// by a sigmoid. The diagonal is forced to zero (self-loops enter only
/// inside the convolution), rows are pruned to their `k` strongest entries,
/// and the result is symmetrized with an elementwise max.
pub fn build_adjacency(
    e_r: &Tensor,
    c: &Tensor,
    k: usize,
    params: &GraphParams,
) -> Result<LearnedAdjacency> {
    let n = e_r.rows();
    let dots = e_r.matmul(&e_r.transpose())?;
    let pairs = Tensor::concat_cols(&[
        e_r.repeat_rows(n),
        e_r.tile_rows(n),
        c.tile_rows(n * n),
    ])?;
    let scores = pairs
        .matmul(&params.score_w1)?
        .add(&params.score_b1)?
        .relu()
        .matmul(&params.score_w2)?
        .add(&params.score_b2)?
        .reshape(n, n)?;
    let mut off_diag = vec![1.0; n * n];
    for i in 0..n {
        off_diag[i * n + i] = 0.0;
    }
    let off_diag = Tensor::from_vec(n, n, off_diag).expect("sized data");
    let pre = dots.add(&scores)?.sigmoid().mul(&off_diag)?;
    let kept = pre.top_k_mask(k)?;
    let a = kept.maximum(&kept.transpose())?;
    let mask = kept.value().iter().map(|&v| v != 0.0).collect();
    Ok(LearnedAdjacency { a, mask, k })
}

/// One graph convolution over the learned topology.
///
/// Self-loops are added here (`A + I`), the result is symmetrically
/// degree-normalized, and the propagated embeddings pass through a linear
/// map and ReLU. Row sums of `A + I` are at least one, so the inverse
/// square roots are always finite.
pub fn gcn_layer(adj: &LearnedAdjacency, e_r: &Tensor, w_z: &Tensor) -> Result<Tensor> {
    let n = e_r.rows();
    let mut eye = vec![0.0; n * n];
    for i in 0..n {
        eye[i * n + i] = 1.0;
    }
    let eye = Tensor::from_vec(n, n, eye).expect("sized data");
    let a_tilde = adj.a.add(&eye)?;
    let inv_sqrt_deg = a_tilde.matmul(&Tensor::ones(n, 1))?.powf(-0.5);
    let by_rows = inv_sqrt_deg.matmul(&Tensor::ones(1, n))?;
    let by_cols = Tensor::ones(n, 1).matmul(&inv_sqrt_deg.transpose())?;
    let normalized = a_tilde.mul(&by_rows)?.mul(&by_cols)?;
    Ok(normalized.matmul(e_r)?.matmul(w_z)?.relu())
}

/// Outcome of gradient-fitting the adjacency builder to a target matrix.
#[derive(Debug)]
pub struct AdjacencyFit {
    pub mae_history: Vec<f64>,
    pub final_mae: f64,
    pub adjacency: Tensor,
}

/// Fits free node embeddings and the pair scorer so the built adjacency
/// matches `target` (symmetric, zero diagonal, off-diagonal entries in
/// (0,1)). Used by the validation suite to confirm the scorer is
/// expressive enough to hit an arbitrary symmetric pattern.
///
/// Optimizes with Adam on the mean squared off-diagonal error, keeping the
/// full edge budget (`k = n - 1`) so pruning does not interfere. Returns
/// the per-step mean absolute edge error.
pub fn fit_adjacency_to_target<R: Rng>(
    target: &Tensor,
    steps: usize,
    lr: f64,
    rng: &mut R,
) -> Result<AdjacencyFit> {
    let n = target.rows();
    assert!(n >= 2 && target.cols() == n, "target must be square");
    let d_embed = 16;
    let cond_dim = 4;
    let params = GraphParams::init(1, d_embed, 1, cond_dim, rng);
    let spread = Uniform::new(-0.5, 0.5);
    let e_r = Tensor::from_vec(
        n,
        d_embed,
        (0..n * d_embed).map(|_| spread.sample(rng)).collect(),
    )
    .expect("sized data");
    let c = Tensor::zeros(1, cond_dim);
    let k = n - 1;

    let trainable = [
        &e_r,
        &params.score_w1,
        &params.score_b1,
        &params.score_w2,
        &params.score_b2,
    ];
    let mut opt: Vec<AdamState> = trainable
        .iter()
        .map(|t| AdamState::new(t.len()))
        .collect();

    let edge_count = (n * (n - 1)) as f64;
    let mut history = Vec::with_capacity(steps);
    let mut last = Tensor::zeros(n, n);
    for _ in 0..steps {
        let adj = build_adjacency(&e_r, &c, k, &params)?;
        let diff = adj.a.sub(target)?;
        let loss = diff.mul(&diff)?.sum().scale(1.0 / edge_count);
        let mae = diff.value().iter().map(|v| v.abs()).sum::<f64>() / edge_count;
        history.push(mae);
        last = adj.a.detach();
        loss.backward()?;
        for (tensor, state) in trainable.iter().zip(opt.iter_mut()) {
            state.step(tensor, lr);
        }
    }
    let final_mae = history.last().copied().unwrap_or(f64::INFINITY);
    Ok(AdjacencyFit {
        mae_history: history,
        final_mae,
        adjacency: last,
    })
}

/// Minimal Adam used only by the fitting helper above; the real training
/// loop has its own optimizer.
struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl AdamState {
    fn new(len: usize) -> AdamState {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step(&mut self, tensor: &Tensor, lr: f64) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let grad = tensor.grad();
        let mut data = tensor.value();
        let bc1 = 1.0 - B1.powi(self.t);
        let bc2 = 1.0 - B2.powi(self.t);
        for i in 0..data.len() {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * grad[i];
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * grad[i] * grad[i];
            data[i] -= lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + EPS);
        }
        tensor.set_data(&data);
    }
}
