//! Training loop: profile caching, regime-adaptive noise, a composite
//! loss, chaos-adaptive learning rates, and episodic meta-updates.
//!
//! One window is one optimization step. Each step looks its profile up
//! in a distance-keyed cache, perturbs the conditioning row with noise
//! scaled to the running spread of each slot, runs the full model, and
//! applies a clipped AdamW update whose step size shrinks with the
//! conditioning norm. Validation runs on clean profiles.

use std::collections::{BTreeMap, VecDeque};
use std::io::Write as _;
use std::path::Path;

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{self, DataError, PhysicsFeatures, SensorTable, SeriesWindow};
use crate::forecast;
use crate::graph;
use crate::model::{self, ModelError, ModelInput, ModelOutput, ModelParams, NODE_FEATURES};
use crate::nlts::{self, ChaosProfile, NltsError};
use crate::par;
use crate::tensor::{ParamRegistry, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss became non-finite at epoch {epoch}, step {step}: {diagnostic}")]
    NonFiniteLoss {
        epoch: usize,
        step: usize,
        diagnostic: String,
    },
    #[error("config field {field} is out of range")]
    InvalidConfig { field: &'static str },
    #[error("need at least {need} windows, got {got}")]
    TooFewWindows { need: usize, got: usize },
    #[error("batch has {targets} targets for {outputs} outputs")]
    BatchMismatch { targets: usize, outputs: usize },
    #[error(transparent)]
    Profile(#[from] NltsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

type Result<T> = std::result::Result<T, TrainError>;

/// Knobs for both training phases. Zero is allowed exactly where it
/// disables a term (noise, regularizers, the inner loop); rates, the
/// clip threshold, and the schedule fields must be positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Step-size base for source-city pretraining.
    pub eta0_source: f64,
    /// Step-size base for target-city fine-tuning.
    pub eta0_target: f64,
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub clip_tau: f64,
    pub weight_decay: f64,
    pub sigma_noise: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_sparse: f64,
    pub gamma: f64,
    /// Decay coefficient on the conditioning norm in the step-size rule.
    pub alpha: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub min_delta: f64,
    pub epochs: usize,
    pub n_inner: usize,
    pub support_k: usize,
    pub query_q: usize,
    pub cache_capacity: usize,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            eta0_source: 5e-4,
            eta0_target: 2e-4,
            inner_lr: 1e-3,
            outer_lr: 2e-4,
            clip_tau: 1.0,
            weight_decay: 1e-4,
            sigma_noise: 0.005,
            lambda1: 1e-4,
            lambda2: 1e-4,
            lambda_sparse: 1e-3,
            gamma: 1.0,
            alpha: 0.1,
            plateau_factor: 0.7,
            plateau_patience: 8,
            early_stop_patience: 15,
            min_delta: 1e-5,
            epochs: 200,
            n_inner: 3,
            support_k: 8,
            query_q: 12,
            cache_capacity: 512,
            val_fraction: 0.2,
        }
    }
}

impl TrainConfig {
    /// Names the first field that is out of range, for error messages.
    pub fn validate(&self) -> std::result::Result<(), &'static str> {
        let positive: [(&'static str, f64); 7] = [
            ("eta0_source", self.eta0_source),
            ("eta0_target", self.eta0_target),
            ("outer_lr", self.outer_lr),
            ("clip_tau", self.clip_tau),
            ("plateau_factor", self.plateau_factor),
            ("min_delta", self.min_delta),
            ("val_fraction", self.val_fraction),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(name);
            }
        }
        let nonneg: [(&'static str, f64); 8] = [
            ("inner_lr", self.inner_lr),
            ("weight_decay", self.weight_decay),
            ("sigma_noise", self.sigma_noise),
            ("lambda1", self.lambda1),
            ("lambda2", self.lambda2),
            ("lambda_sparse", self.lambda_sparse),
            ("gamma", self.gamma),
            ("alpha", self.alpha),
        ];
        for (name, v) in nonneg {
            if !(v.is_finite() && v >= 0.0) {
                return Err(name);
            }
        }
        if self.plateau_factor > 1.0 {
            return Err("plateau_factor");
        }
        if self.val_fraction >= 1.0 {
            return Err("val_fraction");
        }
        for (name, v) in [
            ("plateau_patience", self.plateau_patience),
            ("early_stop_patience", self.early_stop_patience),
            ("epochs", self.epochs),
            ("support_k", self.support_k),
            ("query_q", self.query_q),
        ] {
            if v == 0 {
                return Err(name);
            }
        }
        Ok(())
    }
}

// -------------------------------------------------------------------
// profile cache and conditioning noise
// -------------------------------------------------------------------

/// Pooled conditioning profile for one window plus the per-node rows
/// the regularizer needs.
#[derive(Debug, Clone)]
pub struct WindowProfile {
    pub pooled: ChaosProfile,
    /// One profile row per node, N x 20, held as constants.
    pub per_node: Tensor,
}

/// Distance-keyed memo of extracted profiles with FIFO eviction.
///
/// A lookup hits exactly when some stored snapshot is within `threshold`
/// of the probe in Euclidean distance; the counters make hit rates
/// cheap to report.
#[derive(Debug)]
pub struct ChaosCache {
    entries: VecDeque<(Vec<f64>, WindowProfile)>,
    pub threshold: f64,
    pub capacity: usize,
    pub hits: usize,
    pub misses: usize,
}

impl ChaosCache {
    pub fn new(threshold: f64, capacity: usize) -> ChaosCache {
        ChaosCache {
            entries: VecDeque::new(),
            threshold,
            capacity,
            hits: 0,
            misses: 0,
        }
    }

    pub fn lookup(&mut self, x: &[f64]) -> Option<WindowProfile> {
        for (snap, profile) in &self.entries {
            if snap.len() == x.len() && l2_distance(snap, x) <= self.threshold {
                self.hits += 1;
                return Some(profile.clone());
            }
        }
        self.misses += 1;
        None
    }

    pub fn insert(&mut self, x: Vec<f64>, profile: WindowProfile) {
        if self.capacity == 0 {
            return;
        }
        self.entries.push_back((x, profile));
        if self.entries.len() > self.capacity {
            self.entries.pop_front();
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn hit_rate(&self) -> f64 {
        let total = self.hits + self.misses;
        if total == 0 {
            0.0
        } else {
            self.hits as f64 / total as f64
        }
    }
}

fn l2_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Default cache radius: half the mean input norm over the windows.
pub fn default_cache_threshold(windows: &[SeriesWindow]) -> f64 {
    if windows.is_empty() {
        return 1.0;
    }
    let mean: f64 = windows
        .iter()
        .map(|w| w.input.iter().map(|v| v * v).sum::<f64>().sqrt())
        .sum::<f64>()
        / windows.len() as f64;
    0.5 * mean
}

/// Returns the window's profile, extracting and caching on a miss.
///
/// Extraction runs one profile per node over the window's lookback block
/// and mean-pools the slots; the pooled regime is re-derived from the
/// pooled Lyapunov slot.
pub fn cache_lookup_or_extract(cache: &mut ChaosCache, w: &SeriesWindow) -> Result<WindowProfile> {
    if let Some(profile) = cache.lookup(&w.input) {
        return Ok(profile);
    }
    let n = w.n_sensors;
    let per_node: Vec<nlts::Result<ChaosProfile>> = par::map_range(n, |node| {
        let series: Vec<f64> = (0..w.lookback).map(|t| w.input[t * n + node]).collect();
        nlts::chaos_profile(&series)
    });
    let mut rows = Vec::with_capacity(n * ChaosProfile::SLOTS);
    let mut pooled = [0.0; ChaosProfile::SLOTS];
    let mut degraded = false;
    for result in per_node {
        let profile = result?;
        let slots = profile.slots();
        for (acc, v) in pooled.iter_mut().zip(&slots) {
            *acc += v / n as f64;
        }
        rows.extend_from_slice(&slots);
        degraded |= profile.degraded;
    }
    let profile = WindowProfile {
        pooled: ChaosProfile::from_slots(pooled, degraded),
        per_node: Tensor::from_vec(n, ChaosProfile::SLOTS, rows)?,
    };
    cache.insert(w.input.clone(), profile.clone());
    Ok(profile)
}

/// Per-slot running mean and spread over the profiles seen so far
/// (Welford's update), used to scale conditioning noise.
#[derive(Debug, Clone, Default)]
pub struct RunningStats {
    n: usize,
    mean: [f64; ChaosProfile::SLOTS],
    m2: [f64; ChaosProfile::SLOTS],
}

impl RunningStats {
    pub fn new() -> RunningStats {
        RunningStats::default()
    }

    pub fn update(&mut self, slots: &[f64; ChaosProfile::SLOTS]) {
        self.n += 1;
        for i in 0..ChaosProfile::SLOTS {
            let delta = slots[i] - self.mean[i];
            self.mean[i] += delta / self.n as f64;
            self.m2[i] += delta * (slots[i] - self.mean[i]);
        }
    }

    pub fn count(&self) -> usize {
        self.n
    }

    /// Sample standard deviation per slot; zero until two observations.
    pub fn std(&self) -> [f64; ChaosProfile::SLOTS] {
        let mut out = [0.0; ChaosProfile::SLOTS];
        if self.n >= 2 {
            for i in 0..ChaosProfile::SLOTS {
                out[i] = (self.m2[i] / (self.n - 1) as f64).sqrt();
            }
        }
        out
    }
}

/// Adds zero-mean Gaussian noise with per-slot standard deviation
/// `sigma_noise * s[i]`. The regime label is re-derived from the noised
/// Lyapunov slot.
pub fn inject_noise<R: Rng>(
    c: &ChaosProfile,
    sigma_noise: f64,
    s: &[f64; ChaosProfile::SLOTS],
    rng: &mut R,
) -> ChaosProfile {
    if sigma_noise == 0.0 {
        return *c;
    }
    let mut slots = c.slots();
    for (slot, &scale) in slots.iter_mut().zip(s) {
        if scale != 0.0 {
            let dist = Normal::new(0.0, sigma_noise * scale.abs()).expect("positive std");
            *slot += dist.sample(rng);
        }
    }
    ChaosProfile::from_slots(slots, c.degraded)
}

// -------------------------------------------------------------------
// dataset plumbing
// -------------------------------------------------------------------

/// Everything the loop needs about one city: its windows, the physics
/// features aligned with the source table, and the graph geometry.
#[derive(Debug)]
pub struct CityData {
    pub name: String,
    pub windows: Vec<SeriesWindow>,
    pub physics: PhysicsFeatures,
    pub coords: Vec<[f64; 2]>,
    pub radius: f64,
    pub k: usize,
}

impl CityData {
    /// Windows a scaled table and derives physics features and graph
    /// defaults in one go.
    pub fn from_table(
        name: &str,
        table: &SensorTable,
        static_adj: &Tensor,
        coords: Vec<[f64; 2]>,
        lookback: usize,
        horizon: usize,
        stride: usize,
    ) -> Result<CityData> {
        let physics = data::physics_features(table, static_adj)?;
        let windows = data::windows(table, lookback, horizon, stride)?;
        let radius = graph::default_radius(&coords);
        let k = graph::default_top_k(coords.len());
        Ok(CityData {
            name: name.into(),
            windows,
            physics,
            coords,
            radius,
            k,
        })
    }

    /// Model input and target for one window under clean conditioning.
    pub fn prepare(&self, idx: usize, cache: &mut ChaosCache) -> Result<PreparedWindow> {
        let profile = cache_lookup_or_extract(cache, &self.windows[idx])?;
        let slots = profile.pooled.slots();
        Ok(self.prepare_with_slots(idx, &profile, &slots))
    }

    /// Same as [`CityData::prepare`] but with explicit conditioning
    /// slots (the noised path).
    pub fn prepare_with_slots(
        &self,
        idx: usize,
        profile: &WindowProfile,
        slots: &[f64; ChaosProfile::SLOTS],
    ) -> PreparedWindow {
        let w = &self.windows[idx];
        let node_features = (0..w.n_sensors)
            .map(|node| self.node_feature_block(w, node))
            .collect();
        let cond = Tensor::from_vec(1, ChaosProfile::SLOTS, slots.to_vec()).expect("sized");
        PreparedWindow {
            input: ModelInput {
                node_features,
                cond,
                coords: self.coords.clone(),
                radius: self.radius,
                k: self.k,
            },
            target: window_target(w),
            profile_rows: profile.per_node.clone(),
        }
    }

    pub fn prepare_all(&self, cache: &mut ChaosCache) -> Result<Vec<PreparedWindow>> {
        (0..self.windows.len()).map(|i| self.prepare(i, cache)).collect()
    }

    fn node_feature_block(&self, w: &SeriesWindow, node: usize) -> Tensor {
        let mut values = Vec::with_capacity(w.lookback * NODE_FEATURES);
        for t in 0..w.lookback {
            values.push(w.input[t * w.n_sensors + node]);
            values.extend_from_slice(&self.physics.at(w.start + t, node));
        }
        Tensor::from_vec(w.lookback, NODE_FEATURES, values).expect("sized")
    }
}

/// Targets come out of a window horizon-major; the model predicts one
/// row per node, so transpose into N x H here.
fn window_target(w: &SeriesWindow) -> Tensor {
    let n = w.n_sensors;
    let mut values = Vec::with_capacity(w.horizon * n);
    for node in 0..n {
        for h in 0..w.horizon {
            values.push(w.target[h * n + node]);
        }
    }
    Tensor::from_vec(n, w.horizon, values).expect("sized")
}

/// One window ready for the model: input block, N x H target, and the
/// per-node profile rows for the regularizer.
#[derive(Debug, Clone)]
pub struct PreparedWindow {
    pub input: ModelInput,
    pub target: Tensor,
    pub profile_rows: Tensor,
}

// -------------------------------------------------------------------
// composite loss
// -------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub gamma: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda_sparse: f64,
}

impl From<&TrainConfig> for LossWeights {
    fn from(cfg: &TrainConfig) -> LossWeights {
        LossWeights {
            gamma: cfg.gamma,
            lambda1: cfg.lambda1,
            lambda2: cfg.lambda2,
            lambda_sparse: cfg.lambda_sparse,
        }
    }
}

/// The composite objective and its per-term values (for logging and
/// the non-finite diagnostic).
#[derive(Debug)]
pub struct LossBreakdown {
    pub total: Tensor,
    pub prediction: f64,
    pub uncertainty: f64,
    pub profile_norm: f64,
    pub gram_penalty: f64,
    pub sparsity: f64,
}

fn eye(n: usize) -> Tensor {
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        values[i * n + i] = 1.0;
    }
    Tensor::from_vec(n, n, values).expect("sized")
}

/// Batch objective: mean squared prediction error, the weighted
/// uncertainty term, profile-norm and Gram-identity regularizers on the
/// stacked per-node profile matrix, and mean adjacency sparsity
/// pressure.
///
/// Prediction and uncertainty are averaged per window then over the
/// batch; the profile terms are plain sums over the stacked matrix.
pub fn composite_loss(
    targets: &[Tensor],
    outputs: &[ModelOutput],
    profiles: &Tensor,
    w: &LossWeights,
) -> Result<LossBreakdown> {
    if targets.len() != outputs.len() {
        return Err(TrainError::BatchMismatch {
            targets: targets.len(),
            outputs: outputs.len(),
        });
    }
    if targets.is_empty() {
        return Err(TrainError::BatchMismatch {
            targets: 0,
            outputs: 0,
        });
    }
    let inv_b = 1.0 / targets.len() as f64;

    let mut pred = Tensor::scalar(0.0);
    let mut unc = Tensor::scalar(0.0);
    let mut sparsity = Tensor::scalar(0.0);
    for (y, out) in targets.iter().zip(outputs) {
        let diff = y.sub(&out.forecast.y_fused)?;
        pred = pred.add(&diff.mul(&diff)?.mean())?;
        unc = unc.add(&forecast::uncertainty_loss(y, &out.forecast).map_err(ModelError::from)?)?;
        sparsity = sparsity.add(&out.adjacency.a.mean())?;
    }
    pred = pred.scale(inv_b);
    unc = unc.scale(inv_b);
    sparsity = sparsity.scale(inv_b);

    let norm_sq = profiles.mul(profiles)?.sum();
    let gram = profiles.matmul(&profiles.transpose())?;
    let gram_diff = gram.sub(&eye(profiles.rows()))?;
    let gram_sq = gram_diff.mul(&gram_diff)?.sum();

    let total = pred
        .add(&unc.scale(w.gamma))?
        .add(&norm_sq.scale(w.lambda1))?
        .add(&gram_sq.scale(w.lambda2))?
        .add(&sparsity.scale(w.lambda_sparse))?;
    Ok(LossBreakdown {
        prediction: pred.item(),
        uncertainty: unc.item(),
        profile_norm: norm_sq.item(),
        gram_penalty: gram_sq.item(),
        sparsity: sparsity.item(),
        total,
    })
}

/// Forward the batch and evaluate the composite objective.
pub fn batch_loss(
    params: &ModelParams,
    windows: &[PreparedWindow],
    w: &LossWeights,
) -> Result<LossBreakdown> {
    let mut targets = Vec::with_capacity(windows.len());
    let mut outputs = Vec::with_capacity(windows.len());
    let mut profile_blocks = Vec::with_capacity(windows.len());
    for pw in windows {
        outputs.push(model::forward(params, &pw.input)?);
        targets.push(pw.target.clone());
        profile_blocks.push(pw.profile_rows.clone());
    }
    let profiles = Tensor::concat_rows(&profile_blocks)?;
    composite_loss(&targets, &outputs, &profiles, w)
}

/// Mean absolute error of the fused means over the given windows.
pub fn mean_absolute_error(params: &ModelParams, windows: &[PreparedWindow]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for pw in windows {
        let out = model::forward(params, &pw.input)?;
        let y = pw.target.value();
        let y_hat = out.forecast.y_fused.value();
        total += y.iter().zip(&y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>();
        count += y.len();
    }
    Ok(total / count as f64)
}

// -------------------------------------------------------------------
// step size, clipping, optimizer
// -------------------------------------------------------------------

/// Multiplicative decay that fires when validation stalls for
/// `patience` consecutive epochs.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    factor: f64,
    patience: usize,
    min_delta: f64,
    best: f64,
    stall: usize,
    scale: f64,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize, min_delta: f64) -> PlateauScheduler {
        PlateauScheduler {
            factor,
            patience,
            min_delta,
            best: f64::INFINITY,
            stall: 0,
            scale: 1.0,
        }
    }

    pub fn observe(&mut self, val_loss: f64) {
        if self.best - val_loss > self.min_delta {
            self.best = val_loss;
            self.stall = 0;
        } else {
            self.stall += 1;
            if self.stall >= self.patience {
                self.scale *= self.factor;
                self.stall = 0;
            }
        }
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }
}

/// Step size for one update: the base rate shrunk exponentially by the
/// conditioning norm, times the plateau scale.
pub fn chaos_adaptive_lr(eta0: f64, alpha: f64, cond_slots: &[f64], sched: &PlateauScheduler) -> f64 {
    let norm = cond_slots.iter().map(|v| v * v).sum::<f64>().sqrt();
    eta0 * (-alpha * norm).exp() * sched.scale()
}

/// Global-norm gradient clipping over every parameter in the registry.
/// Returns the pre-clip norm.
pub fn clip_gradients(registry: &ParamRegistry, tau: f64) -> f64 {
    let mut sum_sq = 0.0;
    for (_, t) in registry.iter() {
        sum_sq += t.grad().iter().map(|g| g * g).sum::<f64>();
    }
    let norm = sum_sq.sqrt();
    if norm > tau {
        let scale = tau / norm;
        for (_, t) in registry.iter() {
            t.scale_grad(scale);
        }
    }
    norm
}

/// Adam with decoupled weight decay. Moments are kept per parameter
/// name; the step size is supplied per call so the chaos-adaptive rate
/// can vary between steps.
#[derive(Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: usize,
}

impl AdamW {
    pub fn new(weight_decay: f64) -> AdamW {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
            t: 0,
        }
    }

    /// One update from the gradients currently stored on the registry.
    pub fn step(&mut self, registry: &ParamRegistry, lr: f64) {
        let grads: BTreeMap<String, Vec<f64>> = registry
            .iter()
            .map(|(name, t)| (name.clone(), t.grad()))
            .collect();
        self.step_with_grads(registry, &grads, lr);
    }

    /// One update from externally supplied gradients keyed by parameter
    /// name (the meta path transplants query gradients this way).
    pub fn step_with_grads(
        &mut self,
        registry: &ParamRegistry,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
    ) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, tensor) in registry.iter() {
            let Some(g) = grads.get(name) else { continue };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| vec![0.0; g.len()]);
            let mut values = tensor.value();
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                values[i] -= lr * (m_hat / (v_hat.sqrt() + self.eps)) + lr * self.weight_decay * values[i];
            }
            tensor.set_data(&values);
        }
    }
}

fn sgd_step(registry: &ParamRegistry, lr: f64) {
    for (_, tensor) in registry.iter() {
        let g = tensor.grad();
        let mut values = tensor.value();
        for i in 0..values.len() {
            values[i] -= lr * g[i];
        }
        tensor.set_data(&values);
    }
}

// -------------------------------------------------------------------
// episodes and the meta update
// -------------------------------------------------------------------

/// Support/query split drawn from one city's windows. The index lists
/// are always disjoint.
#[derive(Debug)]
pub struct Episode {
    pub support: Vec<PreparedWindow>,
    pub query: Vec<PreparedWindow>,
    pub support_indices: Vec<usize>,
    pub query_indices: Vec<usize>,
    pub city: String,
}

/// Draws `k` support plus `q` query windows without replacement; `None`
/// when the city has too few windows to fill both sets.
pub fn sample_episode<R: Rng>(
    city: &CityData,
    cache: &mut ChaosCache,
    k: usize,
    q: usize,
    rng: &mut R,
) -> Result<Option<Episode>> {
    let total = city.windows.len();
    if total < k + q {
        return Ok(None);
    }
    let picked = sample_indices(rng, total, k + q).into_vec();
    let (support_indices, query_indices) = picked.split_at(k);
    let mut support = Vec::with_capacity(k);
    for &i in support_indices {
        support.push(city.prepare(i, cache)?);
    }
    let mut query = Vec::with_capacity(q);
    for &i in query_indices {
        query.push(city.prepare(i, cache)?);
    }
    Ok(Some(Episode {
        support,
        query,
        support_indices: support_indices.to_vec(),
        query_indices: query_indices.to_vec(),
        city: city.name.clone(),
    }))
}

/// First-order episodic update: adapt a copy on the support set with
/// plain gradient steps, evaluate the query loss at the adapted weights,
/// and apply the query gradient to the original parameters as if it had
/// been taken there. Returns the query loss.
pub fn meta_step(
    params: &ModelParams,
    opt: &mut AdamW,
    episode: &Episode,
    cfg: &TrainConfig,
) -> Result<f64> {
    let weights = LossWeights::from(cfg);
    let adapted = model::clone_params(params);
    let adapted_registry = adapted.registry();
    if cfg.inner_lr > 0.0 {
        for _ in 0..cfg.n_inner {
            let loss = batch_loss(&adapted, &episode.support, &weights)?;
            loss.total.backward()?;
            sgd_step(&adapted_registry, cfg.inner_lr);
        }
    }
    let query = batch_loss(&adapted, &episode.query, &weights)?;
    let value = query.total.item();
    query.total.backward()?;
    clip_gradients(&adapted_registry, cfg.clip_tau);
    let grads: BTreeMap<String, Vec<f64>> = adapted_registry
        .iter()
        .map(|(name, t)| (name.clone(), t.grad()))
        .collect();
    opt.step_with_grads(&params.registry(), &grads, cfg.outer_lr);
    Ok(value)
}

/// Meta-trains over the given cities round-robin for `episodes`
/// episodes; returns the query-loss trace.
pub fn fit_meta(
    params: &ModelParams,
    cities: &[CityData],
    cfg: &TrainConfig,
    episodes: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    cfg.validate()
        .map_err(|field| TrainError::InvalidConfig { field })?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut caches: Vec<ChaosCache> = cities
        .iter()
        .map(|c| ChaosCache::new(default_cache_threshold(&c.windows), cfg.cache_capacity))
        .collect();
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut trace = Vec::with_capacity(episodes);
    for e in 0..episodes {
        let which = e % cities.len();
        let episode = sample_episode(
            &cities[which],
            &mut caches[which],
            cfg.support_k,
            cfg.query_q,
            &mut rng,
        )?
        .ok_or(TrainError::TooFewWindows {
            need: cfg.support_k + cfg.query_q,
            got: cities[which].windows.len(),
        })?;
        let loss = meta_step(params, &mut opt, &episode, cfg)?;
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch: e + 1,
                step: 0,
                diagnostic: format!("query loss {loss} in episode on {}", episode.city),
            });
        }
        trace.push(loss);
    }
    Ok(trace)
}

/// Fine-tunes a copy of the parameters on a support set with `steps`
/// clipped gradient steps at rate `lr`; the original is untouched.
pub fn adapt(
    params: &ModelParams,
    support: &[PreparedWindow],
    steps: usize,
    lr: f64,
    weights: &LossWeights,
    clip_tau: f64,
) -> Result<ModelParams> {
    let adapted = model::clone_params(params);
    let registry = adapted.registry();
    for _ in 0..steps {
        let loss = batch_loss(&adapted, support, weights)?;
        loss.total.backward()?;
        clip_gradients(&registry, clip_tau);
        sgd_step(&registry, lr);
    }
    Ok(adapted)
}

// -------------------------------------------------------------------
// the training loop
// -------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Mean step size actually used this epoch.
    pub lr: f64,
    /// Cache hit rate over this epoch's lookups.
    pub cache_hit_rate: f64,
}

#[derive(Debug)]
pub struct FitResult {
    pub history: Vec<EpochRecord>,
    pub best_val: f64,
    pub stopped_early: bool,
}

fn diagnostic_dump(breakdown: &LossBreakdown, params: &ModelParams) -> String {
    let bad: Vec<String> = params
        .named_tensors()
        .into_iter()
        .filter(|(_, t)| !t.all_finite())
        .map(|(name, _)| name)
        .take(5)
        .collect();
    format!(
        "prediction={} uncertainty={} profile_norm={} gram={} sparsity={}; non-finite tensors: [{}]",
        breakdown.prediction,
        breakdown.uncertainty,
        breakdown.profile_norm,
        breakdown.gram_penalty,
        breakdown.sparsity,
        bad.join(", ")
    )
}

/// Trains in place on one city with the source-phase base rate.
///
/// Each epoch shuffles the training windows, takes one clipped AdamW
/// step per window under noised conditioning, then scores the held-out
/// tail under clean conditioning. The run is fully determined by
/// `seed`. Stops early after `early_stop_patience` epochs without a
/// `min_delta` improvement in validation loss.
pub fn fit(params: &ModelParams, city: &CityData, cfg: &TrainConfig, seed: u64) -> Result<FitResult> {
    cfg.validate()
        .map_err(|field| TrainError::InvalidConfig { field })?;
    let total = city.windows.len();
    if total < 2 {
        return Err(TrainError::TooFewWindows { need: 2, got: total });
    }
    let n_val = ((total as f64 * cfg.val_fraction).round() as usize).clamp(1, total - 1);
    let n_train = total - n_val;

    let weights = LossWeights::from(cfg);
    let mut cache = ChaosCache::new(
        default_cache_threshold(&city.windows[..n_train]),
        cfg.cache_capacity,
    );
    let mut stats = RunningStats::new();
    let mut sched = PlateauScheduler::new(cfg.plateau_factor, cfg.plateau_patience, cfg.min_delta);
    let mut opt = AdamW::new(cfg.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let registry = params.registry();

    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut stall = 0usize;
    let mut stopped_early = false;

    let mut order: Vec<usize> = (0..n_train).collect();
    for epoch in 1..=cfg.epochs {
        let hits_before = cache.hits;
        let misses_before = cache.misses;
        order.shuffle(&mut rng);

        let mut train_sum = 0.0;
        let mut lr_sum = 0.0;
        for (step, &idx) in order.iter().enumerate() {
            let profile = cache_lookup_or_extract(&mut cache, &city.windows[idx])?;
            stats.update(&profile.pooled.slots());
            let noised = inject_noise(&profile.pooled, cfg.sigma_noise, &stats.std(), &mut rng);
            let slots = noised.slots();
            let prepared = city.prepare_with_slots(idx, &profile, &slots);

            let breakdown = batch_loss(params, std::slice::from_ref(&prepared), &weights)?;
            let loss_value = breakdown.total.item();
            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    step: step + 1,
                    diagnostic: diagnostic_dump(&breakdown, params),
                });
            }
            breakdown.total.backward()?;
            clip_gradients(&registry, cfg.clip_tau);
            let lr = chaos_adaptive_lr(cfg.eta0_source, cfg.alpha, &slots, &sched);
            opt.step(&registry, lr);

            train_sum += loss_value;
            lr_sum += lr;
        }

        let mut val_windows = Vec::with_capacity(n_val);
        for idx in n_train..total {
            val_windows.push(city.prepare(idx, &mut cache)?);
        }
        let val_breakdown = batch_loss(params, &val_windows, &weights)?;
        let val_loss = val_breakdown.total.item();
        if !val_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                epoch,
                step: 0,
                diagnostic: diagnostic_dump(&val_breakdown, params),
            });
        }
        sched.observe(val_loss);

        let lookups = (cache.hits - hits_before) + (cache.misses - misses_before);
        history.push(EpochRecord {
            epoch,
            train_loss: train_sum / n_train as f64,
            val_loss,
            lr: lr_sum / n_train as f64,
            cache_hit_rate: if lookups == 0 {
                0.0
            } else {
                (cache.hits - hits_before) as f64 / lookups as f64
            },
        });

        if best_val - val_loss > cfg.min_delta {
            best_val = val_loss;
            stall = 0;
        } else {
            stall += 1;
            if stall >= cfg.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }

    Ok(FitResult {
        history,
        best_val,
        stopped_early,
    })
}

/// Writes the epoch history as CSV with a fixed header.
pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "epoch,train_loss,val_loss,lr,cache_hit_rate")?;
    for rec in history {
        writeln!(
            out,
            "{},{},{},{},{}",
            rec.epoch, rec.train_loss, rec.val_loss, rec.lr, rec.cache_hit_rate
        )?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand_distr::Uniform;

    fn seeded(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn toy_window(values: Vec<f64>, lookback: usize, n: usize) -> SeriesWindow {
        SeriesWindow {
            start: 0,
            lookback,
            horizon: 1,
            n_sensors: n,
            input: values,
            target: vec![0.0; n],
        }
    }

    fn wave_table(steps: usize, sensors: usize) -> SensorTable {
        let ids: Vec<String> = (0..sensors).map(|s| format!("s{s}")).collect();
        let stamps: Vec<String> = (0..steps).map(|t| format!("t{t}")).collect();
        let mut values = Vec::with_capacity(steps * sensors);
        for t in 0..steps {
            for s in 0..sensors {
                let phase = t as f64 * 0.7 + s as f64;
                values.push(phase.sin() + 0.1 * (3.1 * phase).cos());
            }
        }
        SensorTable::from_parts(ids, stamps, values).unwrap()
    }

    fn toy_city(steps: usize, sensors: usize) -> CityData {
        let table = wave_table(steps, sensors);
        let static_adj = Tensor::zeros(sensors, sensors);
        let coords = (0..sensors).map(|i| [i as f64, 0.0]).collect();
        CityData::from_table("toy", &table, &static_adj, coords, 8, 2, 1).unwrap()
    }

    fn tiny_model(seed: u64) -> ModelParams {
        let cfg = ModelConfig {
            window: 8,
            horizon: 2,
            d_hidden: 4,
            depth: 1,
            heads: 2,
            d_embed: 4,
            d_z: 4,
        };
        ModelParams::init(&cfg, &mut seeded(seed))
    }

    #[test]
    fn cache_hits_inside_threshold_and_misses_outside() {
        let mut cache = ChaosCache::new(0.5, 16);
        let w = toy_window((0..8).map(|i| (i as f64 * 0.9).sin()).collect(), 8, 1);
        cache_lookup_or_extract(&mut cache, &w).unwrap();
        assert_eq!((cache.hits, cache.misses), (0, 1));

        // exactly on the boundary counts as a hit
        let mut at_edge = w.clone();
        at_edge.input[3] += 0.5;
        cache_lookup_or_extract(&mut cache, &at_edge).unwrap();
        assert_eq!((cache.hits, cache.misses), (1, 1));

        let mut outside = w.clone();
        outside.input[3] += 0.5000001;
        cache_lookup_or_extract(&mut cache, &outside).unwrap();
        assert_eq!((cache.hits, cache.misses), (1, 2));
    }

    #[test]
    fn second_lookup_is_a_pure_hit() {
        let mut cache = ChaosCache::new(0.25, 16);
        let w = toy_window((0..16).map(|i| (i as f64).cos()).collect(), 8, 2);
        let first = cache_lookup_or_extract(&mut cache, &w).unwrap();
        let second = cache_lookup_or_extract(&mut cache, &w).unwrap();
        assert_eq!((cache.hits, cache.misses), (1, 1));
        assert_eq!(cache.len(), 1);
        assert_eq!(first.pooled.slots(), second.pooled.slots());
        assert_eq!(first.per_node.value(), second.per_node.value());
    }

    #[test]
    fn zero_threshold_hits_only_identical_inputs() {
        let mut cache = ChaosCache::new(0.0, 16);
        let w = toy_window((0..8).map(|i| i as f64 * 0.3).collect(), 8, 1);
        cache_lookup_or_extract(&mut cache, &w).unwrap();
        cache_lookup_or_extract(&mut cache, &w).unwrap();
        assert_eq!((cache.hits, cache.misses), (1, 1));
        let mut nudged = w.clone();
        nudged.input[0] += 1e-15;
        cache_lookup_or_extract(&mut cache, &nudged).unwrap();
        assert_eq!((cache.hits, cache.misses), (1, 2));
    }

    #[test]
    fn eviction_is_first_in_first_out() {
        let mut cache = ChaosCache::new(0.0, 2);
        let mk = |offset: f64| toy_window((0..8).map(|i| i as f64 + offset).collect(), 8, 1);
        cache_lookup_or_extract(&mut cache, &mk(0.0)).unwrap();
        cache_lookup_or_extract(&mut cache, &mk(100.0)).unwrap();
        cache_lookup_or_extract(&mut cache, &mk(200.0)).unwrap();
        assert_eq!(cache.len(), 2);
        // the oldest entry is gone, the two newest still hit
        cache_lookup_or_extract(&mut cache, &mk(100.0)).unwrap();
        cache_lookup_or_extract(&mut cache, &mk(200.0)).unwrap();
        assert_eq!(cache.hits, 2);
        cache_lookup_or_extract(&mut cache, &mk(0.0)).unwrap();
        assert_eq!(cache.misses, 4);
    }

    #[test]
    fn running_spread_matches_a_direct_computation() {
        let mut rng = seeded(90);
        let dist = Uniform::new(-2.0, 3.0);
        let mut stats = RunningStats::new();
        let mut samples: Vec<[f64; ChaosProfile::SLOTS]> = Vec::new();
        for _ in 0..100 {
            let mut s = [0.0; ChaosProfile::SLOTS];
            for v in s.iter_mut() {
                *v = dist.sample(&mut rng);
            }
            stats.update(&s);
            samples.push(s);
        }
        let got = stats.std();
        for slot in 0..ChaosProfile::SLOTS {
            let mean = samples.iter().map(|s| s[slot]).sum::<f64>() / 100.0;
            let var = samples
                .iter()
                .map(|s| (s[slot] - mean).powi(2))
                .sum::<f64>()
                / 99.0;
            assert!((got[slot] - var.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn noise_is_inert_at_zero_scale() {
        let mut rng = seeded(91);
        let profile = ChaosProfile::from_slots([0.4; ChaosProfile::SLOTS], false);
        let same = inject_noise(&profile, 0.0, &[1.0; ChaosProfile::SLOTS], &mut rng);
        assert_eq!(profile.slots(), same.slots());
        let same = inject_noise(&profile, 0.5, &[0.0; ChaosProfile::SLOTS], &mut rng);
        assert_eq!(profile.slots(), same.slots());
    }

    #[test]
    fn noise_variance_tracks_the_configured_scale() {
        let mut rng = seeded(92);
        let profile = ChaosProfile::from_slots([1.0; ChaosProfile::SLOTS], false);
        let mut s = [0.0; ChaosProfile::SLOTS];
        s[0] = 2.0;
        s[1] = 0.5;
        let sigma = 0.1;
        let draws = 10_000;
        let mut sum_sq = [0.0f64; 2];
        for _ in 0..draws {
            let noised = inject_noise(&profile, sigma, &s, &mut rng);
            let slots = noised.slots();
            sum_sq[0] += (slots[0] - 1.0).powi(2);
            sum_sq[1] += (slots[1] - 1.0).powi(2);
            assert_eq!(slots[2], 1.0);
        }
        for (i, &scale) in [2.0, 0.5].iter().enumerate() {
            let want = (sigma * scale).powi(2);
            let got = sum_sq[i] / draws as f64;
            assert!(
                (got - want).abs() / want < 0.05,
                "slot {i}: variance {got} vs {want}"
            );
        }
    }

    fn constant_forecast(y: &Tensor, var: f64) -> forecast::ForecastWithUncertainty {
        let v = Tensor::from_vec(y.rows(), y.cols(), vec![var; y.len()]).unwrap();
        forecast::ForecastWithUncertainty {
            y_fused: y.clone(),
            var_fused: v.clone(),
            omega: Tensor::from_vec(1, 3, vec![1.0 / 3.0; 3]).unwrap(),
            head_means: vec![y.clone(), y.clone(), y.clone()],
            head_vars: vec![v.clone(), v.clone(), v],
        }
    }

    fn manual_output(y: &Tensor, var: f64, adj: Tensor) -> ModelOutput {
        let n = adj.rows();
        ModelOutput {
            forecast: constant_forecast(y, var),
            adjacency: graph::LearnedAdjacency {
                a: adj,
                mask: vec![false; n * n],
                k: 1,
            },
            node_states: Tensor::zeros(n, 1),
        }
    }

    #[test]
    fn perfect_prediction_with_silent_regularizers_scores_zero() {
        let y = Tensor::from_vec(2, 3, vec![0.3; 6]).unwrap();
        // unit variance keeps the likelihood term finite; gamma zeroes it
        let out = manual_output(&y, 1.0, Tensor::from_vec(2, 2, vec![0.5; 4]).unwrap());
        let weights = LossWeights {
            gamma: 0.0,
            lambda1: 0.0,
            lambda2: 0.0,
            lambda_sparse: 0.0,
        };
        let profiles = Tensor::from_vec(2, 4, vec![0.7; 8]).unwrap();
        let got = composite_loss(&[y.clone()], &[out], &profiles, &weights).unwrap();
        assert_eq!(got.total.item(), 0.0);
        assert_eq!(got.prediction, 0.0);
    }

    #[test]
    fn orthonormal_profile_rows_kill_the_gram_penalty() {
        let y = Tensor::from_vec(1, 2, vec![0.1, 0.2]).unwrap();
        let out = manual_output(&y, 1.0, Tensor::zeros(1, 1));
        let mut rows = vec![0.0; 2 * 6];
        rows[0] = 1.0;
        rows[6 + 3] = 1.0;
        let profiles = Tensor::from_vec(2, 6, rows).unwrap();
        let weights = LossWeights {
            gamma: 0.0,
            lambda1: 1.0,
            lambda2: 1.0,
            lambda_sparse: 0.0,
        };
        let got = composite_loss(&[y.clone()], &[out], &profiles, &weights).unwrap();
        assert_eq!(got.gram_penalty, 0.0);
        assert_eq!(got.profile_norm, 2.0);
        assert!((got.total.item() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn composite_terms_match_a_hand_computation() {
        // two windows, one node, two horizon steps, everything small
        // enough to recompute each term with plain loops
        let y1 = Tensor::from_vec(1, 2, vec![1.0, 0.0]).unwrap();
        let y2 = Tensor::from_vec(1, 2, vec![0.5, -0.5]).unwrap();
        let f1 = Tensor::from_vec(1, 2, vec![0.8, 0.1]).unwrap();
        let f2 = Tensor::from_vec(1, 2, vec![0.4, -0.2]).unwrap();
        let var = 0.7;
        let a1 = Tensor::from_vec(1, 1, vec![0.3]).unwrap();
        let a2 = Tensor::from_vec(1, 1, vec![0.9]).unwrap();
        let out1 = manual_output(&f1, var, a1);
        let out2 = manual_output(&f2, var, a2);
        let profiles = Tensor::from_vec(2, 3, vec![0.1, 0.2, 0.3, -0.4, 0.5, -0.6]).unwrap();
        let weights = LossWeights {
            gamma: 0.3,
            lambda1: 0.01,
            lambda2: 0.02,
            lambda_sparse: 0.05,
        };
        let got = composite_loss(
            &[y1.clone(), y2.clone()],
            &[out1, out2],
            &profiles,
            &weights,
        )
        .unwrap();

        let mse = |y: &[f64], f: &[f64]| {
            y.iter()
                .zip(f)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                / y.len() as f64
        };
        let pred = 0.5 * (mse(&[1.0, 0.0], &[0.8, 0.1]) + mse(&[0.5, -0.5], &[0.4, -0.2]));
        assert!((got.prediction - pred).abs() < 1e-12);

        // per-element likelihood, band weights for H=2: short owns step
        // 0, mid owns step 1, long owns nothing
        let nll = |r: f64| 0.5 * (std::f64::consts::TAU * var).ln() + r * r / (2.0 * var);
        let plain = |r: &[f64]| (nll(r[0]) + nll(r[1])) / 2.0;
        let short = |r: &[f64]| (nll(r[0]) * (4.0 / 3.0) + nll(r[1]) * (2.0 / 3.0)) / 2.0;
        let mid = |r: &[f64]| (nll(r[0]) * (2.0 / 3.0) + nll(r[1]) * (4.0 / 3.0)) / 2.0;
        let unc_one = |r: &[f64]| plain(r) + (short(r) + mid(r) + plain(r)) / 3.0;
        let r1 = [0.2, -0.1];
        let r2 = [0.1, -0.3];
        let unc = 0.5 * (unc_one(&r1) + unc_one(&r2));
        assert!((got.uncertainty - unc).abs() < 1e-12, "{} vs {unc}", got.uncertainty);

        let p = [0.1, 0.2, 0.3, -0.4, 0.5, -0.6];
        let norm_sq: f64 = p.iter().map(|v| v * v).sum();
        assert!((got.profile_norm - norm_sq).abs() < 1e-12);

        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let (r1p, r2p) = (&p[..3], &p[3..]);
        let gram = [
            dot(r1p, r1p) - 1.0,
            dot(r1p, r2p),
            dot(r2p, r1p),
            dot(r2p, r2p) - 1.0,
        ];
        let gram_sq: f64 = gram.iter().map(|v| v * v).sum();
        assert!((got.gram_penalty - gram_sq).abs() < 1e-12);

        let sparsity = 0.5 * (0.3 + 0.9);
        assert!((got.sparsity - sparsity).abs() < 1e-12);

        let total = pred + 0.3 * unc + 0.01 * norm_sq + 0.02 * gram_sq + 0.05 * sparsity;
        assert!((got.total.item() - total).abs() < 1e-12);
    }

    #[test]
    fn adaptive_rate_follows_the_formula() {
        let sched = PlateauScheduler::new(0.7, 8, 1e-5);
        assert_eq!(chaos_adaptive_lr(1e-3, 0.5, &[0.0, 0.0], &sched), 1e-3);
        assert_eq!(chaos_adaptive_lr(1e-3, 0.0, &[3.0, 4.0], &sched), 1e-3);
        let halved = chaos_adaptive_lr(1e-3, std::f64::consts::LN_2, &[1.0], &sched);
        assert!((halved - 5e-4).abs() < 1e-18);
    }

    #[test]
    fn plateau_decay_is_monotone_and_positive() {
        let mut sched = PlateauScheduler::new(0.7, 3, 1e-5);
        sched.observe(1.0);
        assert_eq!(sched.scale(), 1.0);
        let mut last = f64::INFINITY;
        for round in 0..5 {
            for _ in 0..3 {
                sched.observe(1.0); // no improvement
            }
            let scale = sched.scale();
            assert!((scale - 0.7f64.powi(round + 1)).abs() < 1e-15);
            assert!(scale < last && scale > 0.0);
            last = scale;
        }
        let lr = chaos_adaptive_lr(1e-3, 0.1, &[0.5; 20], &sched);
        assert!(lr > 0.0);
    }

    fn registry_with_grads(gx: f64, gy: f64) -> (ParamRegistry, Tensor, Tensor) {
        let x = Tensor::from_vec(1, 1, vec![1.0]).unwrap();
        let y = Tensor::from_vec(1, 1, vec![2.0]).unwrap();
        let cx = Tensor::from_vec(1, 1, vec![gx]).unwrap();
        let cy = Tensor::from_vec(1, 1, vec![gy]).unwrap();
        let loss = x.mul(&cx).unwrap().add(&y.mul(&cy).unwrap()).unwrap().sum();
        loss.backward().unwrap();
        let mut reg = ParamRegistry::new();
        reg.insert("a", x.clone());
        reg.insert("b", y.clone());
        (reg, x, y)
    }

    #[test]
    fn clipping_caps_the_norm_and_keeps_direction() {
        let (reg, x, y) = registry_with_grads(3.0, 4.0);
        let pre = clip_gradients(&reg, 2.5);
        assert!((pre - 5.0).abs() < 1e-12);
        let post = (x.grad()[0].powi(2) + y.grad()[0].powi(2)).sqrt();
        assert!((post - 2.5).abs() < 1e-9);
        assert!((x.grad()[0] / y.grad()[0] - 0.75).abs() < 1e-12);

        let (reg, x, y) = registry_with_grads(0.3, 0.4);
        let pre = clip_gradients(&reg, 1.0);
        assert!((pre - 0.5).abs() < 1e-12);
        assert_eq!(x.grad()[0], 0.3);
        assert_eq!(y.grad()[0], 0.4);

        let (reg, x, y) = registry_with_grads(0.0, 0.0);
        assert_eq!(clip_gradients(&reg, 1.0), 0.0);
        assert_eq!(x.grad()[0], 0.0);
        assert_eq!(y.grad()[0], 0.0);
    }

    #[test]
    fn zero_gradient_step_is_pure_weight_decay() {
        let x = Tensor::from_vec(1, 2, vec![0.8, -1.6]).unwrap();
        let loss = x.scale(0.0).sum();
        loss.backward().unwrap();
        let mut reg = ParamRegistry::new();
        reg.insert("x", x.clone());
        let mut opt = AdamW::new(0.01);
        let lr = 0.1;
        opt.step(&reg, lr);
        for (got, orig) in x.value().iter().zip([0.8, -1.6]) {
            let expected = orig - lr * 0.01 * orig;
            assert!((got - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn frozen_inner_loop_reduces_meta_to_query_training() {
        let city = toy_city(40, 2);
        let mut cache = ChaosCache::new(0.0, 64);
        let cfg = TrainConfig {
            inner_lr: 0.0,
            n_inner: 3,
            support_k: 3,
            query_q: 4,
            ..TrainConfig::default()
        };
        let mut rng = seeded(93);
        let episode = sample_episode(&city, &mut cache, 3, 4, &mut rng)
            .unwrap()
            .unwrap();

        let params_a = tiny_model(94);
        let params_b = model::clone_params(&params_a);

        let mut opt_a = AdamW::new(cfg.weight_decay);
        meta_step(&params_a, &mut opt_a, &episode, &cfg).unwrap();

        let weights = LossWeights::from(&cfg);
        let loss = batch_loss(&params_b, &episode.query, &weights).unwrap();
        loss.total.backward().unwrap();
        let reg_b = params_b.registry();
        clip_gradients(&reg_b, cfg.clip_tau);
        let mut opt_b = AdamW::new(cfg.weight_decay);
        opt_b.step(&reg_b, cfg.outer_lr);

        for ((name_a, ta), (_, tb)) in params_a
            .named_tensors()
            .iter()
            .zip(params_b.named_tensors().iter())
        {
            assert_eq!(ta.value(), tb.value(), "diverged at {name_a}");
        }
    }

    #[test]
    fn episode_support_and_query_are_disjoint() {
        let city = toy_city(40, 2);
        let mut cache = ChaosCache::new(0.0, 64);
        let mut rng = seeded(95);
        let episode = sample_episode(&city, &mut cache, 8, 12, &mut rng)
            .unwrap()
            .unwrap();
        assert_eq!(episode.support.len(), 8);
        assert_eq!(episode.query.len(), 12);
        for s in &episode.support_indices {
            assert!(!episode.query_indices.contains(s));
        }
        // too few windows for the split
        let small = toy_city(20, 2);
        assert!(sample_episode(&small, &mut cache, 8, 12, &mut rng)
            .unwrap()
            .is_none());
    }

    #[test]
    fn fit_is_deterministic_per_seed() {
        let city = toy_city(24, 2);
        let cfg = TrainConfig {
            epochs: 3,
            ..TrainConfig::default()
        };
        let run = || {
            let params = tiny_model(96);
            fit(&params, &city, &cfg, 7).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 3);
        for rec in &a.history {
            assert!(rec.train_loss.is_finite() && rec.val_loss.is_finite());
            assert!(rec.lr > 0.0);
        }
        // the very first lookup faces an empty cache; by the second
        // epoch every window hits its own (or a neighbor's) entry
        assert!(a.history[0].cache_hit_rate < 1.0);
        assert_eq!(a.history[1].cache_hit_rate, 1.0);
    }

    #[test]
    fn early_stopping_fires_after_exactly_the_configured_patience() {
        let city = toy_city(24, 2);
        // an impossible improvement bar turns every epoch after the
        // first into a stall
        let cfg = TrainConfig {
            epochs: 100,
            early_stop_patience: 15,
            min_delta: 1e9,
            ..TrainConfig::default()
        };
        let params = tiny_model(97);
        let result = fit(&params, &city, &cfg, 11).unwrap();
        assert!(result.stopped_early);
        assert_eq!(result.history.len(), 16);
    }

    #[test]
    fn nonfinite_loss_aborts_with_a_diagnostic() {
        let city = toy_city(24, 2);
        let cfg = TrainConfig {
            epochs: 2,
            ..TrainConfig::default()
        };
        let params = tiny_model(98);
        // a head weight reaches the predicted mean linearly, so the
        // infinity cannot saturate away inside a gate
        let poisoned = params
            .named_tensors()
            .into_iter()
            .find(|(name, _)| name == "forecast.short.mean.w")
            .unwrap()
            .1;
        let mut values = poisoned.value();
        values[0] = f64::INFINITY;
        poisoned.set_data(&values);
        match fit(&params, &city, &cfg, 3) {
            Err(TrainError::NonFiniteLoss {
                epoch, diagnostic, ..
            }) => {
                assert_eq!(epoch, 1);
                assert!(diagnostic.contains("non-finite tensors"));
                assert!(diagnostic.contains("forecast."), "dump was: {diagnostic}");
            }
            other => panic!("expected a non-finite abort, got {other:?}"),
        }
    }

    #[test]
    fn history_csv_round_trips_field_order() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("history.csv");
        let history = vec![
            EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                val_loss: 0.625,
                lr: 4.9e-4,
                cache_hit_rate: 0.0,
            },
            EpochRecord {
                epoch: 2,
                train_loss: 0.25,
                val_loss: 0.5,
                lr: 4.9e-4,
                cache_hit_rate: 1.0,
            },
        ];
        write_history_csv(&path, &history).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,train_loss,val_loss,lr,cache_hit_rate"
        );
        assert_eq!(lines.next().unwrap(), "1,0.5,0.625,0.00049,0");
        assert_eq!(lines.next().unwrap(), "2,0.25,0.5,0.00049,1");
    }

    #[test]
    fn invalid_config_names_the_field() {
        let mut cfg = TrainConfig::default();
        cfg.clip_tau = 0.0;
        assert_eq!(cfg.validate(), Err("clip_tau"));
        let mut cfg = TrainConfig::default();
        cfg.gamma = -1.0;
        assert_eq!(cfg.validate(), Err("gamma"));
        let mut cfg = TrainConfig::default();
        cfg.epochs = 0;
        assert_eq!(cfg.validate(), Err("epochs"));
        assert!(TrainConfig::default().validate().is_ok());
    }
}
