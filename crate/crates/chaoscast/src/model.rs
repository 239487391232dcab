//! End-to-end model assembly and the versioned weight container.
//!
//! The pipeline runs one window at a time: each node's feature block is
//! encoded by the shared multi-scale encoder, the last step of every
//! node becomes its state row, the graph stage refines those rows and
//! learns an adjacency, and the forecast stage turns the convolved
//! states into blended multi-horizon predictions. Every stage reads the
//! same conditioning row.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forecast::{self, ForecastError, ForecastParams, ForecastWithUncertainty};
use crate::graph::{self, GraphError, GraphParams, LearnedAdjacency};
use crate::nlts::ChaosProfile;
use crate::temporal::{self, EncoderParams, MultiScaleConfig, TemporalError};
use crate::tensor::{ParamRegistry, Tensor, TensorError};

/// Columns in each node's input block: the scaled reading plus the four
/// physics features.
pub const NODE_FEATURES: usize = 1 + crate::data::PHYSICS_FEATURE_COUNT;

pub const MODEL_MAGIC: [u8; 4] = *b"CCKT";
pub const MODEL_VERSION: u16 = 1;

/// Longest accepted record name; anything larger means the reader has
/// lost sync with the record stream.
const MAX_NAME_LEN: u32 = 4096;
const MAX_DIM: u32 = 1 << 24;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a model file (magic mismatch)")]
    BadMagic,
    #[error("unsupported model format version {got}")]
    UnsupportedVersion { got: u16 },
    #[error("malformed model record: {detail}")]
    MalformedRecord { detail: String },
    #[error("model file is missing tensor {name}")]
    MissingTensor { name: String },
    #[error("tensor {name} has shape {got:?}, expected {expected:?}")]
    WrongShape {
        name: String,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error(transparent)]
    Temporal(#[from] TemporalError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Forecast(#[from] ForecastError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T> = std::result::Result<T, ModelError>;

/// Width and depth choices for one model instance. Node count is not
/// part of the config: the temporal encoder is shared across nodes and
/// the graph and forecast stages size themselves per window.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub window: usize,
    pub horizon: usize,
    pub d_hidden: usize,
    pub depth: usize,
    pub heads: usize,
    pub d_embed: usize,
    pub d_z: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            window: 12,
            horizon: 12,
            d_hidden: 16,
            depth: 2,
            heads: 8,
            d_embed: 16,
            d_z: 16,
        }
    }
}

impl ModelConfig {
    pub fn multi_scale(&self) -> MultiScaleConfig {
        MultiScaleConfig {
            d_hidden: self.d_hidden,
            seq_len: self.window,
            depth: self.depth,
            heads: self.heads,
            cond_dim: ChaosProfile::SLOTS,
        }
    }

    fn shape_vector(&self) -> Vec<f64> {
        [
            self.window,
            self.horizon,
            self.d_hidden,
            self.depth,
            self.heads,
            self.d_embed,
            self.d_z,
        ]
        .iter()
        .map(|&v| v as f64)
        .collect()
    }

    fn from_shape_vector(v: &[f64]) -> Result<ModelConfig> {
        if v.len() != 7 {
            return Err(ModelError::MalformedRecord {
                detail: format!("shape header holds {} fields, expected 7", v.len()),
            });
        }
        let mut fields = [0usize; 7];
        for (slot, &raw) in fields.iter_mut().zip(v) {
            if !(raw.is_finite() && raw >= 0.0 && raw.fract() == 0.0) {
                return Err(ModelError::MalformedRecord {
                    detail: format!("shape header entry {raw} is not a size"),
                });
            }
            *slot = raw as usize;
        }
        Ok(ModelConfig {
            window: fields[0],
            horizon: fields[1],
            d_hidden: fields[2],
            depth: fields[3],
            heads: fields[4],
            d_embed: fields[5],
            d_z: fields[6],
        })
    }
}

#[derive(Debug)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub encoder: EncoderParams,
    pub graph: GraphParams,
    pub forecast: ForecastParams,
}

impl ModelParams {
    pub fn init<R: Rng>(config: &ModelConfig, rng: &mut R) -> ModelParams {
        let encoder = EncoderParams::init(NODE_FEATURES, &config.multi_scale(), rng);
        let graph = GraphParams::init(
            config.d_hidden,
            config.d_embed,
            config.d_z,
            ChaosProfile::SLOTS,
            rng,
        );
        let forecast = ForecastParams::init(config.d_z, ChaosProfile::SLOTS, config.horizon, rng);
        ModelParams {
            config: config.clone(),
            encoder,
            graph,
            forecast,
        }
    }

    /// Every trainable tensor under a stable dotted name. The same
    /// handles back the live parameters, so writing into a collected
    /// tensor updates the model.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.encoder.collect("encoder", &mut out);
        self.graph.collect("graph", &mut out);
        self.forecast.collect("forecast", &mut out);
        out
    }

    pub fn registry(&self) -> ParamRegistry {
        let mut reg = ParamRegistry::new();
        for (name, t) in self.named_tensors() {
            reg.insert(name, t);
        }
        reg
    }
}

/// Deep copy with detached storage: same shapes and values, fresh
/// tensors, so updates to the copy never touch the original.
pub fn clone_params(params: &ModelParams) -> ModelParams {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let copy = ModelParams::init(&params.config, &mut rng);
    for ((_, src), (_, dst)) in params.named_tensors().iter().zip(copy.named_tensors().iter()) {
        dst.set_data(&src.value());
    }
    copy
}

/// One window's worth of model input, already scaled and featurized.
#[derive(Debug, Clone)]
pub struct ModelInput {
    /// Per node: a window x [`NODE_FEATURES`] block, reading first.
    pub node_features: Vec<Tensor>,
    /// 1 x 20 conditioning row.
    pub cond: Tensor,
    pub coords: Vec<[f64; 2]>,
    pub radius: f64,
    pub k: usize,
}

#[derive(Debug)]
pub struct ModelOutput {
    pub forecast: ForecastWithUncertainty,
    pub adjacency: LearnedAdjacency,
    /// Convolved per-node states, one row per node.
    pub node_states: Tensor,
}

pub fn forward(params: &ModelParams, input: &ModelInput) -> Result<ModelOutput> {
    // Profile slots live on wildly different scales (a near-zero window
    // mean sends the coefficient of variation into the hundreds), so the
    // conditioning row is squashed once here; every stage downstream sees
    // bounded values while the raw profile still drives the cache, the
    // noise model, and the regularizers.
    let cond = input.cond.tanh();
    let mut rows = Vec::with_capacity(input.node_features.len());
    for x in &input.node_features {
        let h = temporal::encode(x, &cond, &params.encoder)?;
        rows.push(h.row(h.rows() - 1)?);
    }
    let x_s = Tensor::concat_rows(&rows)?;
    let (e_n, e_c) = graph::encode_nodes(&x_s, &cond, &params.graph)?;
    let e_r = graph::refine(&e_n, &e_c, &input.coords, input.radius, &params.graph)?;
    let adjacency = graph::build_adjacency(&e_r, &cond, input.k, &params.graph)?;
    let node_states = graph::gcn_layer(&adjacency, &e_r, &params.graph.w_z)?;
    let forecast = forecast::predict(&node_states, &cond, &params.forecast)?;
    Ok(ModelOutput {
        forecast,
        adjacency,
        node_states,
    })
}

// -------------------------------------------------------------------
// binary container: magic, version, then length-prefixed named tensor
// records until end of file
// -------------------------------------------------------------------

fn write_record<W: Write>(w: &mut W, name: &str, dims: &[u32], data: &[f64]) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for d in dims {
        w.write_all(&d.to_le_bytes())?;
    }
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

struct RawRecord {
    name: String,
    dims: Vec<u32>,
    data: Vec<f64>,
}

impl RawRecord {
    fn shape(&self) -> Result<(usize, usize)> {
        match self.dims.len() {
            1 => Ok((1, self.dims[0] as usize)),
            2 => Ok((self.dims[0] as usize, self.dims[1] as usize)),
            r => Err(ModelError::MalformedRecord {
                detail: format!("record {} has rank {r}", self.name),
            }),
        }
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<Option<u32>> {
    let mut buf = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            if filled == 0 {
                return Ok(None);
            }
            return Err(ModelError::MalformedRecord {
                detail: "file ends inside a length field".into(),
            });
        }
        filled += n;
    }
    Ok(Some(u32::from_le_bytes(buf)))
}

fn read_record<R: Read>(r: &mut R) -> Result<Option<RawRecord>> {
    let Some(name_len) = read_u32(r)? else {
        return Ok(None);
    };
    if name_len == 0 || name_len > MAX_NAME_LEN {
        return Err(ModelError::MalformedRecord {
            detail: format!("record name length {name_len} out of range"),
        });
    }
    let mut name_bytes = vec![0u8; name_len as usize];
    r.read_exact(&mut name_bytes)?;
    let name = String::from_utf8(name_bytes).map_err(|_| ModelError::MalformedRecord {
        detail: "record name is not UTF-8".into(),
    })?;
    let rank = read_u32(r)?.ok_or_else(|| ModelError::MalformedRecord {
        detail: format!("record {name} ends before its rank"),
    })?;
    if rank == 0 || rank > 2 {
        return Err(ModelError::MalformedRecord {
            detail: format!("record {name} has rank {rank}"),
        });
    }
    let mut dims = Vec::with_capacity(rank as usize);
    let mut len = 1usize;
    for _ in 0..rank {
        let d = read_u32(r)?.ok_or_else(|| ModelError::MalformedRecord {
            detail: format!("record {name} ends inside its dims"),
        })?;
        if d == 0 || d > MAX_DIM {
            return Err(ModelError::MalformedRecord {
                detail: format!("record {name} has dim {d}"),
            });
        }
        dims.push(d);
        len *= d as usize;
    }
    let mut payload = vec![0u8; len * 8];
    r.read_exact(&mut payload).map_err(|_| ModelError::MalformedRecord {
        detail: format!("record {name} payload is truncated"),
    })?;
    let data = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok(Some(RawRecord { name, dims, data }))
}

/// Writes the model plus any extra named tensors (scaler state, stored
/// coordinates, and the like) to `path`.
pub fn save_model(path: &Path, params: &ModelParams, extras: &[(String, Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    let shape = params.config.shape_vector();
    write_record(&mut w, "meta.shape", &[shape.len() as u32], &shape)?;
    for (name, t) in params.named_tensors() {
        let (r, c) = t.shape();
        write_record(&mut w, &name, &[r as u32, c as u32], &t.value())?;
    }
    for (name, t) in extras {
        let (r, c) = t.shape();
        write_record(&mut w, name, &[r as u32, c as u32], &t.value())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a model written by [`save_model`]. Unrecognized records come
/// back as the extras list in file order.
pub fn load_model(path: &Path) -> Result<(ModelParams, Vec<(String, Tensor)>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MODEL_MAGIC {
        return Err(ModelError::BadMagic);
    }
    let mut version = [0u8; 2];
    r.read_exact(&mut version)?;
    let version = u16::from_le_bytes(version);
    if version != MODEL_VERSION {
        return Err(ModelError::UnsupportedVersion { got: version });
    }

    let mut records = Vec::new();
    while let Some(rec) = read_record(&mut r)? {
        records.push(rec);
    }
    let shape_idx = records
        .iter()
        .position(|rec| rec.name == "meta.shape")
        .ok_or_else(|| ModelError::MissingTensor {
            name: "meta.shape".into(),
        })?;
    let config = ModelConfig::from_shape_vector(&records[shape_idx].data)?;
    records.remove(shape_idx);

    // Values are irrelevant here; every parameter is overwritten below.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let params = ModelParams::init(&config, &mut rng);

    let mut extras = Vec::new();
    let mut remaining: Vec<Option<RawRecord>> = records.into_iter().map(Some).collect();
    for (name, tensor) in params.named_tensors() {
        let slot = remaining
            .iter_mut()
            .find(|r| r.as_ref().is_some_and(|rec| rec.name == name))
            .ok_or_else(|| ModelError::MissingTensor { name: name.clone() })?;
        let rec = slot.take().expect("matched record");
        let got = rec.shape()?;
        if got != tensor.shape() {
            return Err(ModelError::WrongShape {
                name,
                got,
                expected: tensor.shape(),
            });
        }
        tensor.set_data(&rec.data);
    }
    for rec in remaining.into_iter().flatten() {
        let (rows, cols) = rec.shape()?;
        extras.push((rec.name.clone(), Tensor::from_vec(rows, cols, rec.data)?));
    }
    Ok((params, extras))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, Uniform};
    use tempfile::tempdir;

    fn small_config() -> ModelConfig {
        ModelConfig {
            window: 6,
            horizon: 4,
            d_hidden: 6,
            depth: 1,
            heads: 2,
            d_embed: 5,
            d_z: 4,
        }
    }

    fn random_tensor<R: Rng>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> Tensor {
        let dist = Uniform::new(-scale, scale);
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        Tensor::from_vec(rows, cols, data).unwrap()
    }

    fn small_input<R: Rng>(n: usize, cfg: &ModelConfig, rng: &mut R) -> ModelInput {
        let node_features = (0..n)
            .map(|_| random_tensor(cfg.window, NODE_FEATURES, 1.0, rng))
            .collect();
        ModelInput {
            node_features,
            cond: random_tensor(1, ChaosProfile::SLOTS, 0.5, rng),
            coords: (0..n).map(|i| [i as f64, 0.0]).collect(),
            radius: n as f64 + 1.0,
            k: n.saturating_sub(1).max(1),
        }
    }

    #[test]
    fn forward_shapes_line_up() {
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(80);
        let params = ModelParams::init(&cfg, &mut rng);
        let input = small_input(3, &cfg, &mut rng);
        let out = forward(&params, &input).unwrap();
        assert_eq!(out.forecast.y_fused.shape(), (3, cfg.horizon));
        assert_eq!(out.forecast.var_fused.shape(), (3, cfg.horizon));
        assert_eq!(out.node_states.shape(), (3, cfg.d_z));
        assert_eq!(out.adjacency.a.shape(), (3, 3));
        assert!(out.forecast.var_fused.value().iter().all(|&v| v > 0.0));
        let total: f64 = out.forecast.omega.value().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn registry_names_are_unique_and_live() {
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(81);
        let params = ModelParams::init(&cfg, &mut rng);
        let named = params.named_tensors();
        let mut names: Vec<&str> = named.iter().map(|(n, _)| n.as_str()).collect();
        let before = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(before, names.len(), "duplicate parameter names");

        // collected handles alias the live parameters
        let (name, tensor) = &named[0];
        let mut bumped = tensor.value();
        bumped[0] += 1.0;
        tensor.set_data(&bumped);
        let again = params
            .named_tensors()
            .into_iter()
            .find(|(n, _)| n == name)
            .unwrap()
            .1;
        assert_eq!(again.value()[0], bumped[0]);
    }

    #[test]
    fn save_then_load_round_trips_every_tensor() {
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(82);
        let params = ModelParams::init(&cfg, &mut rng);
        let extras = vec![
            ("scaler.center".to_string(), random_tensor(1, 3, 1.0, &mut rng)),
            ("scaler.scale".to_string(), random_tensor(1, 3, 1.0, &mut rng)),
        ];
        let dir = tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_model(&path, &params, &extras).unwrap();

        let (loaded, loaded_extras) = load_model(&path).unwrap();
        assert_eq!(loaded.config, cfg);
        let original: std::collections::HashMap<String, Vec<f64>> = params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.value()))
            .collect();
        for (name, tensor) in loaded.named_tensors() {
            assert_eq!(tensor.value(), original[&name], "tensor {name}");
        }
        assert_eq!(loaded_extras.len(), 2);
        for ((en, et), (ln, lt)) in extras.iter().zip(loaded_extras.iter()) {
            assert_eq!(en, ln);
            assert_eq!(et.value(), lt.value());
            assert_eq!(et.shape(), lt.shape());
        }
    }

    #[test]
    fn loaded_model_reproduces_forward_outputs() {
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(83);
        let params = ModelParams::init(&cfg, &mut rng);
        let input = small_input(2, &cfg, &mut rng);
        let before = forward(&params, &input).unwrap();

        let dir = tempdir().unwrap();
        let path = dir.path().join("model.bin");
        save_model(&path, &params, &[]).unwrap();
        let (loaded, _) = load_model(&path).unwrap();
        let after = forward(&loaded, &input).unwrap();

        assert_eq!(before.forecast.y_fused.value(), after.forecast.y_fused.value());
        assert_eq!(before.forecast.var_fused.value(), after.forecast.var_fused.value());
        assert_eq!(before.adjacency.a.value(), after.adjacency.a.value());
    }

    #[test]
    fn foreign_and_damaged_files_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bogus.bin");
        std::fs::write(&path, b"PKZZ\x01\x00junkjunkjunk").unwrap();
        assert!(matches!(load_model(&path), Err(ModelError::BadMagic)));

        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(84);
        let params = ModelParams::init(&cfg, &mut rng);
        let good = dir.path().join("model.bin");
        save_model(&good, &params, &[]).unwrap();

        let bytes = std::fs::read(&good).unwrap();
        let cut = dir.path().join("cut.bin");
        std::fs::write(&cut, &bytes[..bytes.len() - 11]).unwrap();
        assert!(matches!(
            load_model(&cut),
            Err(ModelError::MalformedRecord { .. })
        ));

        let mut wrong_version = bytes.clone();
        wrong_version[4] = 99;
        let versioned = dir.path().join("versioned.bin");
        std::fs::write(&versioned, &wrong_version).unwrap();
        assert!(matches!(
            load_model(&versioned),
            Err(ModelError::UnsupportedVersion { got: 99 })
        ));
    }

    #[test]
    fn missing_parameters_are_reported_by_name() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.bin");
        {
            let mut w = BufWriter::new(File::create(&path).unwrap());
            w.write_all(&MODEL_MAGIC).unwrap();
            w.write_all(&MODEL_VERSION.to_le_bytes()).unwrap();
            let shape = small_config().shape_vector();
            write_record(&mut w, "meta.shape", &[shape.len() as u32], &shape).unwrap();
            w.flush().unwrap();
        }
        match load_model(&path) {
            Err(ModelError::MissingTensor { name }) => {
                assert!(name.starts_with("encoder."), "first gap was {name}");
            }
            other => panic!("expected a missing-tensor error, got {other:?}"),
        }
    }

    #[test]
    fn full_pipeline_gradients_match_finite_differences() {
        let cfg = ModelConfig {
            window: 4,
            horizon: 3,
            d_hidden: 3,
            depth: 1,
            heads: 1,
            d_embed: 3,
            d_z: 3,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(85);
        let params = ModelParams::init(&cfg, &mut rng);
        let input = small_input(2, &cfg, &mut rng);
        let y = random_tensor(2, cfg.horizon, 1.0, &mut rng);

        let run = || {
            let out = forward(&params, &input).unwrap();
            let unc = forecast::uncertainty_loss(&y, &out.forecast).unwrap();
            let diff = y.sub(&out.forecast.y_fused).unwrap();
            let pred = diff.mul(&diff).unwrap().sum();
            pred.add(&unc).unwrap().add(&out.adjacency.a.mean()).unwrap()
        };
        let loss = run();
        loss.backward().unwrap();

        let named = params.named_tensors();
        let probe_names = [
            "encoder.branch0.w_x",
            "encoder.proj.w",
            "encoder.block0.attn.w_q",
            "encoder.block0.attn.w_g",
            "graph.nodes.w",
            "graph.scorer.w1",
            "graph.conv.w",
            "forecast.short.mean.w",
            "forecast.long.logvar.w",
            "forecast.fusion.w",
        ];
        let eps = 1e-6;
        for probe in probe_names {
            let tensor = &named.iter().find(|(n, _)| n == probe).unwrap().1;
            let grad = tensor.grad();
            let base = tensor.value();
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
                    err < 1e-8 || err / fd.abs().max(1e-12) < 1e-3,
                    "{probe}[{idx}]: fd {fd} vs grad {}",
                    grad[idx]
                );
            }
        }
    }
}
