//! Dataset ingestion and preprocessing: robust per-sensor scaling,
//! distance-kernel graph construction, physics-informed features,
//! sliding windows, synthetic system generators, and the CSV formats
//! the command-line tools speak.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed input: {0}")]
    Malformed(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// A T×N block of sensor readings with row timestamps.
///
/// Timestamps are carried as opaque strings; nothing downstream parses
/// them, they only survive round-trips through the CSV format.
#[derive(Debug, Clone, PartialEq)]
pub struct SensorTable {
    pub sensor_ids: Vec<String>,
    pub timestamps: Vec<String>,
    pub interval_minutes: Option<f64>,
    pub coords: Option<Vec<[f64; 2]>>,
    data: Vec<f64>, // row-major T×N
}

impl SensorTable {
    pub fn from_parts(
        sensor_ids: Vec<String>,
        timestamps: Vec<String>,
        data: Vec<f64>,
    ) -> Result<SensorTable> {
        if sensor_ids.is_empty() {
            return Err(DataError::Shape("table needs at least one sensor".into()));
        }
        if data.len() != sensor_ids.len() * timestamps.len() {
            return Err(DataError::Shape(format!(
                "{} values cannot fill {} steps x {} sensors",
                data.len(),
                timestamps.len(),
                sensor_ids.len()
            )));
        }
        Ok(SensorTable {
            sensor_ids,
            timestamps,
            interval_minutes: None,
            coords: None,
            data,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.timestamps.len()
    }

    pub fn n_sensors(&self) -> usize {
        self.sensor_ids.len()
    }

    pub fn value(&self, t: usize, sensor: usize) -> f64 {
        self.data[t * self.n_sensors() + sensor]
    }

    pub fn set_value(&mut self, t: usize, sensor: usize, v: f64) {
        let n = self.n_sensors();
        self.data[t * n + sensor] = v;
    }

    /// One sensor's full series, oldest first.
    pub fn series(&self, sensor: usize) -> Vec<f64> {
        (0..self.n_steps()).map(|t| self.value(t, sensor)).collect()
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn has_missing(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }

    /// Fill non-finite readings: linear interpolation between the
    /// nearest finite samples of the same sensor, holding the boundary
    /// value at the edges. Returns how many cells were filled; a sensor
    /// with no finite sample at all is an error.
    pub fn interpolate_missing(&mut self) -> Result<usize> {
        let (t_len, n) = (self.n_steps(), self.n_sensors());
        let mut filled = 0;
        for s in 0..n {
            let col: Vec<f64> = (0..t_len).map(|t| self.value(t, s)).collect();
            let anchors: Vec<usize> = (0..t_len).filter(|&t| col[t].is_finite()).collect();
            if anchors.is_empty() {
                return Err(DataError::Malformed(format!(
                    "sensor {} has no finite samples",
                    self.sensor_ids[s]
                )));
            }
            if anchors.len() == t_len {
                continue;
            }
            for t in 0..t_len {
                if col[t].is_finite() {
                    continue;
                }
                let next = anchors.partition_point(|&a| a < t);
                let v = if next == 0 {
                    col[anchors[0]] // leading edge: hold first value
                } else if next == anchors.len() {
                    col[anchors[next - 1]] // trailing edge: hold last value
                } else {
                    let (a, b) = (anchors[next - 1], anchors[next]);
                    let w = (t - a) as f64 / (b - a) as f64;
                    col[a] + w * (col[b] - col[a])
                };
                self.set_value(t, s, v);
                filled += 1;
            }
        }
        Ok(filled)
    }
}

/// Per-sensor median/IQR state captured by [`robust_scale`], enough to
/// undo the transform exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustScaler {
    pub medians: Vec<f64>,
    pub iqrs: Vec<f64>,
}

const IQR_FLOOR: f64 = 1e-6;

impl RobustScaler {
    pub fn transform_value(&self, sensor: usize, v: f64) -> f64 {
        (v - self.medians[sensor]) / self.iqrs[sensor]
    }

    pub fn inverse_value(&self, sensor: usize, v: f64) -> f64 {
        v * self.iqrs[sensor] + self.medians[sensor]
    }
}

/// Scale each sensor to (x − median)/IQR, with the IQR floored at 1e−6
/// so constant sensors map to zero instead of dividing by zero.
pub fn robust_scale(table: &SensorTable) -> (SensorTable, RobustScaler) {
    let n = table.n_sensors();
    let mut medians = Vec::with_capacity(n);
    let mut iqrs = Vec::with_capacity(n);
    for s in 0..n {
        let mut col = table.series(s);
        col.sort_by(|a, b| a.total_cmp(b));
        medians.push(quantile_sorted(&col, 0.5));
        let iqr = quantile_sorted(&col, 0.75) - quantile_sorted(&col, 0.25);
        iqrs.push(iqr.max(IQR_FLOOR));
    }
    let scaler = RobustScaler { medians, iqrs };
    let mut scaled = table.clone();
    for t in 0..table.n_steps() {
        for s in 0..n {
            scaled.set_value(t, s, scaler.transform_value(s, table.value(t, s)));
        }
    }
    (scaled, scaler)
}

/// Linear-interpolation quantile of an ascending slice.
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Pairwise sensor distances plus the kernel parameters for turning
/// them into edge weights. Distances may be infinite for unknown pairs;
/// those simply fall outside any cutoff.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticGraphSpec {
    pub n: usize,
    pub distances: Vec<f64>, // row-major N×N
    /// Kernel width; defaults to the standard deviation of the finite
    /// entries of the distance table.
    pub sigma: Option<f64>,
    /// Cutoff; defaults to the 75th percentile of the finite entries.
    pub kappa: Option<f64>,
}

impl StaticGraphSpec {
    pub fn new(n: usize, distances: Vec<f64>) -> Result<StaticGraphSpec> {
        if distances.len() != n * n {
            return Err(DataError::Shape(format!(
                "distance table has {} entries, expected {}x{}",
                distances.len(),
                n,
                n
            )));
        }
        for i in 0..n {
            if distances[i * n + i] != 0.0 {
                return Err(DataError::Malformed(format!(
                    "self-distance of node {i} must be 0"
                )));
            }
            for j in 0..n {
                let d = distances[i * n + j];
                if d.is_nan() || d < 0.0 {
                    return Err(DataError::Malformed(format!(
                        "distance ({i},{j}) = {d} is not a valid distance"
                    )));
                }
            }
        }
        Ok(StaticGraphSpec {
            n,
            distances,
            sigma: None,
            kappa: None,
        })
    }

    fn finite_entries(&self) -> Vec<f64> {
        self.distances.iter().copied().filter(|d| d.is_finite()).collect()
    }

    pub fn effective_sigma(&self) -> f64 {
        let sigma = self.sigma.unwrap_or_else(|| {
            let fin = self.finite_entries();
            let mu = fin.iter().sum::<f64>() / fin.len() as f64;
            (fin.iter().map(|d| (d - mu) * (d - mu)).sum::<f64>() / fin.len() as f64).sqrt()
        });
        if sigma < 1e-12 {
            1.0
        } else {
            sigma
        }
    }

    pub fn effective_kappa(&self) -> f64 {
        self.kappa.unwrap_or_else(|| {
            let mut fin = self.finite_entries();
            fin.sort_by(|a, b| a.total_cmp(b));
            quantile_sorted(&fin, 0.75)
        })
    }
}

/// Gaussian-kernel adjacency: `exp(−d²/σ²)` for pairs within the
/// cutoff, 0 beyond it. The diagonal comes out as 1 (distance 0).
pub fn gaussian_adjacency(spec: &StaticGraphSpec) -> Tensor {
    let sigma = spec.effective_sigma();
    let kappa = spec.effective_kappa();
    let sig_sq = sigma * sigma;
    let data: Vec<f64> = spec
        .distances
        .iter()
        .map(|&d| if d <= kappa { (-d * d / sig_sq).exp() } else { 0.0 })
        .collect();
    Tensor::from_vec(spec.n, spec.n, data).expect("square by construction")
}

/// Symmetric degree normalisation `D^{−1/2} A D^{−1/2}`.
///
/// Rows with zero degree have no mass to redistribute and pass through
/// unchanged (their entries are already all zero).
pub fn spectral_normalize(a: &Tensor) -> std::result::Result<Tensor, crate::tensor::TensorError> {
    let n = a.rows();
    if a.cols() != n {
        return Err(crate::tensor::TensorError::BadDimension {
            op: "spectral_normalize",
            detail: format!("matrix must be square, got {}x{}", a.rows(), a.cols()),
        });
    }
    let data = a.data();
    let mut inv_sqrt = vec![0.0; n];
    for i in 0..n {
        let deg: f64 = data[i * n..(i + 1) * n].iter().sum();
        if deg > 0.0 {
            inv_sqrt[i] = 1.0 / deg.sqrt();
        }
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            out[i * n + j] = inv_sqrt[i] * data[i * n + j] * inv_sqrt[j];
        }
    }
    drop(data);
    Tensor::from_vec(n, n, out)
}

/// Per-step, per-sensor structural features: static degree centrality,
/// trailing flow variance, weighted neighbour influence, and one-step
/// temporal gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct PhysicsFeatures {
    n_steps: usize,
    n_sensors: usize,
    pub degree: Vec<f64>,             // N
    pub flow_variance: Vec<f64>,      // T×N
    pub neighbour_influence: Vec<f64>, // T×N
    pub temporal_gradient: Vec<f64>,  // T×N
}

pub const FLOW_VARIANCE_WINDOW: usize = 12;
pub const PHYSICS_FEATURE_COUNT: usize = 4;

impl PhysicsFeatures {
    /// The 4-vector for one step and sensor, in the order degree,
    /// flow variance, neighbour influence, temporal gradient.
    pub fn at(&self, t: usize, sensor: usize) -> [f64; PHYSICS_FEATURE_COUNT] {
        let idx = t * self.n_sensors + sensor;
        [
            self.degree[sensor],
            self.flow_variance[idx],
            self.neighbour_influence[idx],
            self.temporal_gradient[idx],
        ]
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }
}

/// Compute [`PhysicsFeatures`] for a readings block under adjacency `a`.
///
/// The flow variance is the population variance over a trailing window
/// of up to 12 steps; the gradient at step 0 is defined as 0.
pub fn physics_features(table: &SensorTable, a: &Tensor) -> Result<PhysicsFeatures> {
    let (t_len, n) = (table.n_steps(), table.n_sensors());
    if a.rows() != n || a.cols() != n {
        return Err(DataError::Shape(format!(
            "adjacency is {}x{} but table has {} sensors",
            a.rows(),
            a.cols(),
            n
        )));
    }
    let adj = a.data();

    let degree: Vec<f64> = (0..n).map(|i| adj[i * n..(i + 1) * n].iter().sum()).collect();

    let mut flow_variance = vec![0.0; t_len * n];
    let mut neighbour_influence = vec![0.0; t_len * n];
    let mut temporal_gradient = vec![0.0; t_len * n];
    for t in 0..t_len {
        for i in 0..n {
            let idx = t * n + i;
            let w0 = t + 1 - FLOW_VARIANCE_WINDOW.min(t + 1);
            let win = (w0..=t).map(|u| table.value(u, i));
            let len = (t - w0 + 1) as f64;
            let mean = win.clone().sum::<f64>() / len;
            flow_variance[idx] = win.map(|v| (v - mean) * (v - mean)).sum::<f64>() / len;

            neighbour_influence[idx] =
                (0..n).map(|j| adj[i * n + j] * table.value(t, j)).sum();

            if t > 0 {
                temporal_gradient[idx] = table.value(t, i) - table.value(t - 1, i);
            }
        }
    }
    Ok(PhysicsFeatures {
        n_steps: t_len,
        n_sensors: n,
        degree,
        flow_variance,
        neighbour_influence,
        temporal_gradient,
    })
}

/// One training example: `input` covers `lookback` steps, `target` the
/// `horizon` steps immediately after, both over all sensors.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesWindow {
    pub start: usize,
    pub lookback: usize,
    pub horizon: usize,
    pub n_sensors: usize,
    pub input: Vec<f64>,  // lookback×N row-major
    pub target: Vec<f64>, // horizon×N row-major
}

/// Cut sliding windows of `lookback` inputs plus `horizon` targets.
pub fn windows(
    table: &SensorTable,
    lookback: usize,
    horizon: usize,
    stride: usize,
) -> Result<Vec<SeriesWindow>> {
    let (t_len, n) = (table.n_steps(), table.n_sensors());
    if lookback == 0 || horizon == 0 || stride == 0 {
        return Err(DataError::Shape(
            "lookback, horizon, and stride must all be positive".into(),
        ));
    }
    if t_len < lookback + horizon {
        return Err(DataError::Shape(format!(
            "{t_len} steps cannot hold a {lookback}-step window plus {horizon}-step horizon"
        )));
    }
    let count = (t_len - lookback - horizon) / stride + 1;
    let mut out = Vec::with_capacity(count);
    for w in 0..count {
        let start = w * stride;
        let mut input = Vec::with_capacity(lookback * n);
        for t in start..start + lookback {
            for s in 0..n {
                input.push(table.value(t, s));
            }
        }
        let mut target = Vec::with_capacity(horizon * n);
        for t in start + lookback..start + lookback + horizon {
            for s in 0..n {
                target.push(table.value(t, s));
            }
        }
        out.push(SeriesWindow {
            start,
            lookback,
            horizon,
            n_sensors: n,
            input,
            target,
        });
    }
    Ok(out)
}

/// Synthetic series families used for oracles and demos.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "system", rename_all = "snake_case")]
pub enum SystemSpec {
    Logistic { r: f64, x0: f64 },
    Lorenz { sigma: f64, rho: f64, beta: f64, dt: f64 },
    Ar1 { phi: f64, sigma: f64 },
    Sine { period: f64, noise: f64 },
}

impl SystemSpec {
    pub fn logistic(r: f64) -> SystemSpec {
        SystemSpec::Logistic { r, x0: 0.3 }
    }

    pub fn lorenz_canonical() -> SystemSpec {
        SystemSpec::Lorenz {
            sigma: 10.0,
            rho: 28.0,
            beta: 8.0 / 3.0,
            dt: 0.02,
        }
    }
}

/// Steps discarded before the Lorenz trajectory is recorded, letting it
/// settle onto the attractor.
const LORENZ_TRANSIENT: usize = 500;

/// Generate `n` samples of the chosen system. Deterministic in `seed`;
/// the noiseless systems ignore it.
pub fn generate(system: &SystemSpec, n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match *system {
        SystemSpec::Logistic { r, x0 } => {
            let mut v = x0;
            (0..n)
                .map(|_| {
                    v = r * v * (1.0 - v);
                    v
                })
                .collect()
        }
        SystemSpec::Lorenz { .. } => lorenz_states(system, n)
            .expect("lorenz spec")
            .iter()
            .map(|s| s[0])
            .collect(),
        SystemSpec::Ar1 { phi, sigma } => {
            let mut v = 0.0;
            (0..n)
                .map(|_| {
                    let e: f64 = rng.sample(StandardNormal);
                    v = phi * v + sigma * e;
                    v
                })
                .collect()
        }
        SystemSpec::Sine { period, noise } => (0..n)
            .map(|t| {
                let e: f64 = rng.sample(StandardNormal);
                (std::f64::consts::TAU * t as f64 / period).sin() + noise * e
            })
            .collect(),
    }
}

fn step(s: [f64; 3], k: [f64; 3], h: f64) -> [f64; 3] {
    [s[0] + h * k[0], s[1] + h * k[1], s[2] + h * k[2]]
}

/// Full Lorenz state trajectory (post-transient), for tests that need
/// the norm rather than the x-component.
pub fn lorenz_states(spec: &SystemSpec, n: usize) -> Option<Vec<[f64; 3]>> {
    let SystemSpec::Lorenz { sigma, rho, beta, dt } = *spec else {
        return None;
    };
    let mut state = [1.0, 1.0, 1.0];
    let deriv = |s: [f64; 3]| {
        [
            sigma * (s[1] - s[0]),
            s[0] * (rho - s[2]) - s[1],
            s[0] * s[1] - beta * s[2],
        ]
    };
    let mut out = Vec::with_capacity(n);
    for i in 0..n + LORENZ_TRANSIENT {
        let k1 = deriv(state);
        let k2 = deriv(step(state, k1, dt / 2.0));
        let k3 = deriv(step(state, k2, dt / 2.0));
        let k4 = deriv(step(state, k3, dt));
        for d in 0..3 {
            state[d] += dt / 6.0 * (k1[d] + 2.0 * k2[d] + 2.0 * k3[d] + k4[d]);
        }
        if i >= LORENZ_TRANSIENT {
            out.push(state);
        }
    }
    Some(out)
}

// ---------------------------------------------------------------------
// CSV formats. Readings: `timestamp,<sensor_id>,...` one row per step,
// blank cells are missing values. Distances: `from,to,distance_meters`.
// Coordinates: `sensor_id,x,y`.
// ---------------------------------------------------------------------

pub fn read_readings_csv(path: &Path) -> Result<SensorTable> {
    let mut reader = csv::ReaderBuilder::new().flexible(false).from_path(path)?;
    let headers = reader.headers()?.clone();
    if headers.is_empty() || headers.get(0) != Some("timestamp") {
        return Err(DataError::Malformed(
            "readings header must start with 'timestamp'".into(),
        ));
    }
    let sensor_ids: Vec<String> = headers.iter().skip(1).map(str::to_owned).collect();
    if sensor_ids.is_empty() {
        return Err(DataError::Malformed("no sensor columns".into()));
    }
    let mut timestamps = Vec::new();
    let mut data = Vec::new();
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        timestamps.push(record.get(0).unwrap_or_default().to_owned());
        for (col, cell) in record.iter().skip(1).enumerate() {
            let trimmed = cell.trim();
            if trimmed.is_empty() || trimmed.eq_ignore_ascii_case("nan") {
                data.push(f64::NAN);
            } else {
                data.push(trimmed.parse::<f64>().map_err(|_| {
                    DataError::Malformed(format!(
                        "row {} column {}: '{}' is not a number",
                        row_idx + 2,
                        sensor_ids[col],
                        cell
                    ))
                })?);
            }
        }
    }
    SensorTable::from_parts(sensor_ids, timestamps, data)
}

pub fn write_readings_csv(path: &Path, table: &SensorTable) -> Result<()> {
    let mut out = String::new();
    out.push_str("timestamp");
    for id in &table.sensor_ids {
        out.push(',');
        out.push_str(id);
    }
    out.push('\n');
    for t in 0..table.n_steps() {
        out.push_str(&table.timestamps[t]);
        for s in 0..table.n_sensors() {
            out.push(',');
            let v = table.value(t, s);
            if v.is_finite() {
                out.push_str(&format!("{v}"));
            }
        }
        out.push('\n');
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Read a `from,to,distance_meters` table into a distance matrix over
/// the given sensor order. Pairs listed in one direction are mirrored;
/// unlisted pairs are unreachable (infinite distance).
pub fn read_distances_csv(path: &Path, sensor_ids: &[String]) -> Result<StaticGraphSpec> {
    let index: HashMap<&str, usize> = sensor_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let n = sensor_ids.len();
    let mut distances = vec![f64::INFINITY; n * n];
    for i in 0..n {
        distances[i * n + i] = 0.0;
    }
    let mut reader = csv::ReaderBuilder::new().from_path(path)?;
    {
        let headers = reader.headers()?;
        if headers.iter().collect::<Vec<_>>() != ["from", "to", "distance_meters"] {
            return Err(DataError::Malformed(
                "distances header must be 'from,to,distance_meters'".into(),
            ));
        }
    }
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let badrow = |detail: String| DataError::Malformed(format!("row {}: {detail}", row_idx + 2));
        let from = *index
            .get(record.get(0).unwrap_or_default())
            .ok_or_else(|| badrow(format!("unknown sensor '{}'", record.get(0).unwrap_or_default())))?;
        let to = *index
            .get(record.get(1).unwrap_or_default())
            .ok_or_else(|| badrow(format!("unknown sensor '{}'", record.get(1).unwrap_or_default())))?;
        let d: f64 = record
            .get(2)
            .unwrap_or_default()
            .trim()
            .parse()
            .map_err(|_| badrow("distance is not a number".into()))?;
        if d.is_nan() || d < 0.0 {
            return Err(badrow(format!("invalid distance {d}")));
        }
        if from == to && d != 0.0 {
            return Err(badrow("self-distance must be 0".into()));
        }
        distances[from * n + to] = d;
        distances[to * n + from] = d;
    }
    StaticGraphSpec::new(n, distances)
}

pub fn read_coords_csv(path: &Path, sensor_ids: &[String]) -> Result<Vec<[f64; 2]>> {
    let index: HashMap<&str, usize> = sensor_ids
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut coords = vec![None; sensor_ids.len()];
    let mut reader = csv::ReaderBuilder::new().from_path(path)?;
    {
        let headers = reader.headers()?;
        if headers.iter().collect::<Vec<_>>() != ["sensor_id", "x", "y"] {
            return Err(DataError::Malformed(
                "coordinates header must be 'sensor_id,x,y'".into(),
            ));
        }
    }
    for (row_idx, record) in reader.records().enumerate() {
        let record = record?;
        let badrow = |detail: String| DataError::Malformed(format!("row {}: {detail}", row_idx + 2));
        let id = record.get(0).unwrap_or_default();
        let i = *index.get(id).ok_or_else(|| badrow(format!("unknown sensor '{id}'")))?;
        let x: f64 = record.get(1).unwrap_or_default().trim().parse().map_err(|_| badrow("x is not a number".into()))?;
        let y: f64 = record.get(2).unwrap_or_default().trim().parse().map_err(|_| badrow("y is not a number".into()))?;
        coords[i] = Some([x, y]);
    }
    coords
        .into_iter()
        .enumerate()
        .map(|(i, c)| {
            c.ok_or_else(|| {
                DataError::Malformed(format!("sensor {} missing coordinates", sensor_ids[i]))
            })
        })
        .collect()
}

pub fn write_coords_csv(path: &Path, sensor_ids: &[String], coords: &[[f64; 2]]) -> Result<()> {
    let mut out = String::from("sensor_id,x,y\n");
    for (id, c) in sensor_ids.iter().zip(coords) {
        out.push_str(&format!("{id},{},{}\n", c[0], c[1]));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_distances_csv(path: &Path, sensor_ids: &[String], spec: &StaticGraphSpec) -> Result<()> {
    let mut out = String::from("from,to,distance_meters\n");
    let n = spec.n;
    for i in 0..n {
        for j in i + 1..n {
            let d = spec.distances[i * n + j];
            if d.is_finite() {
                out.push_str(&format!("{},{},{d}\n", sensor_ids[i], sensor_ids[j]));
            }
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Euclidean distance table from planar coordinates.
pub fn distances_from_coords(coords: &[[f64; 2]]) -> StaticGraphSpec {
    let n = coords.len();
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let dx = coords[i][0] - coords[j][0];
            let dy = coords[i][1] - coords[j][1];
            d[i * n + j] = (dx * dx + dy * dy).sqrt();
        }
    }
    StaticGraphSpec::new(n, d).expect("zero diagonal by construction")
}
