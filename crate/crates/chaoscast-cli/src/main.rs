//! Batch frontend: analyze series, generate synthetic data, train,
//! predict, compare profiles, and check interval calibration.
//!
//! Exit codes: 0 on success, 1 when training aborts on a non-finite
//! loss, 2 for usage and IO problems.

use std::collections::BTreeMap;
use std::io::{IsTerminal, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use chaoscast::data::{self, RobustScaler, SensorTable, SystemSpec};
use chaoscast::forecast;
use chaoscast::model::{self, ModelConfig, ModelParams};
use chaoscast::nlts::{self, ChaosProfile};
use chaoscast::tensor::Tensor;
use chaoscast::train::{self, ChaosCache, CityData, TrainConfig, TrainError};

#[derive(Parser)]
#[command(
    name = "chaoscast",
    about = "Chaos-aware spatio-temporal forecasting toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract a chaos profile from one sensor column and label its regime.
    Analyze {
        /// Readings CSV (header: timestamp,<sensor_id>,...).
        #[arg(long)]
        input: PathBuf,
        /// Sensor id or zero-based column index; defaults to the first sensor.
        #[arg(long)]
        column: Option<String>,
        /// Where to write the profile JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Embedding dimension override.
        #[arg(long = "m")]
        m: Option<usize>,
        /// Embedding delay override.
        #[arg(long = "tau")]
        tau: Option<usize>,
    },
    /// Generate a synthetic series as a readings CSV.
    Gen {
        /// One of: logistic, lorenz, ar1, sine.
        #[arg(long)]
        system: String,
        /// Comma-separated overrides, e.g. "r=3.9,x0=0.2".
        #[arg(long)]
        params: Option<String>,
        /// Number of samples.
        #[arg(short = 'n', long = "samples")]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on one city directory and write the model plus a history CSV.
    Train {
        /// TOML file with [model] and [train] tables; defaults when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Directory holding readings.csv and optional distances.csv, coords.csv.
        #[arg(long)]
        data: PathBuf,
        /// Model output path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// History CSV path; defaults to the model path with a .history.csv suffix.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Run a trained model over a city directory and emit forecast JSON.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Step between window starts.
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
    /// Distance and per-slot deltas between two profile JSON files.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Comma-separated 20 slot weights; defaults to all ones.
        #[arg(long)]
        weights: Option<String>,
    },
    /// Empirical interval coverage of a trained model at the given levels.
    Calibrate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Comma-separated miscoverage levels.
        #[arg(long, default_value = "0.05,0.1,0.32")]
        alphas: String,
        /// Coverage CSV path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        stride: usize,
    },
}

struct CliError {
    message: String,
    code: u8,
}

impl CliError {
    fn usage(message: impl Into<String>) -> CliError {
        CliError {
            message: message.into(),
            code: 2,
        }
    }
}

impl<E: std::error::Error> From<E> for CliError {
    fn from(e: E) -> CliError {
        CliError {
            message: e.to_string(),
            code: 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Analyze {
            input,
            column,
            out,
            m,
            tau,
        } => cmd_analyze(&input, column.as_deref(), out.as_deref(), m, tau),
        Command::Gen {
            system,
            params,
            n,
            seed,
            out,
        } => cmd_gen(&system, params.as_deref(), n, seed, &out),
        Command::Train {
            config,
            data,
            out,
            seed,
            history,
        } => cmd_train(config.as_deref(), &data, &out, seed, history.as_deref()),
        Command::Predict {
            model,
            data,
            out,
            stride,
        } => cmd_predict(&model, &data, &out, stride),
        Command::Compare { a, b, weights } => cmd_compare(&a, &b, weights.as_deref()),
        Command::Calibrate {
            model,
            data,
            alphas,
            out,
            stride,
        } => cmd_calibrate(&model, &data, &alphas, out.as_deref(), stride),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

// -------------------------------------------------------------------
// analyze
// -------------------------------------------------------------------

fn cmd_analyze(
    input: &Path,
    column: Option<&str>,
    out: Option<&Path>,
    m: Option<usize>,
    tau: Option<usize>,
) -> Result<()> {
    let table = data::read_readings_csv(input)?;
    let sensor = pick_column(&table, column)?;
    let mut series = table.series(sensor);
    if series.iter().any(|v| !v.is_finite()) {
        let mut patched = table.clone();
        patched.interpolate_missing()?;
        series = patched.series(sensor);
    }
    let profile = match (m, tau) {
        (None, None) => nlts::chaos_profile(&series)?,
        (m, tau) => {
            let m = m.unwrap_or(nlts::DEFAULT_EMBED_DIM);
            let tau = tau.unwrap_or_else(|| nlts::default_delay(&series, nlts::DEFAULT_DELAY_CAP));
            nlts::chaos_profile_with(&series, m, tau)?
        }
    };
    println!(
        "regime={} degraded={}",
        paint_regime(&profile),
        profile.degraded
    );
    if let Some(path) = out {
        write_json(path, &profile)?;
        println!("profile written to {}", path.display());
    }
    Ok(())
}

fn pick_column(table: &SensorTable, column: Option<&str>) -> Result<usize> {
    let Some(c) = column else { return Ok(0) };
    if let Some(i) = table.sensor_ids.iter().position(|id| id == c) {
        return Ok(i);
    }
    if let Ok(i) = c.parse::<usize>() {
        if i < table.n_sensors() {
            return Ok(i);
        }
    }
    Err(CliError::usage(format!(
        "no column {c:?}; sensors are {:?}",
        table.sensor_ids
    )))
}

/// Color the regime label when writing to a terminal, unless NO_COLOR
/// is set to a non-empty value.
fn paint_regime(profile: &ChaosProfile) -> String {
    let label = profile.regime.to_string();
    let no_color = std::env::var_os("NO_COLOR").is_some_and(|v| !v.is_empty());
    if no_color || !std::io::stdout().is_terminal() {
        return label;
    }
    let code = match profile.regime {
        nlts::RegimeLabel::Regular => "32",
        nlts::RegimeLabel::WeakChaotic => "33",
        nlts::RegimeLabel::Chaotic => "31",
    };
    format!("\x1b[{code}m{label}\x1b[0m")
}

// -------------------------------------------------------------------
// gen
// -------------------------------------------------------------------

fn cmd_gen(system: &str, params: Option<&str>, n: usize, seed: u64, out: &Path) -> Result<()> {
    let overrides = parse_params(params)?;
    let spec = build_system(system, &overrides)?;
    let series = data::generate(&spec, n, seed);
    let timestamps = (0..n).map(|t| t.to_string()).collect();
    let table = SensorTable::from_parts(vec![system.to_string()], timestamps, series)?;
    data::write_readings_csv(out, &table)?;
    println!("wrote {n} samples of {system} to {}", out.display());
    Ok(())
}

fn parse_params(params: Option<&str>) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    let Some(text) = params else { return Ok(out) };
    for piece in text.split(',').filter(|p| !p.trim().is_empty()) {
        let Some((key, value)) = piece.split_once('=') else {
            return Err(CliError::usage(format!(
                "parameter {piece:?} is not key=value"
            )));
        };
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| CliError::usage(format!("parameter {key} has non-numeric value")))?;
        out.insert(key.trim().to_string(), value);
    }
    Ok(out)
}

fn build_system(name: &str, overrides: &BTreeMap<String, f64>) -> Result<SystemSpec> {
    let take = |defaults: &[(&str, f64)]| -> Result<Vec<f64>> {
        for key in overrides.keys() {
            if !defaults.iter().any(|(k, _)| k == key) {
                let valid: Vec<&str> = defaults.iter().map(|(k, _)| *k).collect();
                return Err(CliError::usage(format!(
                    "unknown parameter {key:?} for {name}; valid: {valid:?}"
                )));
            }
        }
        Ok(defaults
            .iter()
            .map(|(k, d)| overrides.get(*k).copied().unwrap_or(*d))
            .collect())
    };
    match name {
        "logistic" => {
            let v = take(&[("r", 4.0), ("x0", 0.3)])?;
            Ok(SystemSpec::Logistic { r: v[0], x0: v[1] })
        }
        "lorenz" => {
            let v = take(&[
                ("sigma", 10.0),
                ("rho", 28.0),
                ("beta", 8.0 / 3.0),
                ("dt", 0.02),
            ])?;
            Ok(SystemSpec::Lorenz {
                sigma: v[0],
                rho: v[1],
                beta: v[2],
                dt: v[3],
            })
        }
        "ar1" => {
            let v = take(&[("phi", 0.8), ("sigma", 1.0)])?;
            Ok(SystemSpec::Ar1 {
                phi: v[0],
                sigma: v[1],
            })
        }
        "sine" => {
            let v = take(&[("period", 24.0), ("noise", 0.0)])?;
            Ok(SystemSpec::Sine {
                period: v[0],
                noise: v[1],
            })
        }
        other => Err(CliError::usage(format!(
            "unknown system {other:?}; expected logistic, lorenz, ar1, or sine"
        ))),
    }
}

// -------------------------------------------------------------------
// dataset loading shared by train, predict, calibrate
// -------------------------------------------------------------------

/// TOML schema for `--config`: both tables optional, unknown keys rejected.
#[derive(Debug, Default, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
struct FileConfig {
    model: ModelConfig,
    train: TrainConfig,
}

fn read_config(path: Option<&Path>) -> Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path)?;
    let cfg: FileConfig = toml::from_str(&text)?;
    for (field, v) in [
        ("model.window", cfg.model.window),
        ("model.horizon", cfg.model.horizon),
        ("model.d_hidden", cfg.model.d_hidden),
        ("model.depth", cfg.model.depth),
        ("model.heads", cfg.model.heads),
        ("model.d_embed", cfg.model.d_embed),
        ("model.d_z", cfg.model.d_z),
    ] {
        if v == 0 {
            return Err(CliError::usage(format!("config field {field} must be positive")));
        }
    }
    cfg.train
        .validate()
        .map_err(|field| CliError::usage(format!("config field train.{field} is out of range")))?;
    Ok(cfg)
}

struct LoadedCity {
    city: CityData,
    scaler: RobustScaler,
    raw: SensorTable,
}

/// Reads a city directory: readings.csv (required), distances.csv and
/// coords.csv (optional). Missing coordinates become evenly spaced line
/// positions; a missing distance table yields an all-zero static graph.
fn load_city(dir: &Path, window: usize, horizon: usize, stride: usize) -> Result<LoadedCity> {
    let readings = dir.join("readings.csv");
    let mut raw = data::read_readings_csv(&readings)?;
    raw.interpolate_missing()?;
    let (scaled, scaler) = data::robust_scale(&raw);
    let n = scaled.n_sensors();

    let distances = dir.join("distances.csv");
    let static_adj = if distances.exists() {
        let spec = data::read_distances_csv(&distances, &scaled.sensor_ids)?;
        data::spectral_normalize(&data::gaussian_adjacency(&spec))?
    } else {
        Tensor::zeros(n, n)
    };

    let coords_path = dir.join("coords.csv");
    let coords = if coords_path.exists() {
        data::read_coords_csv(&coords_path, &scaled.sensor_ids)?
    } else {
        (0..n).map(|i| [i as f64, 0.0]).collect()
    };

    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "city".to_string());
    let city = CityData::from_table(&name, &scaled, &static_adj, coords, window, horizon, stride)
        .map_err(map_train_err)?;
    Ok(LoadedCity { city, scaler, raw })
}

fn map_train_err(e: TrainError) -> CliError {
    let code = if matches!(e, TrainError::NonFiniteLoss { .. }) {
        1
    } else {
        2
    };
    CliError {
        message: e.to_string(),
        code,
    }
}

fn scaler_extras(scaler: &RobustScaler) -> Vec<(String, Tensor)> {
    let n = scaler.medians.len();
    vec![
        (
            "scaler.center".to_string(),
            Tensor::from_vec(1, n, scaler.medians.clone()).expect("sized"),
        ),
        (
            "scaler.scale".to_string(),
            Tensor::from_vec(1, n, scaler.iqrs.clone()).expect("sized"),
        ),
    ]
}

fn scaler_from_extras(extras: &[(String, Tensor)]) -> Result<RobustScaler> {
    let find = |name: &str| {
        extras
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.value())
            .ok_or_else(|| CliError::usage(format!("model file carries no {name} record")))
    };
    Ok(RobustScaler {
        medians: find("scaler.center")?,
        iqrs: find("scaler.scale")?,
    })
}

// -------------------------------------------------------------------
// train
// -------------------------------------------------------------------

fn cmd_train(
    config: Option<&Path>,
    dir: &Path,
    out: &Path,
    seed: u64,
    history: Option<&Path>,
) -> Result<()> {
    let cfg = read_config(config)?;
    let loaded = load_city(dir, cfg.model.window, cfg.model.horizon, 1)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = ModelParams::init(&cfg.model, &mut rng);

    let result = train::fit(&params, &loaded.city, &cfg.train, seed).map_err(map_train_err)?;

    model::save_model(out, &params, &scaler_extras(&loaded.scaler))?;
    let history_path = history
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.with_extension("history.csv"));
    train::write_history_csv(&history_path, &result.history).map_err(map_train_err)?;

    let last = result.history.last().expect("at least one epoch");
    println!(
        "trained {} epochs on {} ({} windows), best validation loss {:.6}{}",
        last.epoch,
        loaded.city.name,
        loaded.city.windows.len(),
        result.best_val,
        if result.stopped_early {
            ", stopped early"
        } else {
            ""
        }
    );
    println!("model written to {}", out.display());
    println!("history written to {}", history_path.display());
    Ok(())
}

// -------------------------------------------------------------------
// predict
// -------------------------------------------------------------------

#[derive(Serialize)]
struct ForecastDoc {
    window: usize,
    horizon: usize,
    n_sensors: usize,
    sensor_ids: Vec<String>,
    windows: Vec<WindowDoc>,
}

#[derive(Serialize)]
struct WindowDoc {
    start: usize,
    regime: String,
    degraded: bool,
    fusion_weights: Vec<f64>,
    sensors: Vec<SensorDoc>,
}

#[derive(Serialize)]
struct SensorDoc {
    id: String,
    mean: Vec<f64>,
    variance: Vec<f64>,
    actual: Vec<f64>,
}

fn cmd_predict(model_path: &Path, dir: &Path, out: &Path, stride: usize) -> Result<()> {
    if stride == 0 {
        return Err(CliError::usage("stride must be positive"));
    }
    let (params, extras) = model::load_model(model_path)?;
    let scaler = scaler_from_extras(&extras)?;
    let loaded = load_scaled_city(dir, &params, &scaler, stride)?;
    let city = &loaded.city;

    let mut cache = ChaosCache::new(
        train::default_cache_threshold(&city.windows),
        TrainConfig::default().cache_capacity,
    );
    let mut docs = Vec::with_capacity(city.windows.len());
    for idx in 0..city.windows.len() {
        let profile = train::cache_lookup_or_extract(&mut cache, &city.windows[idx])
            .map_err(map_train_err)?;
        let slots = profile.pooled.slots();
        let prepared = city.prepare_with_slots(idx, &profile, &slots);
        let output = model::forward(&params, &prepared.input)?;

        let horizon = params.config.horizon;
        let mean = output.forecast.y_fused.value();
        let var = output.forecast.var_fused.value();
        let actual = prepared.target.value();
        let sensors = (0..city.windows[idx].n_sensors)
            .map(|s| SensorDoc {
                id: loaded.raw.sensor_ids[s].clone(),
                mean: (0..horizon)
                    .map(|h| scaler.inverse_value(s, mean[s * horizon + h]))
                    .collect(),
                variance: (0..horizon)
                    .map(|h| var[s * horizon + h] * scaler.iqrs[s] * scaler.iqrs[s])
                    .collect(),
                actual: (0..horizon)
                    .map(|h| scaler.inverse_value(s, actual[s * horizon + h]))
                    .collect(),
            })
            .collect();
        docs.push(WindowDoc {
            start: city.windows[idx].start,
            regime: profile.pooled.regime.to_string(),
            degraded: profile.pooled.degraded,
            fusion_weights: output.forecast.omega.value(),
            sensors,
        });
    }

    let doc = ForecastDoc {
        window: params.config.window,
        horizon: params.config.horizon,
        n_sensors: loaded.raw.n_sensors(),
        sensor_ids: loaded.raw.sensor_ids.clone(),
        windows: docs,
    };
    write_json(out, &doc)?;
    println!(
        "wrote forecasts for {} windows to {}",
        doc.windows.len(),
        out.display()
    );
    Ok(())
}

/// Like [`load_city`] but scaling with the persisted state instead of
/// refitting, so predictions line up with how the model was trained.
fn load_scaled_city(
    dir: &Path,
    params: &ModelParams,
    scaler: &RobustScaler,
    stride: usize,
) -> Result<LoadedCity> {
    let readings = dir.join("readings.csv");
    let mut raw = data::read_readings_csv(&readings)?;
    raw.interpolate_missing()?;
    let n = raw.n_sensors();
    if scaler.medians.len() != n {
        return Err(CliError::usage(format!(
            "model was trained on {} sensors, data has {n}",
            scaler.medians.len()
        )));
    }
    let mut scaled = raw.clone();
    for t in 0..scaled.n_steps() {
        for s in 0..n {
            scaled.set_value(t, s, scaler.transform_value(s, raw.value(t, s)));
        }
    }

    let distances = dir.join("distances.csv");
    let static_adj = if distances.exists() {
        let spec = data::read_distances_csv(&distances, &scaled.sensor_ids)?;
        data::spectral_normalize(&data::gaussian_adjacency(&spec))?
    } else {
        Tensor::zeros(n, n)
    };
    let coords_path = dir.join("coords.csv");
    let coords = if coords_path.exists() {
        data::read_coords_csv(&coords_path, &scaled.sensor_ids)?
    } else {
        (0..n).map(|i| [i as f64, 0.0]).collect()
    };
    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "city".to_string());
    let city = CityData::from_table(
        &name,
        &scaled,
        &static_adj,
        coords,
        params.config.window,
        params.config.horizon,
        stride,
    )
    .map_err(map_train_err)?;
    Ok(LoadedCity {
        city,
        scaler: scaler.clone(),
        raw,
    })
}

// -------------------------------------------------------------------
// compare
// -------------------------------------------------------------------

fn cmd_compare(a_path: &Path, b_path: &Path, weights: Option<&str>) -> Result<()> {
    let a: ChaosProfile = read_json(a_path)?;
    let b: ChaosProfile = read_json(b_path)?;
    let w = match weights {
        None => [1.0; ChaosProfile::SLOTS],
        Some(text) => {
            let parsed: Vec<f64> = text
                .split(',')
                .map(|p| p.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| CliError::usage("weights must be numeric"))?;
            parsed.try_into().map_err(|v: Vec<f64>| {
                CliError::usage(format!(
                    "expected {} weights, got {}",
                    ChaosProfile::SLOTS,
                    v.len()
                ))
            })?
        }
    };
    let distance = nlts::profile_distance(&a, &b, &w);
    println!("distance={distance}");
    let (sa, sb) = (a.slots(), b.slots());
    for (i, name) in ChaosProfile::SLOT_NAMES.iter().enumerate() {
        println!(
            "{name}: a={} b={} delta={}",
            sa[i],
            sb[i],
            sa[i] - sb[i]
        );
    }
    Ok(())
}

// -------------------------------------------------------------------
// calibrate
// -------------------------------------------------------------------

fn cmd_calibrate(
    model_path: &Path,
    dir: &Path,
    alphas: &str,
    out: Option<&Path>,
    stride: usize,
) -> Result<()> {
    if stride == 0 {
        return Err(CliError::usage("stride must be positive"));
    }
    let levels: Vec<f64> = alphas
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| CliError::usage("alphas must be numeric"))?;
    for &a in &levels {
        if !(0.0 < a && a < 1.0) {
            return Err(CliError::usage(format!("alpha {a} is outside (0, 1)")));
        }
    }

    let (params, extras) = model::load_model(model_path)?;
    let scaler = scaler_from_extras(&extras)?;
    let loaded = load_scaled_city(dir, &params, &scaler, stride)?;
    let city = &loaded.city;

    // collect residuals and variances once; coverage per level after
    let mut cache = ChaosCache::new(
        train::default_cache_threshold(&city.windows),
        TrainConfig::default().cache_capacity,
    );
    let mut residuals = Vec::new();
    let mut sigmas = Vec::new();
    for idx in 0..city.windows.len() {
        let prepared = city.prepare(idx, &mut cache).map_err(map_train_err)?;
        let output = model::forward(&params, &prepared.input)?;
        let y = prepared.target.value();
        let mean = output.forecast.y_fused.value();
        let var = output.forecast.var_fused.value();
        for i in 0..y.len() {
            residuals.push(y[i] - mean[i]);
            sigmas.push(var[i].sqrt());
        }
    }
    if residuals.is_empty() {
        return Err(CliError::usage("no windows to calibrate on"));
    }

    let mut text = String::from("alpha,nominal,z,coverage,count\n");
    for &alpha in &levels {
        let z = forecast::normal_quantile(1.0 - alpha / 2.0);
        let covered = residuals
            .iter()
            .zip(&sigmas)
            .filter(|(r, s)| r.abs() <= z * **s)
            .count();
        let coverage = covered as f64 / residuals.len() as f64;
        text.push_str(&format!(
            "{alpha},{},{z},{coverage},{}\n",
            1.0 - alpha,
            residuals.len()
        ));
    }
    match out {
        Some(path) => {
            std::fs::write(path, &text)?;
            println!("coverage table written to {}", path.display());
        }
        None => print!("{text}"),
    }
    Ok(())
}

// -------------------------------------------------------------------
// small IO helpers
// -------------------------------------------------------------------

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut file, value)?;
    file.write_all(b"\n")?;
    file.flush()?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}
