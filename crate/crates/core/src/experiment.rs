//! Experiment configuration, sweeps and result files.
//!
//! A configuration is a TOML document:
//!
//! ```toml
//! seed = 1
//! trials = 50
//! schemes = ["proposed_greedy", "individual_encoding", "single_codeword"]
//!
//! [scenario]
//! users = 5
//! elements = 20
//! tx_power = "30 dBm"
//! noise_power = "-80 dBm"
//! payload_bits = 256
//! eps_max = 1e-5
//!
//! [sweep]
//! parameter = "N"
//! values = [0, 10, 20]
//!
//! [output]
//! dir = "results/example"
//! ```
//!
//! Powers take a unit suffix (`dBm`, `dBW`, `W`, `mW`); `pathloss_ref` is
//! either a linear number or a string in `dB`.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::channel::{PathlossExponents, Scenario};
use crate::driver::{self, Aggregate, BatchOptions, DriverControls, DriverError, SchemeId, SchemeKind, TrialRecord};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{0}")]
    Parse(String),
    #[error("invalid value for `{field}`: {msg}")]
    Invalid { field: String, msg: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn invalid(field: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        field: field.to_string(),
        msg: msg.into(),
    }
}

/// A power level, stored in watts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Power(pub f64);

impl FromStr for Power {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let split = t
            .find(|c: char| c.is_ascii_alphabetic() && c != 'e' && c != 'E')
            .ok_or_else(|| format!("`{s}` needs a unit (dBm, dBW, W or mW)"))?;
        let (num, unit) = t.split_at(split);
        let x: f64 = num
            .trim()
            .parse()
            .map_err(|_| format!("`{s}` does not start with a number"))?;
        let watts = match unit.trim() {
            "dBm" => 10f64.powf((x - 30.0) / 10.0),
            "dBW" => 10f64.powf(x / 10.0),
            "W" => x,
            "mW" => x * 1e-3,
            other => return Err(format!("unknown power unit `{other}`")),
        };
        if !(watts > 0.0 && watts.is_finite()) {
            return Err(format!("`{s}` is not a positive finite power"));
        }
        Ok(Power(watts))
    }
}

impl TryFrom<String> for Power {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Power> for String {
    fn from(p: Power) -> Self {
        format!("{} W", p.0)
    }
}

/// Linear gain, written either as a number or as `"<x> dB"`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GainRepr", into = "f64")]
pub struct Gain(pub f64);

#[derive(Deserialize)]
#[serde(untagged)]
enum GainRepr {
    Linear(f64),
    Text(String),
}

impl TryFrom<GainRepr> for Gain {
    type Error = String;

    fn try_from(r: GainRepr) -> Result<Self, Self::Error> {
        match r {
            GainRepr::Linear(x) => Ok(Gain(x)),
            GainRepr::Text(s) => {
                let num = s
                    .trim()
                    .strip_suffix("dB")
                    .ok_or_else(|| format!("`{s}` must be a number or end in dB"))?;
                let db: f64 = num.trim().parse().map_err(|_| format!("`{s}` is not a dB value"))?;
                Ok(Gain(10f64.powf(db / 10.0)))
            }
        }
    }
}

impl From<Gain> for f64 {
    fn from(g: Gain) -> Self {
        g.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Payload {
    Uniform(u64),
    PerUser(Vec<u64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub users: usize,
    pub elements: usize,
    pub tx_power: Power,
    pub noise_power: Power,
    pub payload_bits: Payload,
    pub eps_max: f64,
    #[serde(default = "defaults::pathloss_ref")]
    pub pathloss_ref: Gain,
    #[serde(default)]
    pub pathloss_exponents: PathlossExponents,
    #[serde(default = "defaults::bs_position")]
    pub bs_position: [f64; 2],
    #[serde(default = "defaults::irs_position")]
    pub irs_position: [f64; 2],
    #[serde(default = "defaults::user_area_center")]
    pub user_area_center: [f64; 2],
    #[serde(default = "defaults::user_area_radius")]
    pub user_area_radius: f64,
}

mod defaults {
    use super::Gain;
    use crate::channel::Scenario;

    pub fn pathloss_ref() -> Gain {
        Gain(Scenario::default().pathloss_ref)
    }
    pub fn bs_position() -> [f64; 2] {
        Scenario::default().bs_position
    }
    pub fn irs_position() -> [f64; 2] {
        Scenario::default().irs_position
    }
    pub fn user_area_center() -> [f64; 2] {
        Scenario::default().user_area_center
    }
    pub fn user_area_radius() -> f64 {
        Scenario::default().user_area_radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepParameter {
    N,
    K,
    #[serde(rename = "eps_max")]
    EpsMax,
}

impl SweepParameter {
    pub fn name(self) -> &'static str {
        match self {
            SweepParameter::N => "N",
            SweepParameter::K => "K",
            SweepParameter::EpsMax => "eps_max",
        }
    }

    fn format(self, value: f64) -> String {
        match self {
            SweepParameter::EpsMax => format!("{value:e}"),
            _ => format!("{}", value as u64),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
    #[serde(default = "defaults_out::trials")]
    pub trials_csv: String,
    #[serde(default = "defaults_out::aggregate")]
    pub aggregate_csv: String,
    #[serde(default = "defaults_out::manifest")]
    pub manifest: String,
}

mod defaults_out {
    pub fn trials() -> String {
        "trials.csv".into()
    }
    pub fn aggregate() -> String {
        "aggregate.csv".into()
    }
    pub fn manifest() -> String {
        "manifest.json".into()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    pub trials: u64,
    pub schemes: Vec<SchemeId>,
    /// Fill the `wall_ms` column. Off by default so that reruns are
    /// byte-identical.
    #[serde(default)]
    pub record_wall_time: bool,
    pub scenario: ScenarioConfig,
    pub sweep: Option<SweepConfig>,
    #[serde(default)]
    pub controls: DriverControls,
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            ConfigError::Parse(msg) => ConfigError::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Sweep values, or the single base point when there is no sweep.
    pub fn points(&self) -> Vec<(SweepParameter, f64)> {
        match &self.sweep {
            Some(s) => s.values.iter().map(|&v| (s.parameter, v)).collect(),
            None => vec![(SweepParameter::N, self.scenario.elements as f64)],
        }
    }

    /// Scenario of one sweep point.
    pub fn scenario_at(&self, parameter: SweepParameter, value: f64) -> Result<Scenario, ConfigError> {
        let sc = &self.scenario;
        let mut users = sc.users;
        let mut elements = sc.elements;
        let mut eps_max = sc.eps_max;
        match parameter {
            SweepParameter::N => elements = integer("sweep.values", value, 0)?,
            SweepParameter::K => users = integer("sweep.values", value, 1)?,
            SweepParameter::EpsMax => eps_max = value,
        }
        let payload_bits = match &sc.payload_bits {
            Payload::Uniform(d) => vec![*d; users],
            Payload::PerUser(list) if list.len() == users => list.clone(),
            Payload::PerUser(list) => {
                return Err(invalid(
                    "scenario.payload_bits",
                    format!("{} entries for {users} users", list.len()),
                ))
            }
        };
        let scenario = Scenario {
            bs_position: sc.bs_position,
            irs_position: sc.irs_position,
            user_area_center: sc.user_area_center,
            user_area_radius: sc.user_area_radius,
            users,
            elements,
            tx_power_w: sc.tx_power.0,
            noise_power_w: sc.noise_power.0,
            payload_bits,
            eps_max,
            pathloss_exponents: sc.pathloss_exponents,
            pathloss_ref: sc.pathloss_ref.0,
            seed: self.seed,
        };
        scenario.validate().map_err(|e| invalid("scenario", e.to_string()))?;
        Ok(scenario)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.trials == 0 {
            return Err(invalid("trials", "must be at least 1"));
        }
        if self.schemes.is_empty() {
            return Err(invalid("schemes", "list at least one scheme"));
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return Err(invalid("sweep.values", "list at least one value"));
            }
        }
        let c = &self.controls;
        if !(c.sca.shrink > 0.0 && c.sca.shrink < 1.0) {
            return Err(invalid("controls.sca.shrink", "must lie in (0, 1)"));
        }
        if !(c.sca.min_radius_ratio > 0.0 && c.sca.min_radius_ratio < 1.0) {
            return Err(invalid("controls.sca.min_radius_ratio", "must lie in (0, 1)"));
        }
        if !(c.sca.mu_floor > 0.0) {
            return Err(invalid("controls.sca.mu_floor", "must be positive"));
        }
        if !(1e-10..=1e-4).contains(&c.sca.solver.tol) {
            return Err(invalid("controls.sca.solver.tol", "must lie in [1e-10, 1e-4]"));
        }
        for (parameter, value) in self.points() {
            let scenario = self.scenario_at(parameter, value)?;
            let exhaustive = self.schemes.iter().any(|s| s.kind == SchemeKind::Exhaustive);
            if exhaustive && scenario.users > c.exhaustive_cap {
                return Err(invalid(
                    "schemes",
                    format!("exhaustive search needs K <= {}, got {}", c.exhaustive_cap, scenario.users),
                ));
            }
        }
        Ok(())
    }
}

fn integer(field: &str, value: f64, min: u64) -> Result<usize, ConfigError> {
    if value.fract() != 0.0 || value < min as f64 || !value.is_finite() {
        return Err(invalid(field, format!("{value} is not an integer >= {min}")));
    }
    Ok(value as usize)
}

/// Records of one sweep point.
#[derive(Debug, Clone)]
pub struct PointResult {
    pub parameter: SweepParameter,
    pub value: f64,
    pub records: Vec<TrialRecord>,
    pub aggregates: Vec<Aggregate>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    /// Keep full solve results (SCA traces included) in the records.
    pub keep_results: bool,
}

/// Runs every sweep point in order. `progress` sees each point as it
/// finishes.
pub fn run_points<F>(cfg: &ExperimentConfig, options: RunOptions, mut progress: F) -> Result<Vec<PointResult>, RunError>
where
    F: FnMut(&PointResult),
{
    let mut out = Vec::new();
    for (parameter, value) in cfg.points() {
        let scenario = cfg.scenario_at(parameter, value)?;
        let (records, aggregates) = driver::monte_carlo(
            &scenario,
            &cfg.schemes,
            cfg.trials,
            &cfg.controls,
            BatchOptions {
                keep_results: options.keep_results,
            },
        )?;
        let point = PointResult {
            parameter,
            value,
            records,
            aggregates,
        };
        progress(&point);
        out.push(point);
    }
    Ok(out)
}

#[derive(Debug, Error)]
pub enum RunError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Driver(#[from] DriverError),
    #[error("cannot write {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub const TRIALS_HEADER: &str = "sweep_param,sweep_value,scheme,trial,total_latency,G,sca_iters,wall_ms";
pub const AGGREGATE_HEADER: &str = "sweep_param,sweep_value,scheme,trials,failed,mean,std,min,max";

fn opt<T: std::fmt::Display>(v: Option<T>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn trials_csv(points: &[PointResult], record_wall_time: bool) -> String {
    let mut s = String::from(TRIALS_HEADER);
    s.push('\n');
    for p in points {
        let value = p.parameter.format(p.value);
        for r in &p.records {
            let wall = if record_wall_time { format!("{:.3}", r.wall_ms) } else { String::new() };
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                p.parameter.name(),
                value,
                r.scheme,
                r.trial_index,
                opt(r.total_latency),
                opt(r.groups),
                opt(r.sca_iterations),
                wall
            );
        }
    }
    s
}

pub fn aggregate_csv(points: &[PointResult]) -> String {
    let mut s = String::from(AGGREGATE_HEADER);
    s.push('\n');
    let num = |x: f64| if x.is_finite() { x.to_string() } else { String::new() };
    for p in points {
        let value = p.parameter.format(p.value);
        for a in &p.aggregates {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                p.parameter.name(),
                value,
                a.scheme,
                a.trials,
                a.failed,
                num(a.mean),
                num(a.std),
                num(a.min),
                num(a.max)
            );
        }
    }
    s
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RunError> {
    let err = |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    };
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(err)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(err)?;
    tmp.write_all(bytes).map_err(err)?;
    tmp.as_file().sync_all().map_err(err)?;
    tmp.persist(path).map_err(|e| err(e.error))?;
    Ok(())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub artifact: String,
    pub version: String,
    pub seed: u64,
    pub config: ExperimentConfig,
    /// File name to hex SHA-256.
    pub files: std::collections::BTreeMap<String, String>,
    pub failed_trials: usize,
}

/// Paths written by [`write_outputs`].
#[derive(Debug, Clone)]
pub struct OutputFiles {
    pub trials: PathBuf,
    pub aggregate: PathBuf,
    pub manifest: PathBuf,
}

pub fn write_outputs(cfg: &ExperimentConfig, points: &[PointResult]) -> Result<OutputFiles, RunError> {
    let out = &cfg.output;
    let files = OutputFiles {
        trials: out.dir.join(&out.trials_csv),
        aggregate: out.dir.join(&out.aggregate_csv),
        manifest: out.dir.join(&out.manifest),
    };
    let trials = trials_csv(points, cfg.record_wall_time);
    let aggregate = aggregate_csv(points);
    write_atomic(&files.trials, trials.as_bytes())?;
    write_atomic(&files.aggregate, aggregate.as_bytes())?;
    let manifest = Manifest {
        artifact: "urllc".into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.seed,
        config: cfg.clone(),
        files: [
            (out.trials_csv.clone(), sha256_hex(trials.as_bytes())),
            (out.aggregate_csv.clone(), sha256_hex(aggregate.as_bytes())),
        ]
        .into_iter()
        .collect(),
        failed_trials: points.iter().flat_map(|p| &p.records).filter(|r| r.failed()).count(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes") + "\n";
    write_atomic(&files.manifest, json.as_bytes())?;
    Ok(files)
}
