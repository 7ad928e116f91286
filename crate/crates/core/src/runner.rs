//! Experiment configuration, seeded parallel sweeps over scheme × λ_max,
//! result persistence and plot-data projection.
//!
//! A sweep writes into `output_dir`:
//!
//! * `cells/<scheme>_lambda<λ>.csv` and `.hist.csv`: per-run metrics and the
//!   merged return histogram of one cell. These double as the resume cache;
//!   a cell whose files carry a matching `cell_hash` is not recomputed.
//! * `aggregate.csv`: mean and sample standard deviation across seeds of
//!   every [`RunMetrics`] field, one row per (scheme, λ_max).
//! * `runs.csv`: every run of every cell.
//! * `histograms/` and `traces/` when requested in `emit`.
//!
//! Every table starts with `# key=value` manifest lines. All files are written
//! to a temporary name and renamed into place.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ParamError, RunnerError, SimError};
use crate::metrics::{MetricsCollector, RunMetrics, RunSummary};
use crate::params::{Scheme, SimParams};
use crate::sim::{Simulation, StepReport};
use crate::stats::{self, Histogram};

pub const SCHEMA_VERSION: &str = "1";
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");
/// Environment variable consulted for the worker count when the config
/// leaves it unset.
pub const WORKERS_ENV: &str = "LEVSIM_WORKERS";
pub const SEED_RULE: &str = "seed = mix(master_seed ^ mix(run)); \
    unless common_random_numbers: seed = mix(seed ^ mix(mix(scheme_index) ^ bits(lambda_max))); \
    mix = splitmix64 finalizer";

/// Keys of [`ExperimentConfig`] that are not simulation parameters.
const EXPERIMENT_KEYS: [&str; 9] = [
    "lambda_max_grid",
    "schemes",
    "n_runs",
    "steps",
    "master_seed",
    "common_random_numbers",
    "output_dir",
    "emit",
    "workers",
];

/// Optional outputs of a sweep. Run-level (`runs.csv`) and aggregate
/// tables are always written; `runs` and `aggregate` are accepted for
/// explicitness.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Emit {
    /// Per-step trace of every run (large).
    Steps,
    Runs,
    Aggregate,
    Histogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub lambda_max_grid: Vec<f64>,
    #[serde(deserialize_with = "de_schemes")]
    pub schemes: Vec<Scheme>,
    /// Seeds per cell.
    pub n_runs: u32,
    /// Steps per run.
    pub steps: u64,
    pub master_seed: u64,
    /// Reuse the same seeds in every cell instead of hashing the cell into
    /// the seed.
    pub common_random_numbers: bool,
    pub output_dir: PathBuf,
    pub emit: Vec<Emit>,
    pub workers: Option<usize>,
    /// Base parameters; `scheme` and `lambda_max` are set per cell.
    pub params: SimParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            lambda_max_grid: (1..=20).map(f64::from).collect(),
            schemes: Scheme::ALL.to_vec(),
            n_runs: 20,
            steps: 50_000,
            master_seed: 1,
            common_random_numbers: false,
            output_dir: PathBuf::from("results"),
            emit: vec![Emit::Runs, Emit::Aggregate, Emit::Histogram],
            workers: None,
            params: SimParams::default(),
        }
    }
}

fn de_schemes<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Scheme>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        One(String),
        Many(Vec<String>),
    }
    let names = match Raw::deserialize(d)? {
        Raw::One(s) => s.split(',').map(str::to_string).collect(),
        Raw::Many(v) => v,
    };
    names
        .iter()
        .map(|s| s.parse().map_err(serde::de::Error::custom))
        .collect()
}

/// One point of the sweep grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cell {
    pub scheme: Scheme,
    pub lambda_max: f64,
}

impl Cell {
    /// File-name stem, e.g. `basle_lambda7.5`.
    pub fn key(&self) -> String {
        format!("{}_lambda{}", self.scheme, self.lambda_max)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed of one run; see [`SEED_RULE`].
pub fn derive_seed(master_seed: u64, run: u32, cell: Option<Cell>) -> u64 {
    let seed = splitmix64(master_seed ^ splitmix64(u64::from(run)));
    match cell {
        None => seed,
        Some(c) => {
            let key = splitmix64(c.scheme.index()) ^ c.lambda_max.to_bits();
            splitmix64(seed ^ splitmix64(key))
        }
    }
}

fn config_err(msg: impl Into<String>) -> RunnerError {
    RunnerError::Config(msg.into())
}

/// Parse a command-line override value as a TOML value, falling back to a
/// bare string.
fn parse_value(raw: &str) -> toml::Value {
    match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.to_string())),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

impl ExperimentConfig {
    /// Build a config from TOML text plus `key=value` overrides. Simulation
    /// parameters may be given at top level (`rho = 0.98`) or under
    /// `params` (`params.rho = 0.98`).
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, RunnerError> {
        let root: toml::Table = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        let mut top = toml::Table::new();
        let mut params = toml::Table::new();
        let mut put = |key: &str, value: toml::Value| -> Result<(), RunnerError> {
            if let Some(field) = key.strip_prefix("params.") {
                params.insert(field.to_string(), value);
            } else if key == "params" {
                match value {
                    toml::Value::Table(t) => params.extend(t),
                    _ => return Err(config_err("`params` must be a table")),
                }
            } else if EXPERIMENT_KEYS.contains(&key) {
                top.insert(key.to_string(), value);
            } else {
                params.insert(key.to_string(), value);
            }
            Ok(())
        };
        for (k, v) in root {
            put(&k, v)?;
        }
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| config_err(format!("override `{o}` is not key=value")))?;
            put(k.trim(), parse_value(v.trim()))?;
        }
        top.insert("params".into(), toml::Value::Table(params));
        let cfg: Self = toml::Value::Table(top)
            .try_into()
            .map_err(|e: toml::de::Error| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Load from an optional file with overrides applied on top.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, RunnerError> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| RunnerError::io(p, e))?,
            None => String::new(),
        };
        Self::from_toml_str(&text, overrides).map_err(|e| match (e, path) {
            (RunnerError::Config(m), Some(p)) => RunnerError::Config(format!("{}: {m}", p.display())),
            (e, _) => e,
        })
    }

    pub fn validate(&self) -> Result<(), RunnerError> {
        if self.lambda_max_grid.is_empty() {
            return Err(config_err("lambda_max_grid is empty"));
        }
        for (i, &l) in self.lambda_max_grid.iter().enumerate() {
            if !(l.is_finite() && l >= 1.0) {
                return Err(config_err(format!("lambda_max_grid entry {l} must be finite and >= 1")));
            }
            if self.lambda_max_grid[..i].contains(&l) {
                return Err(config_err(format!("lambda_max_grid repeats {l}")));
            }
        }
        if self.schemes.is_empty() {
            return Err(config_err("schemes is empty"));
        }
        for (i, s) in self.schemes.iter().enumerate() {
            if self.schemes[..i].contains(s) {
                return Err(config_err(format!("schemes repeats {s}")));
            }
        }
        if self.n_runs == 0 {
            return Err(config_err("n_runs must be at least 1"));
        }
        if self.steps < self.params.tau as u64 + 2 {
            return Err(config_err(format!("steps must be at least tau + 2 = {}", self.params.tau + 2)));
        }
        if self.workers == Some(0) {
            return Err(config_err("workers must be at least 1"));
        }
        self.params.validate()?;
        for cell in self.cells() {
            self.cell_params(cell).validate()?;
        }
        Ok(())
    }

    /// Normalised TOML form of the config.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    /// Cells in scheme-major order.
    pub fn cells(&self) -> Vec<Cell> {
        self.schemes
            .iter()
            .flat_map(|&scheme| {
                self.lambda_max_grid
                    .iter()
                    .map(move |&lambda_max| Cell { scheme, lambda_max })
            })
            .collect()
    }

    pub fn cell_params(&self, cell: Cell) -> SimParams {
        self.params.with_scheme(cell.scheme, cell.lambda_max)
    }

    pub fn seed_for(&self, cell: Cell, run: u32) -> u64 {
        let key = (!self.common_random_numbers).then_some(cell);
        derive_seed(self.master_seed, run, key)
    }

    fn emits(&self, e: Emit) -> bool {
        self.emit.contains(&e)
    }

    /// SHA-256 over everything that influences results.
    pub fn config_hash(&self) -> String {
        #[derive(Serialize)]
        struct Hashed<'a> {
            schema: &'a str,
            lambda_max_grid: &'a [f64],
            schemes: &'a [Scheme],
            n_runs: u32,
            steps: u64,
            master_seed: u64,
            common_random_numbers: bool,
            params: &'a SimParams,
        }
        hash_toml(&Hashed {
            schema: SCHEMA_VERSION,
            lambda_max_grid: &self.lambda_max_grid,
            schemes: &self.schemes,
            n_runs: self.n_runs,
            steps: self.steps,
            master_seed: self.master_seed,
            common_random_numbers: self.common_random_numbers,
            params: &self.params,
        })
    }

    fn cell_hash(&self, cell: Cell) -> String {
        #[derive(Serialize)]
        struct Hashed {
            schema: &'static str,
            code_version: &'static str,
            steps: u64,
            seeds: Vec<u64>,
            params: SimParams,
        }
        hash_toml(&Hashed {
            schema: SCHEMA_VERSION,
            code_version: CODE_VERSION,
            steps: self.steps,
            seeds: (0..self.n_runs).map(|r| self.seed_for(cell, r)).collect(),
            params: self.cell_params(cell),
        })
    }

    /// Worker count from the config, else [`WORKERS_ENV`], else the number
    /// of available CPUs.
    pub fn resolve_workers(&self) -> Result<usize, RunnerError> {
        if let Some(w) = self.workers {
            return Ok(w);
        }
        match std::env::var(WORKERS_ENV) {
            Ok(v) => match v.trim().parse::<usize>() {
                Ok(n) if n > 0 => Ok(n),
                _ => Err(config_err(format!("{WORKERS_ENV}={v} is not a positive integer"))),
            },
            Err(_) => Ok(std::thread::available_parallelism().map_or(1, |n| n.get())),
        }
    }
}

fn hash_toml<T: Serialize>(value: &T) -> String {
    let text = toml::to_string(value).expect("hash input is always serialisable");
    let digest = Sha256::digest(text.as_bytes());
    digest.iter().fold(String::with_capacity(64), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Result of one simulation run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub summary: RunSummary,
    pub trace: Option<Vec<StepReport>>,
}

/// Simulate `steps` steps of one market and compute its metrics.
pub fn run_simulation(params: &SimParams, steps: u64, seed: u64, trace: bool) -> Result<RunOutput, SimError> {
    let mut sim = Simulation::new(params.clone(), seed)?;
    let mut collector = MetricsCollector::new(params);
    let mut reports = trace.then(|| Vec::with_capacity(steps as usize));
    for _ in 0..steps {
        let r = sim.step()?;
        collector.observe(&r);
        if let Some(v) = reports.as_mut() {
            v.push(r);
        }
    }
    Ok(RunOutput {
        summary: collector.finish(),
        trace: reports,
    })
}

/// Atomically replace `path` with `contents`.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), RunnerError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(|e| RunnerError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| RunnerError::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), RunnerError> {
    fs::create_dir_all(path).map_err(|e| RunnerError::io(path, e))
}

fn manifest_text(entries: &[(&str, String)]) -> String {
    entries.iter().map(|(k, v)| format!("# {k}={v}\n")).collect()
}

fn csv_bytes(header: &[String], rows: &[Vec<String>]) -> Vec<u8> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for r in rows {
        w.write_record(r).expect("in-memory write");
    }
    w.into_inner().expect("in-memory flush")
}

struct ParsedCsv {
    manifest: Vec<(String, String)>,
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl ParsedCsv {
    fn read(path: &Path) -> Result<Self, RunnerError> {
        let text = fs::read_to_string(path).map_err(|e| RunnerError::io(path, e))?;
        Self::parse(&text, path)
    }

    fn parse(text: &str, path: &Path) -> Result<Self, RunnerError> {
        let bad = |reason: String| RunnerError::Table { path: path.to_path_buf(), reason };
        let manifest = text
            .lines()
            .take_while(|l| l.starts_with('#'))
            .filter_map(|l| l[1..].trim().split_once('='))
            .map(|(k, v)| (k.trim().to_string(), v.trim().to_string()))
            .collect();
        let mut r = csv::ReaderBuilder::new()
            .comment(Some(b'#'))
            .from_reader(text.as_bytes());
        let header = r
            .headers()
            .map_err(|e| bad(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(str::to_string).collect()))
            .collect::<Result<_, _>>()
            .map_err(|e| bad(e.to_string()))?;
        Ok(Self { manifest, header, rows })
    }

    fn manifest(&self, key: &str) -> Option<&str> {
        self.manifest.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn column(&self, name: &str, path: &Path) -> Result<usize, RunnerError> {
        self.header.iter().position(|h| h == name).ok_or_else(|| RunnerError::Table {
            path: path.to_path_buf(),
            reason: format!("missing column `{name}`"),
        })
    }
}

fn parse_num<T: FromStr>(s: &str, path: &Path) -> Result<T, RunnerError> {
    s.trim().parse().map_err(|_| RunnerError::Table {
        path: path.to_path_buf(),
        reason: format!("cannot parse `{s}` as a number"),
    })
}

fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

/// Outcome of one run inside a sweep.
#[derive(Debug, Clone, PartialEq)]
pub enum RunStatus {
    Ok(RunMetrics),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub run: u32,
    pub seed: u64,
    pub status: RunStatus,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub cell: Cell,
    pub runs: Vec<RunRecord>,
    /// Return histograms of the successful runs merged onto one grid.
    pub histogram: Histogram,
    /// Loaded from an existing cell file rather than computed.
    pub resumed: bool,
}

impl CellResult {
    fn metrics(&self) -> Vec<&RunMetrics> {
        self.runs
            .iter()
            .filter_map(|r| match &r.status {
                RunStatus::Ok(m) => Some(m),
                RunStatus::Failed(_) => None,
            })
            .collect()
    }

    pub fn failures(&self) -> impl Iterator<Item = (&RunRecord, &str)> {
        self.runs.iter().filter_map(|r| match &r.status {
            RunStatus::Failed(msg) => Some((r, msg.as_str())),
            RunStatus::Ok(_) => None,
        })
    }

    pub fn aggregate(&self) -> AggregateRow {
        let ms = self.metrics();
        let n = RunMetrics::FIELDS.len();
        let mut mean = vec![0.0; n];
        let mut std = vec![0.0; n];
        for j in 0..n {
            let col: Vec<f64> = ms.iter().map(|m| m.values()[j]).collect();
            mean[j] = stats::mean(&col);
            std[j] = stats::sample_std(&col);
        }
        AggregateRow {
            scheme: self.cell.scheme,
            lambda_max: self.cell.lambda_max,
            n_runs: ms.len() as u32,
            n_failed: (self.runs.len() - ms.len()) as u32,
            mean: RunMetrics::from_values(&mean).expect("field count"),
            std: RunMetrics::from_values(&std).expect("field count"),
        }
    }
}

fn run_header() -> Vec<String> {
    ["run", "seed", "status", "error"]
        .iter()
        .map(|s| s.to_string())
        .chain(RunMetrics::FIELDS.iter().map(|s| s.to_string()))
        .collect()
}

fn run_row(r: &RunRecord) -> Vec<String> {
    let mut row = vec![r.run.to_string(), r.seed.to_string()];
    match &r.status {
        RunStatus::Ok(m) => {
            row.push("ok".into());
            row.push(String::new());
            row.extend(m.values().iter().map(|&v| fmt_f64(v)));
        }
        RunStatus::Failed(msg) => {
            row.push("failed".into());
            row.push(msg.clone());
            row.extend(RunMetrics::FIELDS.iter().map(|_| String::new()));
        }
    }
    row
}

fn histogram_bytes(h: &Histogram, manifest: &str) -> Vec<u8> {
    let header: Vec<String> = ["bin", "lo", "hi", "center", "count", "mass"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let w = h.bin_width();
    let rows: Vec<Vec<String>> = h
        .counts
        .iter()
        .zip(h.mass())
        .enumerate()
        .map(|(i, (&c, m))| {
            vec![
                i.to_string(),
                fmt_f64(h.lo + i as f64 * w),
                fmt_f64(h.lo + (i + 1) as f64 * w),
                fmt_f64(h.bin_center(i)),
                c.to_string(),
                fmt_f64(m),
            ]
        })
        .collect();
    let mut out = manifest.as_bytes().to_vec();
    out.extend(csv_bytes(&header, &rows));
    out
}

/// Read a histogram file written by a sweep.
pub fn read_histogram(path: &Path) -> Result<Histogram, RunnerError> {
    let t = ParsedCsv::read(path)?;
    let (lo_c, hi_c, count_c) = (t.column("lo", path)?, t.column("hi", path)?, t.column("count", path)?);
    let counts = t
        .rows
        .iter()
        .map(|r| parse_num::<u64>(&r[count_c], path))
        .collect::<Result<Vec<_>, _>>()?;
    let (lo, hi) = match (t.rows.first(), t.rows.last()) {
        (Some(first), Some(last)) => (parse_num(&first[lo_c], path)?, parse_num(&last[hi_c], path)?),
        _ => (0.0, 0.0),
    };
    Ok(Histogram { lo, hi, counts })
}

fn load_cell(dir: &Path, cell: Cell, hash: &str) -> Option<CellResult> {
    let runs_path = dir.join(format!("{}.csv", cell.key()));
    let hist_path = dir.join(format!("{}.hist.csv", cell.key()));
    let t = ParsedCsv::read(&runs_path).ok()?;
    if t.manifest("cell_hash") != Some(hash) {
        return None;
    }
    let h = ParsedCsv::read(&hist_path).ok()?;
    if h.manifest("cell_hash") != Some(hash) {
        return None;
    }
    let histogram = read_histogram(&hist_path).ok()?;
    let nf = RunMetrics::FIELDS.len();
    let runs = t
        .rows
        .iter()
        .map(|r| {
            if r.len() != 4 + nf {
                return None;
            }
            let status = match r[2].as_str() {
                "ok" => {
                    let v: Vec<f64> = r[4..].iter().map(|s| s.parse().ok()).collect::<Option<_>>()?;
                    RunStatus::Ok(RunMetrics::from_values(&v)?)
                }
                "failed" => RunStatus::Failed(r[3].clone()),
                _ => return None,
            };
            Some(RunRecord {
                run: r[0].parse().ok()?,
                seed: r[1].parse().ok()?,
                status,
            })
        })
        .collect::<Option<Vec<_>>>()?;
    Some(CellResult { cell, runs, histogram, resumed: true })
}

fn save_cell(dir: &Path, result: &CellResult, hash: &str) -> Result<(), RunnerError> {
    let manifest = manifest_text(&[
        ("schema", SCHEMA_VERSION.to_string()),
        ("cell_hash", hash.to_string()),
        ("scheme", result.cell.scheme.to_string()),
        ("lambda_max", fmt_f64(result.cell.lambda_max)),
    ]);
    let hist_path = dir.join(format!("{}.hist.csv", result.cell.key()));
    write_atomic(&hist_path, &histogram_bytes(&result.histogram, &manifest))?;
    let rows: Vec<Vec<String>> = result.runs.iter().map(run_row).collect();
    let mut out = manifest.into_bytes();
    out.extend(csv_bytes(&run_header(), &rows));
    write_atomic(&dir.join(format!("{}.csv", result.cell.key())), &out)
}

/// Write a per-step trace as CSV.
pub fn write_trace(path: &Path, reports: &[StepReport]) -> Result<(), RunnerError> {
    let funds = reports.first().map_or(0, |r| r.funds.len());
    let mut header: Vec<String> = [
        "t",
        "price",
        "log_return",
        "mispricing",
        "sigma",
        "lambda_adapt",
        "xi",
        "clearing_residual",
        "defaults",
        "bank_loss",
        "unpaid_premium",
        "shares_traded",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for h in 0..funds {
        header.extend([format!("wealth_{h}"), format!("shares_{h}"), format!("leverage_{h}")]);
    }
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![
                r.t.to_string(),
                fmt_f64(r.price),
                fmt_f64(r.log_return),
                fmt_f64(r.mispricing),
                fmt_f64(r.sigma),
                fmt_f64(r.lambda_adapt),
                fmt_f64(r.xi),
                fmt_f64(r.clearing_residual),
                r.defaults_this_step.to_string(),
                fmt_f64(r.bank_loss_this_step),
                fmt_f64(r.unpaid_premium_this_step),
                fmt_f64(r.shares_traded),
            ];
            for f in &r.funds {
                row.extend([fmt_f64(f.wealth), fmt_f64(f.shares), fmt_f64(f.leverage)]);
            }
            row
        })
        .collect();
    write_atomic(path, &csv_bytes(&header, &rows))
}

fn run_cell(config: &ExperimentConfig, cell: Cell, dirs: &Dirs) -> Result<CellResult, RunnerError> {
    let params = config.cell_params(cell);
    let want_trace = config.emits(Emit::Steps);
    let outcomes = (0..config.n_runs)
        .into_par_iter()
        .map(|run| {
            let seed = config.seed_for(cell, run);
            match run_simulation(&params, config.steps, seed, want_trace) {
                Ok(out) => {
                    if let Some(trace) = &out.trace {
                        let path = dirs.traces.join(format!("{}_run{run}.csv", cell.key()));
                        write_trace(&path, trace)?;
                    }
                    let rec = RunRecord { run, seed, status: RunStatus::Ok(out.summary.metrics) };
                    Ok((rec, Some(out.summary.histogram)))
                }
                Err(e) => Ok((RunRecord { run, seed, status: RunStatus::Failed(e.to_string()) }, None)),
            }
        })
        .collect::<Result<Vec<_>, RunnerError>>()?;
    let hists: Vec<Histogram> = outcomes.iter().filter_map(|(_, h)| h.clone()).collect();
    Ok(CellResult {
        cell,
        runs: outcomes.into_iter().map(|(r, _)| r).collect(),
        histogram: Histogram::merge(&hists, Histogram::DEFAULT_BINS),
        resumed: false,
    })
}

struct Dirs {
    cells: PathBuf,
    traces: PathBuf,
    histograms: PathBuf,
}

/// Everything a finished sweep produced.
#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub table: AggregateTable,
    pub cells: Vec<CellResult>,
    pub aggregate_path: PathBuf,
}

impl SweepOutcome {
    pub fn failed_runs(&self) -> usize {
        self.cells.iter().map(|c| c.failures().count()).sum()
    }

    pub fn all_succeeded(&self) -> bool {
        self.failed_runs() == 0
    }
}

/// Run every (scheme, λ_max) cell, reusing finished cells from an earlier
/// sweep with the same settings, then write the aggregate table.
///
/// Failed runs are recorded and the sweep continues; only I/O and config
/// errors abort.
pub fn sweep(config: &ExperimentConfig) -> Result<SweepOutcome, RunnerError> {
    config.validate()?;
    let out = &config.output_dir;
    let dirs = Dirs {
        cells: out.join("cells"),
        traces: out.join("traces"),
        histograms: out.join("histograms"),
    };
    create_dir(&dirs.cells)?;
    if config.emits(Emit::Steps) {
        create_dir(&dirs.traces)?;
    }
    if config.emits(Emit::Histogram) {
        create_dir(&dirs.histograms)?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.resolve_workers()?)
        .build()
        .map_err(|e| config_err(format!("cannot start worker pool: {e}")))?;

    let cells = pool.install(|| {
        config
            .cells()
            .into_par_iter()
            .map(|cell| {
                let hash = config.cell_hash(cell);
                if let Some(done) = load_cell(&dirs.cells, cell, &hash) {
                    return Ok(done);
                }
                let result = run_cell(config, cell, &dirs)?;
                save_cell(&dirs.cells, &result, &hash)?;
                Ok(result)
            })
            .collect::<Result<Vec<_>, RunnerError>>()
    })?;

    let table = AggregateTable {
        manifest: vec![
            ("schema".into(), SCHEMA_VERSION.into()),
            ("config_hash".into(), config.config_hash()),
            ("seed_rule".into(), SEED_RULE.into()),
            ("common_random_numbers".into(), config.common_random_numbers.to_string()),
            ("code_version".into(), CODE_VERSION.into()),
            ("n_runs".into(), config.n_runs.to_string()),
            ("steps".into(), config.steps.to_string()),
        ],
        rows: cells.iter().map(CellResult::aggregate).collect(),
    };
    let aggregate_path = out.join("aggregate.csv");
    table.write(&aggregate_path)?;
    {
        let mut header = vec!["scheme".to_string(), "lambda_max".to_string()];
        header.extend(run_header());
        let rows: Vec<Vec<String>> = cells
            .iter()
            .flat_map(|c| {
                c.runs.iter().map(move |r| {
                    let mut row = vec![c.cell.scheme.to_string(), fmt_f64(c.cell.lambda_max)];
                    row.extend(run_row(r));
                    row
                })
            })
            .collect();
        let mut bytes = manifest_text(&table.manifest_refs()).into_bytes();
        bytes.extend(csv_bytes(&header, &rows));
        write_atomic(&out.join("runs.csv"), &bytes)?;
    }
    if config.emits(Emit::Histogram) {
        for c in &cells {
            let manifest = manifest_text(&[
                ("schema", SCHEMA_VERSION.to_string()),
                ("scheme", c.cell.scheme.to_string()),
                ("lambda_max", fmt_f64(c.cell.lambda_max)),
            ]);
            let path = dirs.histograms.join(format!("{}.csv", c.cell.key()));
            write_atomic(&path, &histogram_bytes(&c.histogram, &manifest))?;
        }
    }
    Ok(SweepOutcome { table, cells, aggregate_path })
}

/// Across-seed summary of one cell.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregateRow {
    pub scheme: Scheme,
    pub lambda_max: f64,
    /// Successful runs entering the statistics.
    pub n_runs: u32,
    pub n_failed: u32,
    pub mean: RunMetrics,
    /// Sample standard deviation across seeds.
    pub std: RunMetrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateTable {
    pub manifest: Vec<(String, String)>,
    pub rows: Vec<AggregateRow>,
}

impl AggregateTable {
    fn manifest_refs(&self) -> Vec<(&str, String)> {
        self.manifest.iter().map(|(k, v)| (k.as_str(), v.clone())).collect()
    }

    pub fn header() -> Vec<String> {
        let mut h: Vec<String> = ["scheme", "lambda_max", "n_runs", "n_failed"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for f in RunMetrics::FIELDS {
            h.push(format!("{f}_mean"));
            h.push(format!("{f}_std"));
        }
        h
    }

    pub fn to_csv(&self) -> Vec<u8> {
        let rows: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut row = vec![
                    r.scheme.to_string(),
                    fmt_f64(r.lambda_max),
                    r.n_runs.to_string(),
                    r.n_failed.to_string(),
                ];
                for (m, s) in r.mean.values().iter().zip(r.std.values()) {
                    row.push(fmt_f64(*m));
                    row.push(fmt_f64(s));
                }
                row
            })
            .collect();
        let mut out = manifest_text(&self.manifest_refs()).into_bytes();
        out.extend(csv_bytes(&Self::header(), &rows));
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), RunnerError> {
        write_atomic(path, &self.to_csv())
    }

    pub fn read(path: &Path) -> Result<Self, RunnerError> {
        let t = ParsedCsv::read(path)?;
        let expected = Self::header();
        if t.header != expected {
            return Err(RunnerError::Table {
                path: path.to_path_buf(),
                reason: "unexpected columns".into(),
            });
        }
        if t.manifest("schema") != Some(SCHEMA_VERSION) {
            return Err(RunnerError::Table {
                path: path.to_path_buf(),
                reason: format!("unsupported schema (expected {SCHEMA_VERSION})"),
            });
        }
        let rows = t
            .rows
            .iter()
            .map(|r| {
                let scheme = r[0].parse::<Scheme>().map_err(|e: ParamError| RunnerError::Table {
                    path: path.to_path_buf(),
                    reason: e.to_string(),
                })?;
                let nums = r[4..]
                    .iter()
                    .map(|s| parse_num::<f64>(s, path))
                    .collect::<Result<Vec<_>, _>>()?;
                let means: Vec<f64> = nums.iter().step_by(2).copied().collect();
                let stds: Vec<f64> = nums.iter().skip(1).step_by(2).copied().collect();
                Ok(AggregateRow {
                    scheme,
                    lambda_max: parse_num(&r[1], path)?,
                    n_runs: parse_num(&r[2], path)?,
                    n_failed: parse_num(&r[3], path)?,
                    mean: RunMetrics::from_values(&means).expect("header checked"),
                    std: RunMetrics::from_values(&stds).expect("header checked"),
                })
            })
            .collect::<Result<Vec<_>, RunnerError>>()?;
        Ok(Self { manifest: t.manifest, rows })
    }

    pub fn row(&self, scheme: Scheme, lambda_max: f64) -> Option<&AggregateRow> {
        self.rows
            .iter()
            .find(|r| r.scheme == scheme && r.lambda_max == lambda_max)
    }

    /// Schemes present, in canonical order.
    pub fn schemes(&self) -> Vec<Scheme> {
        Scheme::ALL
            .into_iter()
            .filter(|s| self.rows.iter().any(|r| r.scheme == *s))
            .collect()
    }

    /// Sorted distinct λ_max values.
    pub fn lambdas(&self) -> Vec<f64> {
        let mut l: Vec<f64> = self.rows.iter().map(|r| r.lambda_max).collect();
        l.sort_by(f64::total_cmp);
        l.dedup();
        l
    }

    /// `(λ_max, mean, std)` of one field for one scheme, ascending in λ_max.
    pub fn series(&self, scheme: Scheme, field: &str) -> Vec<(f64, f64, f64)> {
        let mut s: Vec<(f64, f64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.scheme == scheme)
            .filter_map(|r| Some((r.lambda_max, r.mean.field(field)?, r.std.field(field)?)))
            .collect();
        s.sort_by(|a, b| a.0.total_cmp(&b.0));
        s
    }
}

/// Figure projections available from an aggregate table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlotKind {
    Volatility,
    Volume,
    Leverage,
    Interest,
    Default,
    Returns,
    ReturnsLifetime,
    Profit,
    BankLosses,
    ReturnDist,
}

impl PlotKind {
    pub const ALL: [PlotKind; 10] = [
        PlotKind::Volatility,
        PlotKind::Volume,
        PlotKind::Leverage,
        PlotKind::Interest,
        PlotKind::Default,
        PlotKind::Returns,
        PlotKind::ReturnsLifetime,
        PlotKind::Profit,
        PlotKind::BankLosses,
        PlotKind::ReturnDist,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            PlotKind::Volatility => "volatility",
            PlotKind::Volume => "volume",
            PlotKind::Leverage => "leverage",
            PlotKind::Interest => "interest",
            PlotKind::Default => "default",
            PlotKind::Returns => "returns",
            PlotKind::ReturnsLifetime => "returns_lifetime",
            PlotKind::Profit => "profit",
            PlotKind::BankLosses => "bank_losses",
            PlotKind::ReturnDist => "return_dist",
        }
    }

    /// Metric plotted against λ_max; `None` for the distribution plot.
    pub fn field(self) -> Option<&'static str> {
        Some(match self {
            PlotKind::Volatility => "volatility_index",
            PlotKind::Volume => "avg_volume",
            PlotKind::Leverage => "avg_leverage",
            PlotKind::Interest => "effective_interest_annual",
            PlotKind::Default => "default_prob_annual_top",
            PlotKind::Returns => "r_adj_annual_top",
            PlotKind::ReturnsLifetime => "r_adj_lifetime_top",
            PlotKind::Profit => "manager_profit_top",
            PlotKind::BankLosses => "bank_losses_annual",
            PlotKind::ReturnDist => return None,
        })
    }
}

impl FromStr for PlotKind {
    type Err = RunnerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm: String = s
            .chars()
            .filter(|c| !matches!(c, '_' | '-'))
            .collect::<String>()
            .to_ascii_lowercase();
        PlotKind::ALL
            .into_iter()
            .find(|k| k.as_str().replace('_', "") == norm)
            .ok_or_else(|| RunnerError::UnknownPlotKind {
                kind: s.to_string(),
                valid: PlotKind::ALL.map(PlotKind::as_str).join(", "),
            })
    }
}

/// Write the data files behind one figure panel into `out_dir`.
///
/// Series kinds produce `<kind>.csv` with columns `lambda_max` and
/// `<scheme>_mean`, `<scheme>_std` per scheme. `return_dist` reads the
/// `histograms/` directory next to the table and writes one
/// `return_dist_<scheme>_lambda<λ>.csv` per scheme with the bin centers and
/// normalised masses at `dist_lambda`.
pub fn emit_plot_data(
    table_path: &Path,
    out_dir: &Path,
    kind: PlotKind,
    dist_lambda: f64,
) -> Result<Vec<PathBuf>, RunnerError> {
    let table = AggregateTable::read(table_path)?;
    create_dir(out_dir)?;
    let manifest = {
        let mut m = table.manifest.clone();
        m.push(("kind".into(), kind.as_str().into()));
        m
    };
    let manifest_refs: Vec<(&str, String)> = manifest.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    let schemes = table.schemes();

    let Some(field) = kind.field() else {
        let hist_dir = table_path
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("histograms");
        let mut written = Vec::new();
        for scheme in schemes {
            let cell = Cell { scheme, lambda_max: dist_lambda };
            let h = read_histogram(&hist_dir.join(format!("{}.csv", cell.key())))?;
            let rows: Vec<Vec<String>> = h
                .mass()
                .iter()
                .enumerate()
                .map(|(i, m)| vec![fmt_f64(h.bin_center(i)), fmt_f64(*m)])
                .collect();
            let mut bytes = manifest_text(&manifest_refs).into_bytes();
            bytes.extend(csv_bytes(&["log_return".to_string(), "mass".to_string()], &rows));
            let path = out_dir.join(format!("return_dist_{}.csv", cell.key()));
            write_atomic(&path, &bytes)?;
            written.push(path);
        }
        return Ok(written);
    };

    let mut header = vec!["lambda_max".to_string()];
    for s in &schemes {
        header.push(format!("{s}_mean"));
        header.push(format!("{s}_std"));
    }
    let rows: Vec<Vec<String>> = table
        .lambdas()
        .into_iter()
        .map(|l| {
            let mut row = vec![fmt_f64(l)];
            for &s in &schemes {
                match table.row(s, l) {
                    Some(r) => {
                        row.push(fmt_f64(r.mean.field(field).expect("known field")));
                        row.push(fmt_f64(r.std.field(field).expect("known field")));
                    }
                    None => row.extend([String::new(), String::new()]),
                }
            }
            row
        })
        .collect();
    let mut bytes = manifest_text(&manifest_refs).into_bytes();
    bytes.extend(csv_bytes(&header, &rows));
    let path = out_dir.join(format!("{}.csv", kind.as_str()));
    write_atomic(&path, &bytes)?;
    Ok(vec![path])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn flat_and_nested_keys_and_overrides() {
        let text = "rho = 0.98\nn_runs = 3\n[params]\ntau = 12\n";
        let cfg = ExperimentConfig::from_toml_str(
            text,
            &[
                "params.theta=3.0".into(),
                "schemes=basle,hedge".into(),
                "lambda_max_grid=[1, 2.5]".into(),
                "short_selling=false".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.params.rho, 0.98);
        assert_eq!(cfg.params.tau, 12);
        assert_eq!(cfg.params.theta, 3.0);
        assert!(!cfg.params.short_selling);
        assert_eq!(cfg.n_runs, 3);
        assert_eq!(cfg.schemes, vec![Scheme::Basle, Scheme::PerfectHedge]);
        assert_eq!(cfg.lambda_max_grid, vec![1.0, 2.5]);
        let again = ExperimentConfig::from_toml_str(&cfg.to_toml(), &[]).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        for bad in [
            "lambda_max_grid = []",
            "schemes = []",
            "n_runs = 0",
            "steps = 5",
            "lambda_max_grid = [0.5]",
            "no_such_key = 1",
            "workers = 0",
            "schemes = [\"basle\", \"basle\"]",
        ] {
            assert!(ExperimentConfig::from_toml_str(bad, &[]).is_err(), "{bad}");
        }
    }

    #[test]
    fn seeds_depend_on_cell_unless_common() {
        let mut cfg = ExperimentConfig::default();
        let a = Cell { scheme: Scheme::Basle, lambda_max: 2.0 };
        let b = Cell { scheme: Scheme::Basle, lambda_max: 3.0 };
        let c = Cell { scheme: Scheme::Unregulated, lambda_max: 2.0 };
        assert_ne!(cfg.seed_for(a, 0), cfg.seed_for(b, 0));
        assert_ne!(cfg.seed_for(a, 0), cfg.seed_for(c, 0));
        assert_ne!(cfg.seed_for(a, 0), cfg.seed_for(a, 1));
        cfg.common_random_numbers = true;
        assert_eq!(cfg.seed_for(a, 4), cfg.seed_for(c, 4));
    }

    #[test]
    fn config_hash_ignores_output_settings() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            output_dir: "elsewhere".into(),
            workers: Some(3),
            ..a.clone()
        };
        assert_eq!(a.config_hash(), b.config_hash());
        let c = ExperimentConfig { master_seed: 2, ..a.clone() };
        assert_ne!(a.config_hash(), c.config_hash());
    }

    #[test]
    fn plot_kind_parsing() {
        assert_eq!("returnDist".parse::<PlotKind>().unwrap(), PlotKind::ReturnDist);
        assert_eq!("bank-losses".parse::<PlotKind>().unwrap(), PlotKind::BankLosses);
        let err = "vix".parse::<PlotKind>().unwrap_err().to_string();
        assert!(err.contains("volatility") && err.contains("return_dist"), "{err}");
    }

    #[test]
    fn same_seed_same_metrics() {
        let p = SimParams::default().with_scheme(Scheme::PerfectHedge, 6.0);
        let a = run_simulation(&p, 400, 5, false).unwrap();
        let b = run_simulation(&p, 400, 5, false).unwrap();
        assert_eq!(a.summary.metrics, b.summary.metrics);
        let bits = |m: &RunMetrics| m.values().map(f64::to_bits);
        assert_eq!(bits(&a.summary.metrics), bits(&b.summary.metrics));
    }
}
