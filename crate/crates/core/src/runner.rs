//! Run configuration, benchmark presets, run orchestration with on-disk
//! artifacts, and run comparison.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::diagnostics::{read_timeseries, smoothed_cloud, wigner, wigner_grid, write_timeseries, DiagnosticsRecord, Waterfall};
use crate::dynamics::{propagate, MethodKind, PropagationSettings, Regularization, Trajectory};
use crate::ensemble::ParticleEnsemble;
use crate::error::{Error, Result};
use crate::models::HybridHamiltonian;
use crate::par::with_workers;
use crate::regularization::{Axis, GridParams, KernelSpec, QuadratureGrid};
use crate::sampling::{init_ensemble, sigma_q_from_momentum, InitSpec, InitialSpinor};
use crate::soft::{init_wavepacket, observables, SoftPropagator, SpatialGrid1D, WavepacketState, EDGE_FRACTION};

/// Either a particle method or the wavefunction reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Particle(MethodKind),
    Soft,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Particle(k) => k.name(),
            Method::Soft => "soft",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "soft" {
            return Ok(Method::Soft);
        }
        s.parse::<MethodKind>()
            .map(Method::Particle)
            .map_err(|_| Error::InvalidInput(format!("unknown method '{s}' (koopmon, ehrenfest, bohmion, soft)")))
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SoftConfig {
    pub r_min: f64,
    pub r_max: f64,
    pub n_points: usize,
    pub dt: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitConfig {
    pub mu_q: f64,
    pub mu_p: f64,
    pub sigma_q: f64,
    pub rho0: InitialSpinor,
    pub sobol_skip: usize,
}

/// A fully resolved and validated run description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Option<String>,
    pub model: String,
    pub model_params: BTreeMap<String, f64>,
    pub method: Method,
    pub n: usize,
    pub alpha: f64,
    pub grid: GridParams,
    pub dt: f64,
    pub t_final: f64,
    pub snapshot_times: Vec<f64>,
    pub drift_tolerance: f64,
    pub init: InitConfig,
    pub soft: SoftConfig,
    /// Visualization kernel width for smoothed densities.
    pub delta: f64,
    /// Nodes per axis of snapshot phase-space fields.
    pub phase_nodes: usize,
    /// Number of evenly spaced waterfall rows besides the snapshots.
    pub waterfall_frames: usize,
    pub output_dir: PathBuf,
    pub workers: Option<usize>,
}

impl RunConfig {
    pub fn hamiltonian(&self) -> Result<HybridHamiltonian> {
        HybridHamiltonian::by_name(&self.model, &self.model_params)
    }

    pub fn regularization(&self) -> Result<Regularization> {
        Ok(Regularization { kernel: KernelSpec::new(self.alpha)?, grid: self.grid })
    }

    pub fn init_spec(&self) -> InitSpec {
        InitSpec {
            mu_q: self.init.mu_q,
            mu_p: self.init.mu_p,
            sigma_q: self.init.sigma_q,
            rho0: self.init.rho0,
            n: self.n,
            sobol_skip: self.init.sobol_skip,
        }
    }

    pub fn propagation(&self) -> PropagationSettings {
        PropagationSettings {
            dt: self.dt,
            t_final: self.t_final,
            snapshot_times: self.snapshot_times.clone(),
            drift_tolerance: self.drift_tolerance,
        }
    }
}

/// A built-in benchmark setup.
#[derive(Debug, Clone, PartialEq)]
pub struct Preset {
    pub name: &'static str,
    pub description: &'static str,
    pub model: &'static str,
    pub n: usize,
    pub alpha: f64,
    pub dt: f64,
    pub t_final: f64,
    pub snapshot_times: &'static [f64],
    pub mu_q: f64,
    pub mu_p: f64,
    pub sigma_q: f64,
    pub rho0: InitialSpinor,
    pub soft: SoftConfig,
}

const TULLY_SOFT: SoftConfig = SoftConfig { r_min: -30.0, r_max: 40.0, n_points: 4096, dt: 1.0 };
const TULLY3_SOFT: SoftConfig = SoftConfig { r_min: -80.0, r_max: 60.0, n_points: 8192, dt: 1.0 };
const RABI_SOFT: SoftConfig = SoftConfig { r_min: -15.0, r_max: 15.0, n_points: 2048, dt: 0.01 };

pub fn presets() -> Vec<Preset> {
    let tully = |name, description, model, t_final, snapshot_times, mu_q, mu_p, rho0, soft| Preset {
        name,
        description,
        model,
        n: 1000,
        alpha: 0.325,
        dt: 2.0,
        t_final,
        snapshot_times,
        mu_q,
        mu_p,
        sigma_q: sigma_q_from_momentum(mu_p),
        rho0,
        soft,
    };
    let rabi = |name, description, model, t_final, snapshot_times, mu_p| Preset {
        name,
        description,
        model,
        n: 500,
        alpha: 0.5,
        dt: 0.05,
        t_final,
        snapshot_times,
        mu_q: 0.0,
        mu_p,
        sigma_q: std::f64::consts::FRAC_1_SQRT_2,
        rho0: InitialSpinor::Plus,
        soft: RABI_SOFT,
    };
    vec![
        tully(
            "tully1",
            "single avoided crossing, ground state wavepacket from (-8, 10)",
            "tully1",
            3000.0,
            &[0.0, 1280.0, 2130.0, 3000.0],
            -8.0,
            10.0,
            InitialSpinor::Ground,
            TULLY_SOFT,
        ),
        tully(
            "tully2",
            "dual avoided crossing, ground state wavepacket from (-8, 16)",
            "tully2",
            2000.0,
            &[0.0, 860.0, 1140.0, 2000.0],
            -8.0,
            16.0,
            InitialSpinor::Ground,
            TULLY_SOFT,
        ),
        tully(
            "tully3",
            "extended coupling with reflection, adiabatic ground state wavepacket from (-15, 20)",
            "tully3",
            4000.0,
            &[0.0, 1500.0, 2000.0, 3500.0],
            -15.0,
            20.0,
            InitialSpinor::Excited,
            TULLY3_SOFT,
        ),
        rabi("rabi_us", "Rabi ultrastrong coupling, |+> spin, wavepacket from (0, 4)", "rabi_us", 25.0, &[0.0, 10.5, 17.5, 25.0], 4.0),
        rabi("rabi_ds", "Rabi deep strong coupling, |+> spin, wavepacket at rest at the origin", "rabi_ds", 15.0, &[0.0, 4.0, 6.0, 8.0, 15.0], 0.0),
    ]
}

pub fn preset(name: &str) -> Result<Preset> {
    presets().into_iter().find(|p| p.name == name).ok_or_else(|| {
        let names: Vec<&str> = presets().iter().map(|p| p.name).collect();
        Error::InvalidInput(format!("unknown preset '{name}' (expected one of {})", names.join(", ")))
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGrid {
    #[serde(skip_serializing_if = "Option::is_none")]
    n_q: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    j_q: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    j_p: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInit {
    #[serde(skip_serializing_if = "Option::is_none")]
    mu_q: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    mu_p: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma_q: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sigma_q_from_momentum: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    rho0: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    sobol_skip: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSoft {
    #[serde(skip_serializing_if = "Option::is_none")]
    r_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    r_max: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n_points: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dt: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    preset: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    model: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    method: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    dt: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    t_final: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    snapshot_times: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    drift_tolerance: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    delta: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    phase_nodes: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    waterfall_frames: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    output_dir: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    workers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    model_params: Option<BTreeMap<String, f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    grid: Option<RawGrid>,
    #[serde(skip_serializing_if = "Option::is_none")]
    init: Option<RawInit>,
    #[serde(skip_serializing_if = "Option::is_none")]
    soft: Option<RawSoft>,
}

impl From<&Preset> for RawConfig {
    fn from(p: &Preset) -> Self {
        RawConfig {
            preset: Some(p.name.to_string()),
            model: Some(p.model.to_string()),
            n: Some(p.n),
            alpha: Some(p.alpha),
            dt: Some(p.dt),
            t_final: Some(p.t_final),
            snapshot_times: Some(p.snapshot_times.to_vec()),
            init: Some(RawInit {
                mu_q: Some(p.mu_q),
                mu_p: Some(p.mu_p),
                sigma_q: Some(p.sigma_q),
                rho0: Some(p.rho0.name().to_string()),
                ..Default::default()
            }),
            soft: Some(RawSoft {
                r_min: Some(p.soft.r_min),
                r_max: Some(p.soft.r_max),
                n_points: Some(p.soft.n_points),
                dt: Some(p.soft.dt),
            }),
            ..Default::default()
        }
    }
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

fn to_table(raw: &RawConfig) -> toml::Table {
    match toml::Value::try_from(raw) {
        Ok(toml::Value::Table(t)) => t,
        _ => toml::Table::new(),
    }
}

/// Command-line adjustments applied on top of a configuration file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub preset: Option<String>,
    pub method: Option<String>,
    /// `key=value` pairs; dotted keys address sections (`init.mu_p=12`).
    pub set: Vec<String>,
    pub output_dir: Option<PathBuf>,
    pub workers: Option<usize>,
}

fn set_value(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::ConfigValidation { keys: vec![format!("--set {assignment} (expected key=value)")] })?;
    let key = key.trim();
    let value = value.trim();
    let parsed: toml::Value = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => return Err(Error::ConfigValidation { keys: vec![key.to_string()] }),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Parses configuration text (file contents) with overrides. `path` is only
/// used in error messages.
pub fn parse_config(text: &str, path: &Path, overrides: &Overrides) -> Result<RunConfig> {
    let file: RawConfig = toml::from_str(text).map_err(|e| Error::ConfigParse {
        path: path.to_path_buf(),
        line: e.span().map_or(0, |s| line_of(text, s.start)),
        message: e.message().to_string(),
    })?;
    let preset_name = overrides.preset.clone().or_else(|| file.preset.clone());
    let mut table = match &preset_name {
        Some(name) => to_table(&RawConfig::from(&preset(name).map_err(|_| Error::ConfigValidation { keys: vec![format!("preset ({name})")] })?)),
        None => toml::Table::new(),
    };
    merge(&mut table, to_table(&file));
    for s in &overrides.set {
        set_value(&mut table, s)?;
    }
    if let Some(m) = &overrides.method {
        table.insert("method".into(), toml::Value::String(m.clone()));
    }
    if let Some(d) = &overrides.output_dir {
        table.insert("output_dir".into(), toml::Value::String(d.display().to_string()));
    }
    if let Some(w) = overrides.workers {
        table.insert("workers".into(), toml::Value::Integer(w as i64));
    }
    if let Some(name) = &preset_name {
        table.insert("preset".into(), toml::Value::String(name.clone()));
    }
    let raw: RawConfig = toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::ConfigParse {
        path: PathBuf::from("<command line>"),
        line: 0,
        message: e.message().to_string(),
    })?;
    resolve(raw)
}

pub fn load_config(path: &Path, overrides: &Overrides) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    parse_config(&text, path, overrides)
}

/// Configuration from a preset and overrides alone.
pub fn preset_config(overrides: &Overrides) -> Result<RunConfig> {
    parse_config("", Path::new("<preset>"), overrides)
}

fn resolve(raw: RawConfig) -> Result<RunConfig> {
    let mut bad: Vec<String> = Vec::new();
    let mut need = |name: &str, present: bool| {
        if !present {
            bad.push(format!("{name} (missing)"));
        }
    };
    need("model", raw.model.is_some());
    need("method", raw.method.is_some());
    need("n", raw.n.is_some());
    need("alpha", raw.alpha.is_some());
    need("dt", raw.dt.is_some());
    need("t_final", raw.t_final.is_some());
    let init = raw.init.clone().unwrap_or_default();
    need("init.mu_q", init.mu_q.is_some());
    need("init.mu_p", init.mu_p.is_some());
    need("init.sigma_q", init.sigma_q.is_some() || init.sigma_q_from_momentum == Some(true));
    need("init.rho0", init.rho0.is_some());

    let method = raw.method.as_deref().map(Method::from_str);
    if let Some(Err(_)) = &method {
        bad.push(format!("method ({})", raw.method.as_deref().unwrap_or("")));
    }
    let rho0 = init.rho0.as_deref().map(InitialSpinor::from_str);
    if let Some(Err(_)) = &rho0 {
        bad.push(format!("init.rho0 ({})", init.rho0.as_deref().unwrap_or("")));
    }
    let mut positive = |name: &str, v: Option<f64>| {
        if let Some(x) = v {
            if !(x > 0.0 && x.is_finite()) {
                bad.push(format!("{name} (must be positive, got {x})"));
            }
        }
    };
    positive("alpha", raw.alpha);
    positive("dt", raw.dt);
    positive("drift_tolerance", raw.drift_tolerance);
    positive("delta", raw.delta);
    positive("init.sigma_q", init.sigma_q);
    let soft = raw.soft.clone().unwrap_or_default();
    positive("soft.dt", soft.dt);
    if raw.n == Some(0) {
        bad.push("n (must be at least 1)".into());
    }
    if let Some(t) = raw.t_final {
        if !(t >= 0.0 && t.is_finite()) {
            bad.push(format!("t_final (must be non-negative, got {t})"));
        }
    }
    if init.sobol_skip == Some(0) {
        bad.push("init.sobol_skip (must be at least 1)".into());
    }
    if let Some(np) = soft.n_points {
        if np < 2 || !np.is_power_of_two() {
            bad.push(format!("soft.n_points (must be a power of two, got {np})"));
        }
    }
    if let (Some(a), Some(b)) = (soft.r_min, soft.r_max) {
        if !(b > a) {
            bad.push("soft.r_max (must exceed soft.r_min)".into());
        }
    }
    let grid_raw = raw.grid.clone().unwrap_or_default();
    let grid = GridParams {
        n_q: grid_raw.n_q.unwrap_or(2.0),
        n_p: grid_raw.n_p.unwrap_or(2.0),
        j_q: grid_raw.j_q.unwrap_or(2),
        j_p: grid_raw.j_p.unwrap_or(2),
    };
    if grid.validate().is_err() {
        bad.push("grid (n_q, n_p ≥ 0 and j_q, j_p ≥ 1)".into());
    }
    let model_params = raw.model_params.clone().unwrap_or_default();
    if let Some(m) = &raw.model {
        if HybridHamiltonian::by_name(m, &model_params).is_err() {
            bad.push(format!("model ({m})"));
        }
    }
    let snapshot_times = raw.snapshot_times.clone().unwrap_or_default();
    if let Some(tf) = raw.t_final {
        for &t in &snapshot_times {
            if !(t >= 0.0 && t <= tf + 1e-9) {
                bad.push(format!("snapshot_times ({t} outside [0, {tf}])"));
            }
        }
    }
    if raw.phase_nodes.is_some_and(|n| n < 2) {
        bad.push("phase_nodes (must be at least 2)".into());
    }
    if !bad.is_empty() {
        return Err(Error::ConfigValidation { keys: bad });
    }

    let mu_p = init.mu_p.unwrap_or_default();
    let sigma_q = match (init.sigma_q_from_momentum, init.sigma_q) {
        (Some(true), _) => sigma_q_from_momentum(mu_p),
        (_, Some(s)) => s,
        _ => unreachable!("checked above"),
    };
    if !(sigma_q > 0.0 && sigma_q.is_finite()) {
        return Err(Error::ConfigValidation { keys: vec!["init.sigma_q_from_momentum (needs non-zero init.mu_p)".into()] });
    }
    let model = raw.model.unwrap_or_default();
    let default_soft = if model.starts_with("tully3") {
        TULLY3_SOFT
    } else if model.starts_with("tully") {
        TULLY_SOFT
    } else {
        RABI_SOFT
    };
    Ok(RunConfig {
        preset: raw.preset,
        model_params,
        method: method.and_then(|m| m.ok()).unwrap_or(Method::Soft),
        n: raw.n.unwrap_or_default(),
        alpha: raw.alpha.unwrap_or_default(),
        grid,
        dt: raw.dt.unwrap_or_default(),
        t_final: raw.t_final.unwrap_or_default(),
        snapshot_times,
        drift_tolerance: raw.drift_tolerance.unwrap_or(1e-2),
        init: InitConfig {
            mu_q: init.mu_q.unwrap_or_default(),
            mu_p,
            sigma_q,
            rho0: rho0.and_then(|r| r.ok()).unwrap_or(InitialSpinor::Ground),
            sobol_skip: init.sobol_skip.unwrap_or(1),
        },
        soft: SoftConfig {
            r_min: soft.r_min.unwrap_or(default_soft.r_min),
            r_max: soft.r_max.unwrap_or(default_soft.r_max),
            n_points: soft.n_points.unwrap_or(default_soft.n_points),
            dt: soft.dt.unwrap_or(default_soft.dt),
        },
        delta: raw.delta.unwrap_or(0.25),
        phase_nodes: raw.phase_nodes.unwrap_or(256),
        waterfall_frames: raw.waterfall_frames.unwrap_or(50),
        output_dir: raw.output_dir.unwrap_or_else(|| PathBuf::from(format!("runs/{model}"))),
        workers: raw.workers,
        model,
    })
}

/// Machine-readable end-of-run numbers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub model: String,
    pub method: Method,
    pub completed: bool,
    pub steps: usize,
    pub t_reached: f64,
    pub final_p1: f64,
    pub final_p2: f64,
    pub final_purity: f64,
    pub min_purity: f64,
    pub energy0: f64,
    pub max_energy_drift: f64,
    pub drift_within_tolerance: bool,
    /// Wavefunction runs only.
    pub max_norm_drift: Option<f64>,
    pub max_edge_mass: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub config: RunConfig,
    pub version: String,
    pub workers: usize,
    pub wall_time_s: f64,
    pub status: String,
    pub partial: bool,
    pub error: Option<String>,
    pub files: Vec<String>,
}

#[derive(Debug)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub summary: RunSummary,
    pub records: Vec<DiagnosticsRecord>,
}

fn time_label(t: f64) -> String {
    let s = format!("{t}");
    s.replace('.', "p")
}

struct Artifacts {
    dir: PathBuf,
    files: Vec<String>,
}

impl Artifacts {
    fn create(&mut self, rel: &str) -> Result<BufWriter<File>> {
        let path = self.dir.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        self.files.push(rel.to_string());
        Ok(BufWriter::new(File::create(path)?))
    }
}

fn summarize(config: &RunConfig, records: &[DiagnosticsRecord], completed: bool) -> RunSummary {
    let last = records.last().copied().unwrap_or(DiagnosticsRecord {
        t: 0.0,
        p1: f64::NAN,
        p2: f64::NAN,
        purity: f64::NAN,
        bloch: [f64::NAN; 3],
        energy: f64::NAN,
        energy_drift_rel: f64::NAN,
    });
    let max_drift = records.iter().map(|r| r.energy_drift_rel).fold(0.0, f64::max);
    RunSummary {
        model: config.model.clone(),
        method: config.method,
        completed,
        steps: records.len().saturating_sub(1),
        t_reached: last.t,
        final_p1: last.p1,
        final_p2: last.p2,
        final_purity: last.purity,
        min_purity: records.iter().map(|r| r.purity).fold(f64::INFINITY, f64::min),
        energy0: records.first().map_or(f64::NAN, |r| r.energy),
        max_energy_drift: max_drift,
        drift_within_tolerance: max_drift < config.drift_tolerance,
        max_norm_drift: None,
        max_edge_mass: None,
    }
}

fn phase_box(q: &[f64], p: &[f64], pad: f64, nodes: usize) -> QuadratureGrid {
    let range = |xs: &[f64]| xs.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &x| (a.min(x), b.max(x)));
    let (qlo, qhi) = range(q);
    let (plo, phi) = range(p);
    let axis = |lo: f64, hi: f64| {
        let (lo, hi) = (lo - pad, hi + pad);
        Axis { min: lo, step: (hi - lo) / (nodes - 1) as f64, len: nodes }
    };
    QuadratureGrid { q: axis(qlo, qhi), p: axis(plo, phi) }
}

fn waterfall_times(config: &RunConfig) -> Vec<f64> {
    let k = config.waterfall_frames;
    if k == 0 {
        return Vec::new();
    }
    (0..=k).map(|i| config.t_final * i as f64 / k as f64).collect()
}

fn waterfall_axis(config: &RunConfig) -> Axis {
    Axis { min: config.soft.r_min, step: (config.soft.r_max - config.soft.r_min) / 1023.0, len: 1024 }
}

fn write_particle_outputs(config: &RunConfig, traj: &Trajectory, art: &mut Artifacts) -> Result<()> {
    write_timeseries(&traj.records, art.create("timeseries.csv")?)?;
    let mut frames = Vec::new();
    for snap in &traj.snapshots {
        if config.snapshot_times.contains(&snap.requested) {
            let label = time_label(snap.requested);
            snap.state.write_snapshot(art.create(&format!("snapshots/ensemble_t{label}.csv"))?)?;
            let grid = phase_box(&snap.state.q, &snap.state.p, 4.0 * config.delta, config.phase_nodes);
            smoothed_cloud(&snap.state, config.delta, &grid, snap.t)?.write(art.create(&format!("snapshots/smoothed_t{label}.csv"))?)?;
        }
        if !frames.iter().any(|(t, _): &(f64, &ParticleEnsemble)| *t == snap.t) {
            frames.push((snap.t, &snap.state));
        }
    }
    frames.sort_by(|a, b| a.0.total_cmp(&b.0));
    if !frames.is_empty() {
        Waterfall::from_particles(frames, config.delta, &waterfall_axis(config))?.write(art.create("waterfall.csv")?)?;
    }
    traj.final_state.write_snapshot(art.create("snapshots/final_ensemble.csv")?)?;
    Ok(())
}

fn run_particles(config: &RunConfig, kind: MethodKind, art: &mut Artifacts) -> Result<(RunSummary, Vec<DiagnosticsRecord>, Option<Error>)> {
    let h = config.hamiltonian()?;
    let reg = config.regularization()?;
    let e0 = init_ensemble(&config.init_spec())?;
    let mut settings = config.propagation();
    for t in waterfall_times(config) {
        if !settings.snapshot_times.contains(&t) {
            settings.snapshot_times.push(t);
        }
    }
    let (traj, err) = match propagate(kind, &e0, &h, &reg, &settings) {
        Ok(t) => (t, None),
        Err(p) => (p.trajectory, Some(p.error)),
    };
    write_particle_outputs(config, &traj, art)?;
    let summary = summarize(config, &traj.records, err.is_none());
    Ok((summary, traj.records, err))
}

/// Phase-space window holding the wavefunction: positions and momenta where
/// the densities exceed `1e-10` of their maxima, padded by four widths.
fn soft_phase_grid(state: &WavepacketState, init: &InitConfig, nodes: usize) -> Result<QuadratureGrid> {
    let g = &state.grid;
    let rho = state.position_density();
    let max = rho.iter().cloned().fold(0.0, f64::max);
    let idx: Vec<usize> = (0..g.n_points).filter(|&j| rho[j] > 1e-10 * max).collect();
    let (qlo, qhi) = (g.r(idx[0]), g.r(*idx.last().unwrap_or(&0)));
    let mut planner = rustfft::FftPlanner::new();
    let fft = planner.plan_fft_forward(g.n_points);
    let mut mom = vec![0.0; g.n_points];
    for comp in [&state.psi1, &state.psi2] {
        let mut buf = comp.clone();
        fft.process(&mut buf);
        for (m, c) in mom.iter_mut().zip(&buf) {
            *m += c.norm_sqr();
        }
    }
    let mmax = mom.iter().cloned().fold(0.0, f64::max);
    let ks: Vec<f64> = (0..g.n_points).filter(|&j| mom[j] > 1e-10 * mmax).map(|j| g.k(j)).collect();
    let plo = ks.iter().cloned().fold(f64::INFINITY, f64::min);
    let phi = ks.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sp = 0.5 / init.sigma_q;
    wigner_grid(state, qlo - 4.0 * init.sigma_q, qhi + 4.0 * init.sigma_q, nodes, plo - 4.0 * sp, phi + 4.0 * sp, nodes)
}

fn run_soft(config: &RunConfig, art: &mut Artifacts) -> Result<(RunSummary, Vec<DiagnosticsRecord>, Option<Error>)> {
    let h = config.hamiltonian()?;
    let grid = SpatialGrid1D::new(config.soft.r_min, config.soft.r_max, config.soft.n_points)?;
    let (mut state, mut max_edge) = init_wavepacket(&grid, config.init.mu_q, config.init.mu_p, config.init.sigma_q, config.init.rho0.vector())?;
    let prop = SoftPropagator::new(&grid, &h, config.soft.dt)?;
    let settings = PropagationSettings {
        dt: config.soft.dt,
        t_final: config.t_final,
        snapshot_times: config.snapshot_times.clone(),
        drift_tolerance: config.drift_tolerance,
    };
    let steps = settings.steps();
    let mut snap_steps: Vec<(usize, f64)> = config.snapshot_times.iter().map(|&t| (settings.snapshot_step(t), t)).collect();
    let wf_steps: Vec<usize> = waterfall_times(config).iter().map(|&t| settings.snapshot_step(t)).collect();
    snap_steps.sort_by_key(|s| s.0);

    let o0 = observables(&state, &h);
    let energy0 = o0.energy;
    let norm0 = o0.norm;
    let mut records = vec![DiagnosticsRecord::from_soft(&o0, energy0)];
    let mut max_norm_drift: f64 = 0.0;
    let mut frames: Vec<WavepacketState> = Vec::new();
    let mut err = None;
    for step in 0..=steps {
        if step > 0 {
            prop.step(&mut state)?;
            state.t = step as f64 * config.soft.dt;
            let o = observables(&state, &h);
            max_norm_drift = max_norm_drift.max((o.norm - norm0).abs());
            max_edge = max_edge.max(state.edge_mass(EDGE_FRACTION));
            let rec = DiagnosticsRecord::from_soft(&o, energy0);
            records.push(rec);
            if !rec.energy.is_finite() || !o.norm.is_finite() {
                err = Some(Error::NonFinite { what: "wavefunction" });
                break;
            }
        }
        for &(_, t) in snap_steps.iter().filter(|(s, _)| *s == step) {
            let label = time_label(t);
            state.write_csv(art.create(&format!("snapshots/wavefunction_t{label}.csv"))?)?;
            let pg = soft_phase_grid(&state, &config.init, config.phase_nodes)?;
            wigner(&state, &pg)?.write(art.create(&format!("snapshots/wigner_t{label}.csv"))?)?;
        }
        if wf_steps.contains(&step) || snap_steps.iter().any(|(s, _)| *s == step) {
            frames.push(state.clone());
        }
    }
    write_timeseries(&records, art.create("timeseries.csv")?)?;
    if !frames.is_empty() {
        Waterfall::from_wavefunctions(&frames)?.write(art.create("waterfall.csv")?)?;
    }
    let mut summary = summarize(config, &records, err.is_none());
    summary.max_norm_drift = Some(max_norm_drift);
    summary.max_edge_mass = Some(max_edge);
    Ok((summary, records, err))
}

/// Runs the configured experiment and writes every artifact into
/// `config.output_dir`. Solver failures still leave the partial outputs and a
/// manifest flagged as partial, then return the error.
pub fn run(config: &RunConfig) -> Result<RunOutcome> {
    let started = Instant::now();
    fs::create_dir_all(&config.output_dir)?;
    let mut art = Artifacts { dir: config.output_dir.clone(), files: Vec::new() };
    let (result, workers) = with_workers(config.workers, || {
        let r = match config.method {
            Method::Particle(kind) => run_particles(config, kind, &mut art),
            Method::Soft => run_soft(config, &mut art),
        };
        (r, crate::par::current_workers())
    });
    let (summary, records, err) = match result {
        Ok(x) => x,
        Err(e) => {
            let summary = summarize(config, &[], false);
            (summary, Vec::new(), Some(e))
        }
    };
    serde_json::to_writer_pretty(art.create("summary.json")?, &summary)?;
    art.files.push("manifest.json".into());
    let manifest = Manifest {
        config: config.clone(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        workers,
        wall_time_s: started.elapsed().as_secs_f64(),
        status: if err.is_none() { "ok".into() } else { "failed".into() },
        partial: err.is_some(),
        error: err.as_ref().map(|e| e.to_string()),
        files: art.files.clone(),
    };
    let mut f = BufWriter::new(File::create(config.output_dir.join("manifest.json"))?);
    serde_json::to_writer_pretty(&mut f, &manifest)?;
    f.flush()?;
    match err {
        Some(e) => Err(e),
        None => Ok(RunOutcome { dir: config.output_dir.clone(), summary, records }),
    }
}

/// A completed run loaded back from disk.
#[derive(Debug, Clone)]
pub struct LoadedRun {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub records: Vec<DiagnosticsRecord>,
    pub final_ensemble: Option<ParticleEnsemble>,
}

pub fn load_run(dir: &Path) -> Result<LoadedRun> {
    let manifest: Manifest = serde_json::from_reader(BufReader::new(File::open(dir.join("manifest.json"))?))?;
    let records = read_timeseries(BufReader::new(File::open(dir.join("timeseries.csv"))?))?;
    let fe = dir.join("snapshots/final_ensemble.csv");
    let final_ensemble = if fe.exists() { Some(ParticleEnsemble::read_snapshot(BufReader::new(File::open(fe)?))?) } else { None };
    Ok(LoadedRun { dir: dir.to_path_buf(), manifest, records, final_ensemble })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalRow {
    pub run: String,
    pub method: Method,
    pub t: f64,
    pub p1: f64,
    pub purity: f64,
    pub max_drift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairDelta {
    pub a: String,
    pub b: String,
    /// Number of time points present in both series.
    pub aligned: usize,
    pub max_dp1: f64,
    pub max_dpurity: f64,
    pub final_dp1: f64,
    pub final_dpurity: f64,
    /// Per-particle final-state differences when both runs carry ensembles of equal size.
    pub max_dq: Option<f64>,
    pub max_dp: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub model: String,
    pub finals: Vec<FinalRow>,
    /// Every run against the first one.
    pub deltas: Vec<PairDelta>,
}

impl fmt::Display for ComparisonReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "model {}", self.model)?;
        writeln!(f, "{:<40} {:>10} {:>10} {:>12} {:>12} {:>12}", "run", "method", "t", "P1", "purity", "max drift")?;
        for r in &self.finals {
            writeln!(f, "{:<40} {:>10} {:>10.4} {:>12.6} {:>12.6} {:>12.3e}", r.run, r.method.name(), r.t, r.p1, r.purity, r.max_drift)?;
        }
        for d in &self.deltas {
            write!(
                f,
                "{} vs {}: {} aligned points, max |dP1| {:.3e}, max |dpurity| {:.3e}, final |dP1| {:.3e}, final |dpurity| {:.3e}",
                d.b, d.a, d.aligned, d.max_dp1, d.max_dpurity, d.final_dp1, d.final_dpurity
            )?;
            if let (Some(q), Some(p)) = (d.max_dq, d.max_dp) {
                write!(f, ", max |dq| {q:.3e}, max |dp| {p:.3e}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

fn aligned_deltas(a: &[DiagnosticsRecord], b: &[DiagnosticsRecord]) -> (usize, f64, f64) {
    let mut j = 0;
    let (mut n, mut dp1, mut dpur) = (0, 0.0f64, 0.0f64);
    for ra in a {
        let tol = 1e-9 * ra.t.abs().max(1.0);
        while j < b.len() && b[j].t < ra.t - tol {
            j += 1;
        }
        if j < b.len() && (b[j].t - ra.t).abs() <= tol {
            n += 1;
            dp1 = dp1.max((ra.p1 - b[j].p1).abs());
            dpur = dpur.max((ra.purity - b[j].purity).abs());
        }
    }
    (n, dp1, dpur)
}

pub fn compare_runs(runs: &[LoadedRun]) -> Result<ComparisonReport> {
    if runs.len() < 2 {
        return Err(Error::InvalidInput("compare needs at least two runs".into()));
    }
    let model = &runs[0].manifest.config.model;
    let params = &runs[0].manifest.config.model_params;
    for r in &runs[1..] {
        if &r.manifest.config.model != model || &r.manifest.config.model_params != params {
            return Err(Error::Incompatible(format!(
                "{} uses model {} but {} uses {}",
                runs[0].dir.display(),
                model,
                r.dir.display(),
                r.manifest.config.model
            )));
        }
    }
    let finals = runs
        .iter()
        .map(|r| {
            let last = r.records.last();
            FinalRow {
                run: r.dir.display().to_string(),
                method: r.manifest.config.method,
                t: last.map_or(f64::NAN, |x| x.t),
                p1: last.map_or(f64::NAN, |x| x.p1),
                purity: last.map_or(f64::NAN, |x| x.purity),
                max_drift: r.records.iter().map(|x| x.energy_drift_rel).fold(0.0, f64::max),
            }
        })
        .collect();
    let base = &runs[0];
    let deltas = runs[1..]
        .iter()
        .map(|r| {
            let (aligned, max_dp1, max_dpurity) = aligned_deltas(&base.records, &r.records);
            let (fa, fb) = (base.records.last(), r.records.last());
            let (final_dp1, final_dpurity) = match (fa, fb) {
                (Some(x), Some(y)) => ((x.p1 - y.p1).abs(), (x.purity - y.purity).abs()),
                _ => (f64::NAN, f64::NAN),
            };
            let (max_dq, max_dp) = match (&base.final_ensemble, &r.final_ensemble) {
                (Some(x), Some(y)) if x.len() == y.len() => {
                    let dq = x.q.iter().zip(&y.q).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    let dp = x.p.iter().zip(&y.p).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                    (Some(dq), Some(dp))
                }
                _ => (None, None),
            };
            PairDelta {
                a: base.dir.display().to_string(),
                b: r.dir.display().to_string(),
                aligned,
                max_dp1,
                max_dpurity,
                final_dp1,
                final_dpurity,
                max_dq,
                max_dp,
            }
        })
        .collect();
    Ok(ComparisonReport { model: model.clone(), finals, deltas })
}

pub fn compare(dirs: &[PathBuf]) -> Result<ComparisonReport> {
    let runs = dirs.iter().map(|d| load_run(d)).collect::<Result<Vec<_>>>()?;
    compare_runs(&runs)
}
