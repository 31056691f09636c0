//! Experiment runner: flat `key=value` configuration, a registry mapping each
//! experiment id to the module operation that owns it, and bit-stable result
//! files (CSV or JSON lines).
//!
//! A run produces a [`ResultRecord`]. Its deterministic part (config echo,
//! metrics, table) is what [`emit_results`] writes; wall-clock time goes to a
//! separate timing sidecar so that reruns with the same seed give identical bytes.

use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Instant;

use anyhow::{anyhow, Context};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use thiserror::Error;

use crate::estimates_lab::{
    bilinear_decay_experiment, frequency_envelope, lateral_strichartz_norm, lwp_convergence_experiment, mixed_norm,
    rough_datum, strichartz_admissible, strichartz_norm, BackgroundSpec, MixedNormSpec, DEFAULT_ENVELOPE_DELTA,
};
use crate::evolution::{
    conserved_quantities, gbo_solve, linear_propagate, linearized_solve, scaling_check, CosineField, EvolutionConfig,
    TransportSymbol, ZeroCoefficient,
};
use crate::gauge::{apply_exp_gauge, build_gauge, gauge_kernel};
use crate::normal_forms::{nf_cancellation_check, residual_scaling_test, NormalFormCorrection, ResidualOptions, SymbolId};
use crate::spectral_core::{chi_block, lp_project, make_grid, Field, Grid, Projection, C64};
use crate::wavepacket::{
    coherent_state, dispersive_decay_experiment, eikonal_solve, fbi_inverse, fbi_transform, flow_jacobian,
    hamilton_flow, hamilton_flow_between, packet_coherence_check, CoefficientSpec, PhasePoint, RescaledSymbol,
    DECAY_HORIZON,
};

/// Version of the record layout written by [`emit_results`].
pub const SCHEMA_VERSION: u32 = 1;

/// Every experiment the runner knows about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ExperimentId {
    Solve,
    Linearized,
    Conserve,
    Scaling,
    GaugeKernel,
    NfCancel,
    NfResidual,
    Hamilton,
    Eikonal,
    Fbi,
    Packet,
    DispersiveDecay,
    Strichartz,
    Bilinear,
    Envelope,
    LwpConverge,
}

impl ExperimentId {
    pub const ALL: [ExperimentId; 16] = [
        ExperimentId::Solve,
        ExperimentId::Linearized,
        ExperimentId::Conserve,
        ExperimentId::Scaling,
        ExperimentId::GaugeKernel,
        ExperimentId::NfCancel,
        ExperimentId::NfResidual,
        ExperimentId::Hamilton,
        ExperimentId::Eikonal,
        ExperimentId::Fbi,
        ExperimentId::Packet,
        ExperimentId::DispersiveDecay,
        ExperimentId::Strichartz,
        ExperimentId::Bilinear,
        ExperimentId::Envelope,
        ExperimentId::LwpConverge,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentId::Solve => "solve",
            ExperimentId::Linearized => "linearized",
            ExperimentId::Conserve => "conserve",
            ExperimentId::Scaling => "scaling",
            ExperimentId::GaugeKernel => "gauge-kernel",
            ExperimentId::NfCancel => "nf-cancel",
            ExperimentId::NfResidual => "nf-residual",
            ExperimentId::Hamilton => "hamilton",
            ExperimentId::Eikonal => "eikonal",
            ExperimentId::Fbi => "fbi",
            ExperimentId::Packet => "packet",
            ExperimentId::DispersiveDecay => "dispersive-decay",
            ExperimentId::Strichartz => "strichartz",
            ExperimentId::Bilinear => "bilinear",
            ExperimentId::Envelope => "envelope",
            ExperimentId::LwpConverge => "lwp-converge",
        }
    }

    /// `(module, operation)` that performs the experiment.
    pub fn owner(self) -> (&'static str, &'static str) {
        match self {
            ExperimentId::Solve => ("evolution", "gbo_solve"),
            ExperimentId::Linearized => ("evolution", "linearized_solve"),
            ExperimentId::Conserve => ("evolution", "conserved_quantities"),
            ExperimentId::Scaling => ("evolution", "scaling_check"),
            ExperimentId::GaugeKernel => ("gauge", "gauge_kernel"),
            ExperimentId::NfCancel => ("normal_forms", "nf_cancellation_check"),
            ExperimentId::NfResidual => ("normal_forms", "residual_scaling_test"),
            ExperimentId::Hamilton => ("wavepacket", "hamilton_flow"),
            ExperimentId::Eikonal => ("wavepacket", "eikonal_solve"),
            ExperimentId::Fbi => ("wavepacket", "fbi_transform"),
            ExperimentId::Packet => ("wavepacket", "packet_coherence_check"),
            ExperimentId::DispersiveDecay => ("wavepacket", "dispersive_decay_experiment"),
            ExperimentId::Strichartz => ("estimates_lab", "strichartz_norm"),
            ExperimentId::Bilinear => ("estimates_lab", "bilinear_decay_experiment"),
            ExperimentId::Envelope => ("estimates_lab", "frequency_envelope"),
            ExperimentId::LwpConverge => ("estimates_lab", "lwp_convergence_experiment"),
        }
    }

    /// Keys that must appear in the configuration.
    pub fn required_keys(self) -> &'static [&'static str] {
        match self {
            ExperimentId::Solve | ExperimentId::Linearized => &["alpha", "T"],
            ExperimentId::Conserve | ExperimentId::Scaling | ExperimentId::Bilinear | ExperimentId::LwpConverge => {
                &["alpha"]
            }
            ExperimentId::GaugeKernel
            | ExperimentId::NfCancel
            | ExperimentId::NfResidual
            | ExperimentId::Strichartz => &["alpha", "k"],
            ExperimentId::Hamilton | ExperimentId::Eikonal => &["m", "lambda"],
            ExperimentId::Packet => &["m", "k"],
            ExperimentId::DispersiveDecay => &["m"],
            ExperimentId::Fbi | ExperimentId::Envelope => &[],
        }
    }

    /// Whether the experiment works on the dyadic block `k` of the configured grid.
    fn uses_block(self) -> bool {
        matches!(
            self,
            ExperimentId::GaugeKernel
                | ExperimentId::NfCancel
                | ExperimentId::NfResidual
                | ExperimentId::Strichartz
                | ExperimentId::Packet
        )
    }
}

impl fmt::Display for ExperimentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ExperimentId {
    type Err = ConfigError;
    fn from_str(s: &str) -> Result<Self, ConfigError> {
        ExperimentId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| ConfigError::UnknownExperiment(s.to_string()))
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown experiment id `{0}`")]
    UnknownExperiment(String),
    #[error("missing required key `{0}`")]
    MissingKey(String),
    #[error("key `{key}`: value `{value}` is out of range ({reason})")]
    OutOfRange { key: String, value: String, reason: String },
    #[error("unknown key `{0}`")]
    UnknownKey(String),
    #[error("key `{0}` is given twice")]
    DuplicateKey(String),
    #[error("key `{key}`: cannot parse `{value}`")]
    BadValue { key: String, value: String },
    #[error("line {line}: expected `key=value` or `[experiment]`, found `{text}`")]
    Malformed { line: usize, text: String },
    #[error("line {line}: unknown section `{name}`")]
    UnknownSection { line: usize, name: String },
}

/// Validated run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: ExperimentId,
    pub alpha: Option<f64>,
    pub k: Option<i32>,
    pub lambda: Option<f64>,
    pub mu: Option<f64>,
    pub m: Option<f64>,
    pub n: usize,
    pub k_l: i32,
    pub dt: f64,
    pub t_final: Option<f64>,
    pub eps: Option<f64>,
    pub s: Option<f64>,
    pub tau: Option<f64>,
    pub seed: u64,
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn grid(&self) -> anyhow::Result<Grid> {
        Ok(make_grid(self.k_l, self.n)?)
    }

    fn require<T: Copy>(&self, value: Option<T>, key: &str) -> anyhow::Result<T> {
        value.ok_or_else(|| anyhow!("missing required key `{key}`"))
    }

    /// Canonical `(key, value)` echo in a fixed order; absent keys are omitted.
    pub fn echo(&self) -> Vec<(String, String)> {
        let mut out = vec![("experiment".to_string(), self.experiment.to_string())];
        let mut push_f = |key: &str, v: Option<f64>| {
            if let Some(v) = v {
                out.push((key.to_string(), format_float(v)));
            }
        };
        push_f("alpha", self.alpha);
        push_f("lambda", self.lambda);
        push_f("mu", self.mu);
        push_f("m", self.m);
        push_f("dt", Some(self.dt));
        push_f("T", self.t_final);
        push_f("eps", self.eps);
        push_f("s", self.s);
        push_f("tau", self.tau);
        if let Some(k) = self.k {
            out.push(("k".into(), k.to_string()));
        }
        out.push(("N".into(), self.n.to_string()));
        out.push(("K_L".into(), self.k_l.to_string()));
        out.push(("seed".into(), self.seed.to_string()));
        if let Some(p) = &self.output {
            out.push(("output".into(), p.display().to_string()));
        }
        out
    }
}

const KNOWN_KEYS: [&str; 15] =
    ["experiment", "alpha", "k", "lambda", "mu", "m", "N", "K_L", "dt", "T", "eps", "s", "tau", "seed", "output"];

fn canonical_key(raw: &str) -> Option<&'static str> {
    let alias = match raw {
        "n" => "N",
        "k_l" | "K_l" | "kl" => "K_L",
        "t" | "t_final" => "T",
        "epsilon" => "eps",
        other => other,
    };
    KNOWN_KEYS.into_iter().find(|k| *k == alias)
}

fn out_of_range(key: &str, value: impl fmt::Display, reason: &str) -> ConfigError {
    ConfigError::OutOfRange { key: key.into(), value: value.to_string(), reason: reason.into() }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::BadValue { key: key.into(), value: value.into() })
}

fn parse_float(key: &str, value: &str, ok: impl Fn(f64) -> bool, reason: &str) -> Result<f64, ConfigError> {
    let v: f64 = parse_num(key, value)?;
    if v.is_finite() && ok(v) {
        Ok(v)
    } else {
        Err(out_of_range(key, value, reason))
    }
}

fn parse_dyadic(key: &str, value: &str) -> Result<f64, ConfigError> {
    let v = parse_float(key, value, |v| v >= 2.0 && v <= 4096.0, "a power of two in [2, 4096]")?;
    if v.log2().fract() != 0.0 {
        return Err(out_of_range(key, value, "a power of two in [2, 4096]"));
    }
    Ok(v)
}

/// Parse and validate a configuration, filling the defaults
/// `N = 512`, `K_L = 4`, `dt = 1e-3`, `seed = 1`.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, ConfigError> {
    let mut pairs: Vec<(&'static str, String)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') {
            continue;
        }
        if let Some(name) = line.strip_prefix('[').and_then(|r| r.strip_suffix(']')) {
            if name.trim() != "experiment" {
                return Err(ConfigError::UnknownSection { line: idx + 1, name: name.trim().into() });
            }
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(ConfigError::Malformed { line: idx + 1, text: line.into() });
        };
        let key = key.trim();
        let value = value.split('#').next().unwrap_or("").trim();
        let canon = canonical_key(key).ok_or_else(|| ConfigError::UnknownKey(key.into()))?;
        if pairs.iter().any(|(k, _)| *k == canon) {
            return Err(ConfigError::DuplicateKey(canon.into()));
        }
        pairs.push((canon, value.to_string()));
    }
    let get = |key: &str| pairs.iter().find(|(k, _)| *k == key).map(|(_, v)| v.as_str());

    let experiment: ExperimentId = get("experiment").ok_or_else(|| ConfigError::MissingKey("experiment".into()))?.parse()?;
    let alpha = get("alpha").map(|v| parse_float("alpha", v, |a| a > 0.0 && a <= 2.0, "must lie in (0, 2]")).transpose()?;
    let k = get("k")
        .map(|v| {
            let k: i32 = parse_num("k", v)?;
            if (1..=16).contains(&k) {
                Ok(k)
            } else {
                Err(out_of_range("k", v, "an integer in [1, 16]"))
            }
        })
        .transpose()?;
    let lambda = get("lambda").map(|v| parse_dyadic("lambda", v)).transpose()?;
    let mu = get("mu").map(|v| parse_dyadic("mu", v)).transpose()?;
    let m = get("m").map(|v| parse_float("m", v, |m| (2.0..=3.0).contains(&m), "must lie in [2, 3]")).transpose()?;
    let n = match get("N") {
        Some(v) => {
            let n: usize = parse_num("N", v)?;
            if !(16..=1 << 20).contains(&n) || !n.is_power_of_two() {
                return Err(out_of_range("N", v, "a power of two in [16, 2^20]"));
            }
            n
        }
        None => 512,
    };
    let k_l = match get("K_L") {
        Some(v) => {
            let k_l: i32 = parse_num("K_L", v)?;
            if !(0..=12).contains(&k_l) {
                return Err(out_of_range("K_L", v, "an integer in [0, 12]"));
            }
            k_l
        }
        None => 4,
    };
    let dt = get("dt").map(|v| parse_float("dt", v, |d| d > 0.0 && d <= 1.0, "must lie in (0, 1]")).transpose()?;
    let t_final = get("T").map(|v| parse_float("T", v, |t| t > 0.0 && t <= 1e4, "must lie in (0, 1e4]")).transpose()?;
    let eps = get("eps").map(|v| parse_float("eps", v, |e| e > 0.0 && e <= 1.0, "must lie in (0, 1]")).transpose()?;
    let s = get("s").map(|v| parse_float("s", v, |s| (-2.0..=4.0).contains(&s), "must lie in [-2, 4]")).transpose()?;
    let tau = get("tau").map(|v| parse_float("tau", v, |t| t > 0.0 && t <= 1.0, "must lie in (0, 1]")).transpose()?;
    let seed = get("seed").map(|v| parse_num::<u64>("seed", v)).transpose()?.unwrap_or(1);
    let output = get("output").filter(|v| !v.is_empty()).map(PathBuf::from);

    let cfg = ExperimentConfig {
        experiment,
        alpha,
        k,
        lambda,
        mu,
        m,
        n,
        k_l,
        dt: dt.unwrap_or(1e-3),
        t_final,
        eps,
        s,
        tau,
        seed,
        output,
    };
    for key in experiment.required_keys() {
        if get(key).is_none() {
            return Err(ConfigError::MissingKey((*key).into()));
        }
    }
    validate_cross(&cfg)?;
    Ok(cfg)
}

/// Checks that involve more than one key.
fn validate_cross(cfg: &ExperimentConfig) -> Result<(), ConfigError> {
    let nyquist = cfg.n as f64 / 2.0 / 2f64.powi(cfg.k_l);
    if let (true, Some(k)) = (cfg.experiment.uses_block(), cfg.k) {
        let reach = 2f64.powi(k + 1);
        if reach > nyquist {
            return Err(out_of_range(
                "N",
                cfg.n,
                &format!("block k = {k} reaches |ξ| = {reach} but the grid Nyquist frequency is {nyquist}"),
            ));
        }
    }
    if let (Some(m), Some(lambda), Some(tau)) = (cfg.m, cfg.lambda, cfg.tau) {
        if tau < lambda.powf(-m) {
            return Err(out_of_range("tau", tau, "must be at least λ^{-m}"));
        }
    }
    if let (Some(lambda), Some(mu)) = (cfg.lambda, cfg.mu) {
        if lambda <= mu {
            return Err(out_of_range("lambda", lambda, "must exceed mu"));
        }
    }
    Ok(())
}

/// Named scalar with its units.
#[derive(Clone, Debug, PartialEq)]
pub struct Metric {
    pub name: String,
    pub value: f64,
    pub units: String,
}

/// Long-format table: one row per observation.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }
    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }
}

/// Outcome of one experiment.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRecord {
    pub schema_version: u32,
    pub experiment: String,
    pub config: Vec<(String, String)>,
    pub metrics: Vec<Metric>,
    pub table: Option<Table>,
    /// Seconds spent in the experiment; written to the timing sidecar only.
    pub wall_clock: f64,
}

impl ResultRecord {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.iter().find(|m| m.name == name).map(|m| m.value)
    }
}

#[derive(Default)]
struct Metrics(Vec<Metric>);

impl Metrics {
    fn add(&mut self, name: impl Into<String>, value: f64, units: &str) {
        self.0.push(Metric { name: name.into(), value, units: units.into() });
    }
    fn flag(&mut self, name: &str, value: bool) {
        self.add(name, if value { 1.0 } else { 0.0 }, "bool");
    }
}

/// Run failure, tagged with the experiment that failed.
#[derive(Debug, Error)]
#[error("experiment `{experiment}` failed: {source:#}")]
pub struct RunError {
    pub experiment: ExperimentId,
    pub source: anyhow::Error,
}

/// Dispatch the configuration to the owning module and collect the record.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ResultRecord, RunError> {
    let start = Instant::now();
    let mut metrics = Metrics::default();
    let table = dispatch(cfg, &mut metrics).map_err(|source| RunError { experiment: cfg.experiment, source })?;
    Ok(ResultRecord {
        schema_version: SCHEMA_VERSION,
        experiment: cfg.experiment.to_string(),
        config: cfg.echo(),
        metrics: metrics.0,
        table,
        wall_clock: start.elapsed().as_secs_f64(),
    })
}

fn dispatch(cfg: &ExperimentConfig, out: &mut Metrics) -> anyhow::Result<Option<Table>> {
    let (module, op) = cfg.experiment.owner();
    let ctx = || format!("{module}::{op}");
    match cfg.experiment {
        ExperimentId::Solve => run_solve(cfg, cfg.require(cfg.t_final, "T")?, out),
        ExperimentId::Conserve => run_solve(cfg, cfg.t_final.unwrap_or(1.0), out),
        ExperimentId::Linearized => run_linearized(cfg, out),
        ExperimentId::Scaling => run_scaling(cfg, out),
        ExperimentId::GaugeKernel => run_gauge_kernel(cfg, out),
        ExperimentId::NfCancel => run_nf_cancel(cfg, out),
        ExperimentId::NfResidual => run_nf_residual(cfg, out),
        ExperimentId::Hamilton => run_hamilton(cfg, out),
        ExperimentId::Eikonal => run_eikonal(cfg, out),
        ExperimentId::Fbi => run_fbi(cfg, out),
        ExperimentId::Packet => run_packet(cfg, out),
        ExperimentId::DispersiveDecay => run_decay(cfg, out),
        ExperimentId::Strichartz => run_strichartz(cfg, out),
        ExperimentId::Bilinear => run_bilinear(cfg, out),
        ExperimentId::Envelope => run_envelope(cfg, out),
        ExperimentId::LwpConverge => run_lwp(cfg, out),
    }
    .with_context(ctx)
}

/// Width of the default bump: 1 on large tori, `L/32` on small ones.
fn bump_width(grid: &Grid) -> f64 {
    (grid.length() / 32.0).min(1.0)
}

/// `eps · sech((x - c)/w)` folded onto the torus. Its spectrum is the closed form
/// `π w eps · sech(π w ξ / 2) e^{-icξ}` up to exponentially small wrap-around.
pub fn sech_bump(grid: &Grid, eps: f64, centre: f64) -> Field {
    let (len, w) = (grid.length(), bump_width(grid));
    Field::from_fn(grid, |x| {
        let d = (x - centre + len / 2.0).rem_euclid(len) - len / 2.0;
        eps / (d / w).cosh()
    })
}

/// The default initial datum: a sech bump of amplitude `eps` centred mid-torus.
pub fn default_datum(grid: &Grid, eps: f64) -> Field {
    sech_bump(grid, eps, grid.length() / 2.0)
}

/// Fraction of `‖f‖²_{L²}` within `L/16` of the torus seam at `x = 0`.
///
/// Data start mid-torus, so mass near the seam signals that the solution has
/// spread far enough to interact with its periodic images.
pub fn seam_fraction(f: &Field) -> f64 {
    let grid = f.grid();
    let (len, total) = (grid.length(), f.l2_norm().powi(2));
    if total == 0.0 {
        return 0.0;
    }
    let edge: f64 = f
        .values()
        .iter()
        .enumerate()
        .filter(|(i, _)| {
            let x = grid.x(*i);
            x.min(len - x) <= len / 16.0
        })
        .map(|(_, v)| v.norm_sqr())
        .sum::<f64>()
        * grid.dx();
    edge / total
}

fn rng_for(cfg: &ExperimentConfig) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(cfg.seed)
}

/// Random complex field on the support of `P_k` with seeded amplitudes and
/// phases, normalized to unit `L²`.
pub fn random_block_field(grid: &Grid, k: i32, rng: &mut ChaCha8Rng) -> anyhow::Result<Field> {
    let spec: Vec<C64> = grid
        .freqs()
        .iter()
        .map(|&xi| {
            let c = C64::from_polar(rng.gen_range(0.5..1.0), rng.gen_range(0.0..std::f64::consts::TAU));
            if chi_block(k, xi) > 0.0 {
                c
            } else {
                C64::new(0.0, 0.0)
            }
        })
        .collect();
    let f = lp_project(&Field::from_spectrum(grid, spec, false)?, Projection::Block(k))?;
    let norm = f.l2_norm();
    Ok(f.scale(1.0 / norm))
}

fn save_stride(steps: usize, rows: usize) -> usize {
    (steps / rows).max(1)
}

fn run_solve(cfg: &ExperimentConfig, t_final: f64, out: &mut Metrics) -> anyhow::Result<Option<Table>> {
    let alpha = cfg.require(cfg.alpha, "alpha")?;
    let grid = cfg.grid()?;
    let phi0 = default_datum(&grid, cfg.eps.unwrap_or(0.01));
    let steps = (t_final / cfg.dt).ceil() as usize;
    let traj = gbo_solve(&phi0, &EvolutionConfig::new(alpha, cfg.dt, t_final).with_save_every(save_stride(steps, 200)))?;
    let (m0, e0) = conserved_quantities(&phi0, alpha);
    let mut table = Table::new(&["t", "mass", "energy", "sup", "l2"]);
    let (mut dm, mut de) = (0.0f64, 0.0f64);
    for (t, f) in traj.times.iter().zip(&traj.fields) {
        let (m, e) = conserved_quantities(f, alpha);
        dm = dm.max(((m - m0) / m0).abs());
        de = de.max(((e - e0) / e0).abs());
        table.push(vec![*t, m, e, f.sup_norm(), f.l2_norm()]);
    }
    out.add("h1_norm_initial", phi0.sobolev_norm(1.0), "1");
    out.add("mass_relative_drift", dm, "1");
    out.add("energy_relative_drift", de, "1");
    out.add("sup_final", traj.last().sup_norm(), "amplitude");
    out.add("steps", steps as f64, "count");
    out.add("wrap_around", seam_fraction(traj.last()), "fraction");
    Ok(Some(table))
}

fn run_linearized(cfg: &ExperimentConfig, out: &mut Metrics) -> anyhow::Result<Option<Table>> {
    let alpha = cfg.require(cfg.alpha, "alpha")?;
    let t_final = cfg.require(cfg.t_final, "T")?;
    let grid = cfg.grid()?;
    let eps = cfg.eps.unwrap_or(0.01);
    let phi0 = default_datum(&grid, eps);
    let v0 = sech_bump(&grid, eps, 0.25 * grid.length());
    let evo = EvolutionConfig::new(alpha, cfg.dt, t_final);
    let background = gbo_solve(&phi0, &evo)?;
    let steps = background.times.len() - 1;
    let lin = linearized_solve(&v0, &background, &evo.clone().with_save_every(save_stride(steps, 200)))?;
    // Central difference of the nonlinear flow in the direction v0.
    let h = 1e-2;
    let coarse = evo.clone().with_save_every(steps.max(1));
    let plus = gbo_solve(&phi0.add(&v0.scale(h))?, &coarse)?;
    let minus = gbo_solve(&phi0.sub(&v0.scale(h))?, &coarse)?;
    let fd = plus.last().sub(minus.last())?.scale(0.5 / h);
    let v_end = lin.last();
    let mut table = Table::new(&["t", "l2", "sup"]);
    for (t, f) in lin.times.iter().zip(&lin.fields) {
        table.push(vec![*t, f.l2_norm(), f.sup_norm()]);
    }
    out.add("l2_final", v_end.l2_norm(), "1");
    out.add("finite_difference_relative_error", fd.sub(v_end)?.l2_norm() / v_end.l2_norm(), "1");
    out.add("wrap_around", seam_fraction(v_end).max(seam_fraction(background.last())), "fraction");
    Ok(Some(table))
}

fn run_scaling(cfg: &ExperimentConfig, out: &mut Metrics) -> anyhow::Result<Option<Table>> {
    let alpha = cfg.require(cfg.alpha, "alpha")?;
    let grid = cfg.grid()?;
    let t_final = cfg.t_final.unwrap_or(0.1);
    let phi0 = default_datum(&grid, cfg.eps.unwrap_or(0.01));
    let err = scaling_check(&phi0, alpha, t_final, cfg.dt)?;
    out.add("scale_factor", 2.0, "1");
    out.add("commutation_relative_error", err, "1");
    out.add("wrap_around", seam_fraction(&phi0), "fraction");
    Ok(None)
}

fn run_gauge_kernel(cfg: &ExperimentConfig, out: &mut Metrics) -> anyhow::Result<Option<Table>> {
    let alpha = cfg.require(cfg.alpha, "alpha")?;
    let k = cfg.require(cfg.k, "k")?;
    let grid = cfg.grid()?;
    let phi = default_datum(&grid, cfg.eps.unwrap_or(0.5));
    let g = build_gauge(&phi, alpha, k)?;
    let kernel = gauge_kernel(&g)?;
    let mut rng = rng_for(cfg);
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for _ in 0..20 {
        let f = random_block_field(&grid, k, &mut rng)?;
        let r = apply_exp_gauge(&g, &f)?.l2_norm() / f.l2_norm();
        lo = lo.min(r);
        hi = hi.max(r);
    }
    // Decay profile: sup over rows of the continuum kernel at each torus offset.
    let n = kernel.n;
    let mut table = Table::new(&["distance", "kernel_sup", "weighted_sup"]);
    for d in 0..=n / 2 {
        let sup = (0..n).map(|i| kernel.data[i * n + (i + d) % n].norm()).fold(0.0, f64::max) / kernel.dx;
        let dist = d as f64 * kernel.dx;
        table.push(vec![dist, sup, (1.0 + dist * dist) * sup]);
    }
    out.add("decay_statistic", kernel.decay_statistic(), "1");
    out.add("l2_ratio_min", lo, "1");
    out.add("l2_ratio_max", hi, "1");
    out.add("band_size", kernel.band_size as f64, "count");
    out.add("wrap_around", seam_fraction(&phi), "fraction");
    Ok(Some(table))
}

/// The quadratic symbols checked by `nf-cancel`, with their record names.
pub fn cancellation_symbols() -> Vec<(&'static str, SymbolId)> {
    vec![
        ("q2k", SymbolId::Q2k),
        ("qexp_i", SymbolId::QexpI),
        ("qexp_ii", SymbolId::QexpII),
        ("qexp_h0", SymbolId::Qexph(0.0)),
        ("qexp_h_half", SymbolId::Qexph(0.5)),
        ("qexp_h1", SymbolId::Qexph(1.0)),
        ("qlin", SymbolId::Qlin),
        ("paradifferential", SymbolId::Paradifferential),
    ]
}

/// Random complex field with coefficients on `1 ≤ |ξ| ≤ 2^{k+1}`.
fn random_low_field(grid: &Grid, k: i32, rng: &mut ChaCha8Rng) -> anyhow::Result<Field> {
    let top = 2f64.powi(k + 1).min(grid.dealias_cutoff());
    let spec: Vec<C64> = grid
        .freqs()
        .iter()
        .map(|&xi| {
            let c = C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            if xi.abs() <= top {
                c
            } else {
                C64::new(0.0, 0.0)
            }
        })
        .collect();
    Ok(Field::from_spectrum(grid, spec, false)?)
}

fn run_nf_cancel(cfg: &ExperimentConfig, out: &mut Metrics) -> anyhow::Result<Option<Table>> {
    let alpha = cfg.require(cfg.alpha, "alpha")?;
    let k = cfg.require(cfg.k, "k")?;
    let grid = cfg.grid()?;
    let mut rng = rng_for(cfg);
    let u0 = random_low_field(&grid, k, &mut rng)?;
    let v0 = random_low_field(&grid, k, &mut rng)?;
    let t = cfg.t_final.unwrap_or(0.3);
    let mut table = Table::new(&["symbol", "residual_sup", "q_sup", "relative"]);
    let mut worst = 0.0f64;
    for (idx, (name, id)) in cancellation_symbols().into_iter().enumerate() {
        let corr = NormalFormCorrection::new(id, k, alpha, &grid)?;
        let r = nf_cancellation_check(&u0, &v0, t, &corr)?;
        worst = worst.max(r.relative());
        out.add(format!("relative_residual_{name}"), r.relative(), "1");
        table.push(vec![idx as f64, r.sup, r.q_sup, r.relative()]);
    }
    out.add("relative_residual_max", worst, "1");
    out.add("wrap_around", 0.0, "fraction");
    Ok(Some(table))
}

/// Unit-`L²` Gaussian of width `0.05` placed at `x = 3` (scaled with the torus).
pub fn residual_datum(grid: &Grid) -> Field {
    let centre = 3.0 * grid.length() / std::f64::consts::TAU;
    let g = Field::from_fn(grid, |x| (-(x - centre).powi(2) / (2.0 * 0.05f64.powi(2))).exp());
    let norm = g.l2_norm();
    g.scale(1.0 / norm)
}

fn run_nf_residual(cfg: &ExperimentConfig, out: &mut Metrics) -> anyhow::Result<Option<Table>> {
    let alpha = cfg.require(cfg.alpha, "alpha")?;
    let k = cfg.require(cfg.k, "k")?;
    let grid = cfg.grid()?;
    let phi0 = residual_datum(&grid);
    let top = cfg.eps.unwrap_or(1e-2);
    let report = residual_scaling_test(&phi0, alpha, k, &[top, top / 2.0, top / 4.0], &ResidualOptions::default())?;
    let mut table = Table::new(&["eps", "residual_l2"]);
    for &(e, r) in &report.rows {
        table.push(vec![e, r]);
    }
    for (i, e) in report.exponents.iter().enumerate() {
        out.add(format!("exponent_{}", i + 1), *e, "1");
    }
    out.add("exponent_mean", report.mean_exponent(), "1");
    out.add("wrap_around", seam_fraction(&phi0), "fraction");
    Ok(Some(table))
}

/// Admissible cosine field drawn from `seed` with wavenumbers on multiples of `base`.
pub fn admissible_field(m: f64, lambda: f64, base: f64, seed: u64) -> anyhow::Result<CosineField> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = CosineField::random_admissible(&mut rng, m, lambda, base, 3);
    let report = b.verify(m, lambda);
    if !report.admissible() {
        return Err(anyhow!("sampled coefficient is not admissible (worst ratio {})", report.worst_ratio()));
    }
    Ok(b)
}

/// Flow diagnostics of one Hamilton run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FlowSample {
    pub x_x: f64,
    /// `∂_ξ x^t / t`.
    pub x_xi_rate: f64,
    pub reversal: f64,
}

/// Jacobian and reversal checks at `t = 0.1/τ` for the coefficient drawn from `seed`.
pub fn hamilton_sample(m: f64, lambda: f64, tau: f64, seed: u64) -> anyhow::Result<FlowSample> {
    let b = admissible_field(m, lambda, 1.0, seed)?;
    let sym = RescaledSymbol::new(Arc::new(b), lambda, m, tau)?;
    let t = 0.1 / tau;
    let p0 = PhasePoint { x: 0.7, xi: sym.frequency() };
    let j = flow_jacobian(p0, &sym, t, t * 1e-3)?;
    let dt = t * 1e-4;
    let end = hamilton_flow(p0, &sym, t, dt)?.last();
    let back = hamilton_flow_between(end, &sym, t, 0.0, dt)?.last();
    let reversal = (back.x - p0.x).abs().max((back.xi - p0.xi).abs() / p0.xi);
    Ok(FlowSample { x_x: j.x_x, x_xi_rate: j.x_xi / t, reversal })
}

fn run_hamilton(cfg: &ExperimentConfig, out: &mut Metrics) -> anyhow::Result<Option<Table>> {
    let m = cfg.require(cfg.m, "m")?;
    let lambda = cfg.require(cfg.lambda, "lambda")?;
    let tau = cfg.tau.unwrap_or(0.05);
    let mut table = Table::new(&["sample", "x_x", "x_xi_over_t", "reversal_error"]);
    let (mut dev, mut lo, mut hi, mut rev) = (0.0f64, f64::INFINITY, 0.0f64, 0.0f64);
    for i in 0..50u64 {
        let s = hamilton_sample(m, lambda, tau, cfg.seed.wrapping_add(i))?;
        dev = dev.max((s.x_x - 1.0).abs());
        lo = lo.min(s.x_xi_rate);
        hi = hi.max(s.x_xi_rate);
        rev = rev.max(s.reversal);
        table.push(vec![i as f64, s.x_x, s.x_xi_rate, s.reversal]);
    }
    out.add("time", 0.1 / tau, "rescaled time");
    out.add("x_x_max_deviation", dev, "1");
    out.add("x_xi_rate_min", lo, "1");
    out.add("x_xi_rate_max", hi, "1");
    out.add("x_xi_rate_free", m * (m - 1.0), "1");
    out.add("reversal_error_max", rev, "1");
    out.add("wrap_around", 0.0, "fraction");
    Ok(Some(table))
}

fn run_eikonal(cfg: &ExperimentConfig, out: &mut Metrics) -> anyhow::Result<Option<Table>> {
    let m = cfg.require(cfg.m, "m")?;
    let lambda = cfg.require(cfg.lambda, "lambda")?;
    let tau = cfg.tau.unwrap_or(0.05);
    let grid = cfg.grid()?;
    let mu = tau.sqrt() * lambda.powf(-(2.0 - m) / 2.0);
    // Base wavenumber making the rescaled coefficient periodic on the grid.
    let base = 1.0 / (mu * 2f64.powi(cfg.k_l));
    let sym = RescaledSymbol::new(Arc::new(admissible_field(m, lambda, base, cfg.seed)?), lambda, m, tau)?;
    let (xi, t) = (sym.frequency(), cfg.t_final.unwrap_or(0.1 / tau));
    let dt = t * 0.9e-3;
    let h = t * 1e-3;
    let x0 = 0.25 * grid.length();
    let tab = eikonal_solve(x0, xi, &sym, &grid, t, dt)?;
    let plus = eikonal_solve(x0, xi, &sym, &grid, t + h, dt)?;
    let minus = eikonal_solve(x0, xi, &sym, &grid, t - h, dt)?;
    let mut table = Table::new(&["y", "psi", "psi_y"]);
    let mut residual = 0.0f64;
    for i in 0..grid.n() {
        let y = grid.x(i);
        let a = sym.value(t, y, tab.psi_y(y));
        residual = residual.max(((plus.psi(y) - minus.psi(y)) / (2.0 * h) + a).abs() / a.abs().max(f64::MIN_POSITIVE));
        table.push(vec![y, tab.psi(y), tab.psi_y(y)]);
    }
    let spectral = tab.psi_yy_spectral()?;
    let mut mismatch = 0.0f64;
    for (y, v) in tab.psi_yy_characteristic() {
        let interp: C64 = spectral.spectrum().iter().zip(grid.freqs()).map(|(c, &k)| c * C64::from_polar(1.0, k * y)).sum();
        mismatch = mismatch.max((interp.re - v).abs() / (1.0 + v.abs()));
    }
    out.add("time", t, "rescaled time");
    out.add("pde_relative_residual", residual, "1");
    out.add("psi_yy_mismatch", mismatch, "1");
    out.add("psi_yy_sup", spectral.sup_norm(), "1");
    out.add("wrap_around", 0.0, "fraction");
    Ok(Some(table))
}

fn run_fbi(cfg: &ExperimentConfig, out: &mut Metrics) -> anyhow::Result<Option<Table>> {
    let grid = cfg.grid()?;
    let bump = default_datum(&grid, cfg.eps.unwrap_or(1.0));
    let f = Field::from_complex_fn(&grid, |x| C64::from_polar(1.0, 3.0 * x)).mul(&bump)?;
    let t = fbi_transform(&f)?;
    let back = fbi_inverse(&t)?;
    let centre = coherent_state(&grid, 0.5 * grid.length(), 3.0)?;
    let inner_err = (fbi_transform(&centre)?.inner(&t) - centre.inner(&f)).norm() / (centre.l2_norm() * f.l2_norm());
    let peak = t.rows().map(|r| r.2).fold(0.0, f64::max);
    let mut table = Table::new(&["x", "xi", "density"]);
    for (x, xi, d) in t.rows() {
        if d > 1e-8 * peak {
            table.push(vec![x, xi, d]);
        }
    }
    out.add("isometry_ratio", t.l2_norm() / f.l2_norm(), "1");
    out.add("inversion_error", back.max_diff(&f) / f.sup_norm(), "1");
    out.add("inner_product_error", inner_err, "1");
    out.add("wrap_around", seam_fraction(&f), "fraction");
    Ok(Some(table))
}

fn run_packet(cfg: &ExperimentConfig, out: &mut Metrics) -> anyhow::Result<Option<Table>> {
    let m = cfg.require(cfg.m, "m")?;
    let k = cfg.require(cfg.k, "k")?;
    let grid = cfg.grid()?;
    let lambda = 2f64.powi(k);
    let t_final = cfg.t_final.unwrap_or(0.1);
    let radius = 5.0;
    let b = CoefficientSpec::Random { seed: cfg.seed, modes: 3 }.build(m, lambda)?;
    let sym = TransportSymbol::new(b, m, k);
    let free = TransportSymbol::new(Arc::new(ZeroCoefficient), m, k);
    let p0 = PhasePoint { x: 0.5 * grid.length(), xi: lambda };
    let mut table = Table::new(&["t", "fraction", "centre_x", "centre_xi", "free_fraction"]);
    let mut worst = 1.0f64;
    for q in 0..=4 {
        let t = t_final * q as f64 / 4.0;
        let r = packet_coherence_check(&sym, &grid, p0, t, cfg.dt, radius)?;
        let f = packet_coherence_check(&free, &grid, p0, t, cfg.dt, radius)?;
        worst = worst.min(r.fraction);
        table.push(vec![t, r.fraction, r.centre.x, r.centre.xi, f.fraction]);
    }
    out.add("radius", radius, "phase-space units");
    out.add("fraction_min", worst, "fraction");
    out.add("wrap_around", 0.0, "fraction");
    Ok(Some(table))
}

fn run_decay(cfg: &ExperimentConfig, out: &mut Metrics) -> anyhow::Result<Option<Table>> {
    let m = cfg.require(cfg.m, "m")?;
    let exps: Vec<i32> = match cfg.lambda {
        Some(l) => vec![l.log2() as i32],
        None => vec![4, 5, 6, 7],
    };
    let sweep = dispersive_decay_experiment(&exps, m, &CoefficientSpec::Random { seed: cfg.seed, modes: 4 }, 64, DECAY_HORIZON)?;
    let mut table = Table::new(&["lambda", "slope", "prefactor", "wrap", "lateral_ratio"]);
    let (mut worst_slope, mut wrap) = (0.0f64, 0.0f64);
    for r in &sweep.runs {
        table.push(vec![r.lambda, r.slope, r.prefactor, r.wrap, r.lateral_ratio]);
        out.add(format!("slope_lambda_{}", r.lambda), r.slope, "1");
        worst_slope = worst_slope.max((r.slope + 0.5).abs());
        wrap = wrap.max(r.wrap);
    }
    out.add("slope_max_deviation", worst_slope, "1");
    if sweep.runs.len() > 1 {
        out.add("lambda_exponent", sweep.lambda_exponent, "1");
    }
    out.add("lambda_exponent_target", (2.0 - m) / 2.0, "1");
    out.add("wrap_around", wrap, "fraction");
    Ok(Some(table))
}

fn run_strichartz(cfg: &ExperimentConfig, out: &mut Metrics) -> anyhow::Result<Option<Table>> {
    let alpha = cfg.require(cfg.alpha, "alpha")?;
    let k = cfg.require(cfg.k, "k")?;
    let grid = cfg.grid()?;
    let t_final = cfg.t_final.unwrap_or(1.0);
    let mut rng = rng_for(cfg);
    let u0 = random_block_field(&grid, k, &mut rng)?.re();
    let u0 = u0.scale(1.0 / u0.l2_norm());
    let steps = (t_final / cfg.dt).ceil().max(1.0) as usize;
    let frames = steps.min(400);
    let times: Vec<f64> = (0..=frames).map(|i| t_final * i as f64 / frames as f64).collect();
    let fields = times.iter().map(|&t| linear_propagate(&u0, alpha, t)).collect::<Result<Vec<_>, _>>()?;
    let mut table = Table::new(&["t", "sup", "l2"]);
    for (t, f) in times.iter().zip(&fields) {
        table.push(vec![*t, f.sup_norm(), f.l2_norm()]);
    }
    let traj = crate::evolution::Trajectory { times, fields, config: EvolutionConfig::new(alpha, t_final / frames as f64, t_final) };
    out.add("strichartz_norm", strichartz_norm(&traj, alpha)?, "1");
    out.add("lateral_strichartz_norm", lateral_strichartz_norm(&traj, alpha)?, "1");
    out.add("l4_linf", mixed_norm(&traj, &MixedNormSpec::new(4.0, f64::INFINITY))?, "1");
    out.flag("pair_4_inf_admissible", strichartz_admissible(4.0, f64::INFINITY));
    out.add("wrap_around", seam_fraction(traj.last()), "fraction");
    Ok(Some(table))
}

fn run_bilinear(cfg: &ExperimentConfig, out: &mut Metrics) -> anyhow::Result<Option<Table>> {
    let alpha = cfg.require(cfg.alpha, "alpha")?;
    let mu_exp = cfg.mu.map_or(3, |m| m.log2() as i32);
    let exps: Vec<i32> = match cfg.lambda {
        Some(l) => vec![l.log2() as i32],
        None => (4..=8).filter(|&e| e > mu_exp).collect(),
    };
    let background = BackgroundSpec::Waves { seed: cfg.seed, amplitude: cfg.eps.unwrap_or(0.1), modes: 3 };
    let report = bilinear_decay_experiment(alpha, &exps, mu_exp, &background, 5)?;
    let mut table = Table::new(&["lambda", "mu", "product", "u_energy", "v_energy", "ratio", "t_final"]);
    for r in &report.rows {
        table.push(vec![r.lambda, r.mu, r.product, r.u_energy, r.v_energy, r.ratio, r.t_final]);
    }
    if report.rows.len() > 1 {
        out.add("lambda_exponent", report.exponent, "1");
    }
    out.add("lambda_exponent_target", -alpha / 2.0, "1");
    out.add("control_a", report.control_a, "1");
    out.add("wrap_around", 0.0, "fraction");
    Ok(Some(table))
}

fn run_envelope(cfg: &ExperimentConfig, out: &mut Metrics) -> anyhow::Result<Option<Table>> {
    let grid = cfg.grid()?;
    let s = cfg.s.unwrap_or(0.0);
    let phi = rough_datum(&grid, s, cfg.eps.unwrap_or(0.01), 0.25, cfg.seed)?;
    let env = frequency_envelope(&phi, s, DEFAULT_ENVELOPE_DELTA)?;
    let mut table = Table::new(&["k", "block_norm", "envelope"]);
    for (k, (b, c)) in env.block_norms.iter().zip(&env.values).enumerate() {
        table.push(vec![k as f64, *b, *c]);
    }
    let block_energy: f64 = env.block_norms.iter().map(|b| b * b).sum();
    let r2 = 2f64.powf(-2.0 * env.delta);
    out.add("energy_ratio", env.energy() / block_energy, "1");
    out.add("energy_constant_blocks", env.energy_constant(), "1");
    out.add("energy_constant_line", (1.0 + r2) / (1.0 - r2), "1");
    out.flag("dominates_blocks", env.dominates_blocks());
    out.flag("slowly_varying", env.slowly_varying());
    out.flag("slowly_varying_attained", env.slowly_varying_attained());
    out.add("wrap_around", 0.0, "fraction");
    Ok(Some(table))
}

fn run_lwp(cfg: &ExperimentConfig, out: &mut Metrics) -> anyhow::Result<Option<Table>> {
    let alpha = cfg.require(cfg.alpha, "alpha")?;
    let grid = cfg.grid()?;
    let s = cfg.s.unwrap_or(0.0);
    let phi0 = rough_datum(&grid, s, cfg.eps.unwrap_or(0.01), 0.25, cfg.seed)?;
    let cutoff = grid.dealias_cutoff();
    let n_list: Vec<i32> = (4..=8).filter(|&n| 2f64.powi(n) <= cutoff).collect();
    if n_list.len() < 3 {
        return Err(anyhow!("grid dealias cutoff {cutoff} leaves fewer than three regularization levels in 4..=8"));
    }
    let report = lwp_convergence_experiment(&phi0, alpha, s, &n_list, cfg.t_final.unwrap_or(1.0), cfg.dt)?;
    let mut table = Table::new(&["n", "difference"]);
    for &(n, d) in &report.differences {
        table.push(vec![n as f64, d]);
    }
    out.add("rate_exponent", report.rate_exponent, "1");
    out.add("envelope_constant", report.envelope_constant, "1");
    out.add("bilinear_table_max", report.bilinear_table.iter().map(|r| r.2).fold(0.0, f64::max), "1");
    out.add("wrap_around", 0.0, "fraction");
    Ok(Some(table))
}

/// Output format of [`emit_results`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    JsonLines,
}

impl FromStr for OutputFormat {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "jsonl" | "json-lines" => Ok(OutputFormat::JsonLines),
            other => Err(format!("unknown format `{other}` (expected csv or jsonl)")),
        }
    }
}

/// Fixed 17-significant-digit rendering; non-finite values as `NaN`, `inf`, `-inf`.
pub fn format_float(v: f64) -> String {
    if v.is_nan() {
        "NaN".into()
    } else if v.is_infinite() {
        if v > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{v:.16e}")
    }
}

fn parse_float_token(s: &str) -> Option<f64> {
    match s {
        "NaN" => Some(f64::NAN),
        "inf" => Some(f64::INFINITY),
        "-inf" => Some(f64::NEG_INFINITY),
        other => other.parse().ok(),
    }
}

fn csv_header(rec: &ResultRecord) -> String {
    let mut s = format!("# schema_version={}\n", rec.schema_version);
    for (k, v) in &rec.config {
        s.push_str(&format!("# {k}={v}\n"));
    }
    s
}

/// The metrics file of the CSV output.
pub fn metrics_csv(rec: &ResultRecord) -> String {
    let mut s = csv_header(rec);
    s.push_str("metric,value,units\n");
    for m in &rec.metrics {
        s.push_str(&format!("{},{},{}\n", m.name, format_float(m.value), m.units));
    }
    s
}

/// The table file of the CSV output: config comment, column header, rows.
pub fn table_csv(rec: &ResultRecord, table: &Table) -> String {
    let mut s = csv_header(rec);
    s.push_str(&table.columns.join(","));
    s.push('\n');
    for row in &table.rows {
        let cells: Vec<String> = row.iter().map(|v| format_float(*v)).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

/// A float as a JSON token: a number literal with 17 significant digits, or a
/// string for non-finite values.
fn json_float(v: f64) -> String {
    if v.is_finite() {
        format_float(v)
    } else {
        format!("\"{}\"", format_float(v))
    }
}

fn json_str(s: &str) -> String {
    Value::String(s.to_string()).to_string()
}

/// JSON-lines rendering: a header line, one line per metric, then the table
/// columns and one line per row.
pub fn to_json_lines(rec: &ResultRecord) -> String {
    let config: Vec<String> = rec.config.iter().map(|(k, v)| format!("{}:{}", json_str(k), json_str(v))).collect();
    let mut s = format!(
        "{{\"kind\":\"record\",\"schema_version\":{},\"experiment\":{},\"config\":{{{}}}}}\n",
        rec.schema_version,
        json_str(&rec.experiment),
        config.join(",")
    );
    for m in &rec.metrics {
        s.push_str(&format!(
            "{{\"kind\":\"metric\",\"name\":{},\"value\":{},\"units\":{}}}\n",
            json_str(&m.name),
            json_float(m.value),
            json_str(&m.units)
        ));
    }
    if let Some(t) = &rec.table {
        let cols: Vec<String> = t.columns.iter().map(|c| json_str(c)).collect();
        s.push_str(&format!("{{\"kind\":\"columns\",\"names\":[{}]}}\n", cols.join(",")));
        for row in &t.rows {
            let cells: Vec<String> = row.iter().map(|v| json_float(*v)).collect();
            s.push_str(&format!("{{\"kind\":\"row\",\"values\":[{}]}}\n", cells.join(",")));
        }
    }
    s
}

fn json_number(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => parse_float_token(s),
        _ => None,
    }
}

/// Parse the output of [`to_json_lines`]. The wall-clock field is not part of
/// the stream and comes back as zero.
pub fn parse_json_lines(text: &str) -> anyhow::Result<ResultRecord> {
    let mut rec: Option<ResultRecord> = None;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: Value = serde_json::from_str(line).with_context(|| format!("line {}", i + 1))?;
        let kind = v["kind"].as_str().ok_or_else(|| anyhow!("line {}: missing kind", i + 1))?;
        if kind == "record" {
            let config = v["config"]
                .as_object()
                .ok_or_else(|| anyhow!("config is not an object"))?
                .iter()
                .map(|(k, v)| (k.clone(), v.as_str().unwrap_or_default().to_string()))
                .collect();
            rec = Some(ResultRecord {
                schema_version: v["schema_version"].as_u64().ok_or_else(|| anyhow!("missing schema_version"))? as u32,
                experiment: v["experiment"].as_str().unwrap_or_default().to_string(),
                config,
                metrics: Vec::new(),
                table: None,
                wall_clock: 0.0,
            });
            continue;
        }
        let r = rec.as_mut().ok_or_else(|| anyhow!("line {}: data before the record header", i + 1))?;
        match kind {
            "metric" => r.metrics.push(Metric {
                name: v["name"].as_str().unwrap_or_default().to_string(),
                value: json_number(&v["value"]).ok_or_else(|| anyhow!("line {}: bad metric value", i + 1))?,
                units: v["units"].as_str().unwrap_or_default().to_string(),
            }),
            "columns" => {
                let names = v["names"].as_array().ok_or_else(|| anyhow!("line {}: bad column list", i + 1))?;
                r.table = Some(Table { columns: names.iter().map(|n| n.as_str().unwrap_or_default().to_string()).collect(), rows: Vec::new() });
            }
            "row" => {
                let t = r.table.as_mut().ok_or_else(|| anyhow!("line {}: row before columns", i + 1))?;
                let cells = v["values"].as_array().ok_or_else(|| anyhow!("line {}: bad row", i + 1))?;
                t.rows.push(cells.iter().map(|c| json_number(c).ok_or_else(|| anyhow!("line {}: bad cell", i + 1))).collect::<anyhow::Result<_>>()?);
            }
            other => return Err(anyhow!("line {}: unknown kind `{other}`", i + 1)),
        }
    }
    rec.ok_or_else(|| anyhow!("no record header"))
}

/// Write the record into `dir` and return the paths written.
///
/// CSV gives `<id>.metrics.csv` plus `<id>.table.csv` when a table is present;
/// JSON lines gives `<id>.jsonl`. Both also write `<id>.timing.json` with the
/// wall-clock time, kept apart so the data files are byte-stable.
pub fn emit_results(rec: &ResultRecord, dir: &Path, format: OutputFormat) -> io::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let stem = &rec.experiment;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> io::Result<()> {
        let path = dir.join(name);
        fs::write(&path, body)?;
        written.push(path);
        Ok(())
    };
    match format {
        OutputFormat::Csv => {
            put(format!("{stem}.metrics.csv"), metrics_csv(rec))?;
            if let Some(t) = &rec.table {
                put(format!("{stem}.table.csv"), table_csv(rec, t))?;
            }
        }
        OutputFormat::JsonLines => put(format!("{stem}.jsonl"), to_json_lines(rec))?,
    }
    put(format!("{stem}.timing.json"), format!("{}\n", json!({ "wall_clock_seconds": rec.wall_clock })))?;
    Ok(written)
}
