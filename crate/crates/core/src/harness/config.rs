//! Experiment configuration (TOML) and its validation.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::block::choose_block_size;
use crate::dynamics::{DynamicsParams, InitialProfile};
use crate::error::{Error, Result};
use crate::pde::EntropyPair;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Simulate,
    Pde,
    Sweep,
    Spectral,
    LemmaCheck,
    Diagnose,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Simulate => "simulate",
            Mode::Pde => "pde",
            Mode::Sweep => "sweep",
            Mode::Spectral => "spectral",
            Mode::LemmaCheck => "lemma-check",
            Mode::Diagnose => "diagnose",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellConfig {
    #[serde(default = "default_time_cells")]
    pub time: usize,
    #[serde(default = "default_space_cells")]
    pub space: usize,
}

impl Default for CellConfig {
    fn default() -> Self {
        Self { time: default_time_cells(), space: default_space_cells() }
    }
}

/// Block lengths and search budgets of the spectral and lemma-check modes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpectralConfig {
    pub l_min: usize,
    pub l_max: usize,
    pub lsi_l_min: usize,
    pub lsi_l_max: usize,
    pub lsi_trials: usize,
    pub lsi_steps: usize,
    /// Random densities per hyperplane in the envelope check.
    pub lsi_samples: usize,
    pub lemma_l: Vec<usize>,
    pub moment_bound: f64,
}

impl Default for SpectralConfig {
    fn default() -> Self {
        Self {
            l_min: 2,
            l_max: 8,
            lsi_l_min: 3,
            lsi_l_max: 7,
            lsi_trials: 20,
            lsi_steps: 300,
            lsi_samples: 10_000,
            lemma_l: vec![8, 10, 12],
            moment_bound: std::f64::consts::SQRT_2,
        }
    }
}

/// One experiment; every physical constant of a run lives here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub mode: Mode,
    #[serde(default = "default_ns")]
    pub n: Vec<usize>,
    /// `sigma(n) = n^(-beta)`.
    #[serde(default)]
    pub beta: Option<f64>,
    /// Fixed `sigma` for every `n`; exclusive with `beta`.
    #[serde(default)]
    pub sigma: Option<f64>,
    #[serde(default = "default_t_final")]
    pub t_final: f64,
    /// Number of snapshot intervals on `[0, T]`.
    #[serde(default = "default_snapshots")]
    pub snapshots: usize,
    #[serde(default = "default_replicas")]
    pub replicas: usize,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_profile")]
    pub profile: InitialProfile,
    #[serde(default)]
    pub cells: CellConfig,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// `global`, `linear:<a>` or `absolute:<a>`.
    #[serde(default = "default_pair")]
    pub pair: String,
    #[serde(default = "default_bank_size")]
    pub bank_size: usize,
    /// Spatial points kept from each block field.
    #[serde(default = "default_field_points")]
    pub field_points: usize,
    #[serde(default = "default_reference_nx")]
    pub reference_nx: usize,
    /// Coarsest resolution of the solver self-convergence check.
    #[serde(default = "default_pde_nx")]
    pub pde_nx: usize,
    #[serde(default)]
    pub event_budget: Option<u64>,
    #[serde(default)]
    pub threads: Option<usize>,
    /// Write every replica's block fields in `simulate` mode.
    #[serde(default = "default_true")]
    pub save_fields: bool,
    #[serde(default)]
    pub spectral: SpectralConfig,
}

fn default_ns() -> Vec<usize> {
    vec![128, 256, 512]
}
fn default_t_final() -> f64 {
    0.5
}
fn default_snapshots() -> usize {
    200
}
fn default_replicas() -> usize {
    50
}
fn default_seed() -> u64 {
    1
}
fn default_profile() -> InitialProfile {
    InitialProfile::Riemann { left: [0.4, 0.3], right: [0.4, -0.3], x0: 0.5 }
}
fn default_time_cells() -> usize {
    10
}
fn default_space_cells() -> usize {
    16
}
fn default_out() -> PathBuf {
    PathBuf::from("out")
}
fn default_pair() -> String {
    "global".into()
}
fn default_bank_size() -> usize {
    9
}
fn default_field_points() -> usize {
    128
}
fn default_reference_nx() -> usize {
    2048
}
fn default_pde_nx() -> usize {
    512
}
fn default_true() -> bool {
    true
}

/// Default beta when neither `beta` nor `sigma` is given.
pub const DEFAULT_BETA: f64 = 0.4;

impl ExperimentConfig {
    /// All defaults for `mode`.
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            n: default_ns(),
            beta: None,
            sigma: None,
            t_final: default_t_final(),
            snapshots: default_snapshots(),
            replicas: default_replicas(),
            seed: default_seed(),
            profile: default_profile(),
            cells: CellConfig::default(),
            out: default_out(),
            pair: default_pair(),
            bank_size: default_bank_size(),
            field_points: default_field_points(),
            reference_nx: default_reference_nx(),
            pde_nx: default_pde_nx(),
            event_budget: None,
            threads: None,
            save_fields: true,
            spectral: SpectralConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Parses `global`, `linear:<a>` or `absolute:<a>`.
pub fn parse_pair(s: &str) -> Result<EntropyPair> {
    let bad = || Error::Config(format!("unknown entropy pair {s:?}"));
    match s.split_once(':') {
        None if s == "global" => Ok(EntropyPair::Global),
        Some((kind, a)) => {
            let a: f64 = a.trim().parse().map_err(|_| bad())?;
            match kind {
                "linear" => Ok(EntropyPair::Linear(a)),
                "absolute" => Ok(EntropyPair::Absolute(a)),
                _ => Err(bad()),
            }
        }
        None => Err(bad()),
    }
}

/// Quantities derived from the config for one lattice size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DerivedParams {
    pub n: usize,
    pub sigma: f64,
    pub l: usize,
    pub window_lower: f64,
    pub window_upper: f64,
    /// `n sigma^2`, which must exceed 1 for the block window to be non-empty.
    pub n_sigma2: f64,
    /// Spacing of the kept block-field points, in lattice sites.
    pub stride: usize,
}

impl DerivedParams {
    pub fn dynamics(&self) -> Result<DynamicsParams> {
        DynamicsParams::new(self.n, self.sigma)
    }
}

/// A validated config with defaults filled in.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedConfig {
    pub config: ExperimentConfig,
    pub derived: Vec<DerivedParams>,
    pub warnings: Vec<String>,
}

impl NormalizedConfig {
    pub fn pair(&self) -> EntropyPair {
        parse_pair(&self.config.pair).expect("validated")
    }
}

fn check_profile(profile: &InitialProfile, ns: &[usize]) -> Result<()> {
    let probe = 4096;
    let points = (0..probe)
        .map(|i| i as f64 / probe as f64)
        .chain(ns.iter().flat_map(|&n| (0..n).map(move |j| j as f64 / n as f64)));
    for x in points {
        let (rho, u) = profile.at(x);
        if !(-1e-12..=1.0 + 1e-12).contains(&rho) || rho + u.abs() > 1.0 + 1e-12 {
            return Err(Error::Config(format!(
                "initial profile leaves the domain at x = {x}: (rho, u) = ({rho}, {u}) has rho + |u| > 1 or rho outside [0, 1]"
            )));
        }
    }
    Ok(())
}

/// Rejects invalid settings, fills defaults and echoes `sigma(n)`, `l(n)`.
pub fn validate_config(config: &ExperimentConfig) -> Result<NormalizedConfig> {
    let mut cfg = config.clone();
    let mut warnings = Vec::new();
    if cfg.n.is_empty() || cfg.n.iter().any(|&n| n < 3) {
        return Err(Error::Config("n must list lattice sizes of at least 3 sites".into()));
    }
    if !(cfg.t_final > 0.0) || cfg.snapshots == 0 || cfg.replicas == 0 || cfg.bank_size == 0 {
        return Err(Error::Config("t_final, snapshots, replicas and bank_size must be positive".into()));
    }
    if cfg.cells.time == 0 || cfg.cells.space == 0 {
        return Err(Error::Config("cell partition must have at least one cell per axis".into()));
    }
    if cfg.beta.is_some() && cfg.sigma.is_some() {
        return Err(Error::Config("give either beta or sigma, not both".into()));
    }
    if cfg.beta.is_none() && cfg.sigma.is_none() {
        cfg.beta = Some(DEFAULT_BETA);
    }
    let pair = parse_pair(&cfg.pair)?;
    if !pair.is_convex() {
        warnings.push(format!("entropy pair {} is not convex; weak residuals carry no sign", pair.tag()));
    }
    check_profile(&cfg.profile, &cfg.n)?;

    if let Some(b) = cfg.beta {
        if b >= 0.5 {
            warnings.push(format!("condition (A): beta = {b} >= 1/2 violates n^(-1/2) << sigma(n) asymptotically"));
        }
    }

    let mut derived = Vec::new();
    for &n in &cfg.n {
        let sigma = match (cfg.beta, cfg.sigma) {
            (_, Some(s)) => s,
            (Some(b), None) => {
                if b <= 0.0 {
                    return Err(Error::Config(format!(
                        "condition (A): beta = {b} gives sigma = n^-beta >= 1; need 0 < sigma < 1"
                    )));
                }
                (n as f64).powf(-b)
            }
            (None, None) => unreachable!("beta filled above"),
        };
        if !(sigma > 0.0 && sigma < 1.0) {
            return Err(Error::Config(format!("condition (A): sigma = {sigma} must lie in (0, 1)")));
        }
        let block = choose_block_size(n, sigma).map_err(|_| {
            let mut msg = format!(
                "condition (B): empty block-size window for n = {n}, sigma = {sigma:.6} (n sigma^2 = {:.4})",
                n as f64 * sigma * sigma
            );
            for w in &warnings {
                msg.push_str("; ");
                msg.push_str(w);
            }
            Error::Config(msg)
        })?;
        let stride = (n / cfg.field_points.max(1)).max(1);
        if n % stride != 0 {
            return Err(Error::Config(format!("field_points = {} does not divide n = {n}", cfg.field_points)));
        }
        derived.push(DerivedParams {
            n,
            sigma,
            l: block.l,
            window_lower: block.lower,
            window_upper: block.upper,
            n_sigma2: n as f64 * sigma * sigma,
            stride,
        });
    }
    if cfg.sigma.is_some() && cfg.n.len() > 1 {
        warnings.push("condition (A): a fixed sigma does not vanish along the sweep".into());
    }
    if cfg.n.iter().any(|&n| n > 512) {
        warnings.push("lattice sizes above 512 make long runs".into());
    }
    if matches!(cfg.mode, Mode::Sweep | Mode::Diagnose) {
        for d in &derived {
            let per_cell = (cfg.snapshots + 1) as f64 / cfg.cells.time as f64 * (d.n / d.stride) as f64
                / cfg.cells.space as f64
                * cfg.replicas as f64;
            if per_cell < crate::compactness::MIN_CELL_SAMPLES as f64 {
                return Err(Error::Config(format!(
                    "cells of {}x{} hold about {per_cell:.0} samples at n = {}; need at least {}",
                    cfg.cells.time,
                    cfg.cells.space,
                    d.n,
                    crate::compactness::MIN_CELL_SAMPLES
                )));
            }
        }
    }
    let s = &cfg.spectral;
    if s.l_min < 2
        || s.l_max < s.l_min
        || s.lsi_l_min < 2
        || s.lsi_l_max < s.lsi_l_min
        || s.lemma_l.iter().any(|&l| l < 2)
    {
        return Err(Error::Config("spectral block lengths must be at least 2 and ordered".into()));
    }
    if !(s.moment_bound > 1.0) {
        return Err(Error::Config("moment_bound must exceed 1".into()));
    }
    Ok(NormalizedConfig { config: cfg, derived, warnings })
}
