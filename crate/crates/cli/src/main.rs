use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use asep_core::harness::run::{read_criteria, run};
use asep_core::harness::{validate_config, ExperimentConfig, Mode, NormalizedConfig};
use clap::{Args, Parser, Subcommand};

/// Two-species exclusion with collisions: simulations, the Leroux reference
/// solver and their diagnostics.
#[derive(Parser, Debug)]
#[command(name = "asep", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Replica ensembles and their block fields.
    Simulate(Overrides),
    /// Reference solve with the self-convergence report.
    Pde(Overrides),
    /// Full n-sweep with scaling fits, trends and criteria 8-12.
    Sweep(Overrides),
    /// Gap, log-Sobolev ratio and gamma_0 per hyperplane.
    Spectral(Overrides),
    /// Conditional exponential moments and the log-Sobolev envelope.
    LemmaCheck(Overrides),
    /// Compactness diagnostics without the production decomposition.
    Diagnose(Overrides),
}

#[derive(Args, Debug, Default)]
struct Overrides {
    /// TOML experiment file; `mode` may be omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    replicas: Option<usize>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    threads: Option<usize>,
    /// Validate and print the resolved configuration without running.
    #[arg(long)]
    dry_run: bool,
}

impl Command {
    fn split(self) -> (Mode, Overrides) {
        match self {
            Command::Simulate(o) => (Mode::Simulate, o),
            Command::Pde(o) => (Mode::Pde, o),
            Command::Sweep(o) => (Mode::Sweep, o),
            Command::Spectral(o) => (Mode::Spectral, o),
            Command::LemmaCheck(o) => (Mode::LemmaCheck, o),
            Command::Diagnose(o) => (Mode::Diagnose, o),
        }
    }
}

fn load(path: &Path, mode: Mode) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    match table.get("mode").and_then(|v| v.as_str()) {
        Some(m) if m != mode.name() => {
            eprintln!("warning: {} sets mode = {m:?}; running {}", path.display(), mode.name());
        }
        _ => {}
    }
    table.insert("mode".into(), toml::Value::String(mode.name().into()));
    Ok(ExperimentConfig::from_toml(&toml::to_string(&table)?)?)
}

fn resolve(mode: Mode, o: &Overrides) -> Result<NormalizedConfig> {
    let mut cfg = match &o.config {
        Some(p) => load(p, mode)?,
        None => ExperimentConfig::new(mode),
    };
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if let Some(d) = &o.out {
        cfg.out = d.clone();
    }
    if let Some(r) = o.replicas {
        cfg.replicas = r;
    }
    if let Some(t) = o.threads {
        cfg.threads = Some(t);
    }
    Ok(validate_config(&cfg)?)
}

fn print_derived(norm: &NormalizedConfig) {
    println!("{:>6} {:>10} {:>5} {:>18} {:>10}", "n", "sigma", "l", "window", "n sigma^2");
    for d in &norm.derived {
        println!(
            "{:>6} {:>10.6} {:>5} {:>8.2} .. {:<7.2} {:>10.3}",
            d.n, d.sigma, d.l, d.window_lower, d.window_upper, d.n_sigma2
        );
    }
}

fn execute(cli: Cli) -> Result<ExitCode> {
    let (mode, o) = cli.command.split();
    let norm = resolve(mode, &o)?;
    for w in &norm.warnings {
        eprintln!("warning: {w}");
    }
    if matches!(mode, Mode::Simulate | Mode::Sweep | Mode::Diagnose) {
        print_derived(&norm);
    }
    if o.dry_run {
        print!("{}", norm.config.to_toml()?);
        return Ok(ExitCode::SUCCESS);
    }
    let manifest = run(&norm)?;
    for s in &manifest.stages {
        let status = if s.ok { "ok" } else { "FAILED" };
        println!("stage {}: {status} in {:.1} s", s.name, s.seconds);
        if let Some(m) = &s.message {
            eprintln!("  {m}");
        }
    }
    let writes_criteria = !matches!(mode, Mode::Simulate | Mode::Pde);
    if writes_criteria && manifest.succeeded() {
        for c in read_criteria(&norm.config.out)?.unwrap_or_default() {
            println!("{}", c.line());
        }
    }
    println!("{} files written to {}", manifest.files.len(), norm.config.out.display());
    if !manifest.succeeded() {
        eprintln!("error: a stage failed; see {}", norm.config.out.join("manifest.json").display());
        return Ok(ExitCode::from(1));
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
