//! Acceptance suite: one `[PASS]`/`[FAIL]` line per criterion.
//!
//! The process exits non-zero on failure only when `ACCEPTANCE_STRICT` is
//! set; by default every line is printed and the run ends with a summary.
//! `ACCEPTANCE_REPLICAS` overrides the 50-replica sweep for quick runs
//! (outcomes are then not the pinned ones).

use std::time::Instant;

use asep_core::compactness::{
    build_young_measure, default_family_grid, dirac_defect, family_tartar_defect, mv_entropy_residual, CellPartition,
};
use asep_core::dynamics::InitialProfile;
use asep_core::dynamics::{generator_matrix, simulate, time_grid, DynamicsParams, Simulator, StepOutcome};
use asep_core::equilibrium::GibbsParams;
use asep_core::harness::criteria::{self, CriterionOutcome};
use asep_core::harness::run::{lemma_check, pde_pipeline, reference_solution, spectral_table, sweep};
use asep_core::harness::{validate_config, ExperimentConfig, Mode};
use asep_core::lattice::{
    micro_flux, phi_times2_closed_form, psi_times2_closed_form, rate_r, rate_r_indicator_form,
    rate_r_times4_conserved_form, Configuration, Spin,
};
use asep_core::pde::{
    char_speeds, entropy_residual, flux_jacobian, solve_reference, test_function_bank, EntropyPair, MacroState,
    PdeConfig,
};
use nalgebra::Matrix2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STATIONARITY_TOL: f64 = 1e-12;
const ENTROPY_TOL: f64 = 1e-9;
const EIGEN_TOL: f64 = 1e-12;
const CTMC_SE: f64 = 4.0;
const CTMC_EVENTS: usize = 100_000;
const DYNKIN_REPLICAS: usize = 100_000;
const FACTORIZATION_TOL: f64 = 1e-12;
const NEGATIVE_CONTROL: f64 = -0.01;
const SHOCK_CELLS: f64 = 2.0;
const MASS_TOL: f64 = 1e-10;
const SELF_CONVERGENCE: f64 = 2.0;

fn interior_point<R: Rng>(rng: &mut R) -> MacroState {
    let rho = rng.random_range(0.05..0.95);
    let t: f64 = rng.random_range(-0.95..0.95);
    MacroState::new(rho, t * (1.0 - rho))
}

fn stationarity() -> CriterionOutcome {
    let mut worst = 0.0f64;
    for n in 3..=6 {
        let g = generator_matrix(&DynamicsParams::new(n, 0.37).unwrap()).unwrap();
        for i in 0..5 {
            let rho = 0.1 + 0.15 * i as f64;
            for j in 0..5 {
                let u = (-0.8 + 0.4 * j as f64) * (1.0 - rho);
                let pi = g.product_measure(&GibbsParams::new(rho, u).unwrap());
                worst = worst.max(g.apply_left(&pi).iter().map(|v| v.abs()).sum());
            }
        }
    }
    CriterionOutcome::new(
        1,
        "exact stationarity",
        worst < STATIONARITY_TOL,
        format!("max |pi G|_1 = {worst:.2e} over n = 3..6 and a 5x5 grid; need < {STATIONARITY_TOL:e}"),
    )
}

fn algebra() -> CriterionOutcome {
    let mut mismatches = 0;
    for a in Spin::ALL {
        for b in Spin::ALL {
            let r = rate_r(a, b);
            let f = micro_flux(a, b);
            mismatches += (rate_r_indicator_form(a, b) != r) as usize;
            mismatches += (rate_r_times4_conserved_form(a, b) != 4 * r as i32) as usize;
            mismatches += (psi_times2_closed_form(a, b) != 2 * f.psi) as usize;
            mismatches += (phi_times2_closed_form(a, b) != 2 * f.phi) as usize;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let points: Vec<MacroState> = (0..50).map(|_| interior_point(&mut rng)).collect();
    let residual = |pair: &EntropyPair, s: MacroState| {
        let r = entropy_residual(pair, s);
        r[0].abs().max(r[1].abs())
    };
    let mut linear = 0.0f64;
    let mut absolute = 0.0f64;
    let mut off_line = 0;
    for k in 0..21 {
        let a = -1.0 + 0.1 * k as f64;
        for &s in &points {
            linear = linear.max(residual(&EntropyPair::Linear(a), s));
            if (s.rho + a * s.u - a * a).abs() > 1e-3 {
                absolute = absolute.max(residual(&EntropyPair::Absolute(a), s));
                off_line += 1;
            }
        }
    }
    let global = points.iter().map(|&s| residual(&EntropyPair::Global, s)).fold(0.0, f64::max);
    let worst = linear.max(absolute).max(global);
    CriterionOutcome::new(
        2,
        "exact algebra",
        mismatches == 0 && worst < ENTROPY_TOL,
        format!(
            "{mismatches} closed-form mismatches over 9 spin pairs; entropy residuals linear {linear:.1e}, \
             absolute {absolute:.1e} ({off_line} points), global {global:.1e}; need < {ENTROPY_TOL:e}"
        ),
    )
}

fn eigenvalues() -> CriterionOutcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let rho: f64 = rng.random_range(0.0..1.0);
        let t: f64 = rng.random_range(-1.0..1.0);
        let s = MacroState::new(rho, t * (1.0 - rho));
        let (hi, lo) = char_speeds(s).unwrap();
        let j = flux_jacobian(s);
        let ev = Matrix2::new(j[0][0], j[0][1], j[1][0], j[1][1]).eigenvalues().unwrap();
        let (a, b) = if ev[0] >= ev[1] { (ev[0], ev[1]) } else { (ev[1], ev[0]) };
        worst = worst.max((a - hi).abs()).max((b - lo).abs());
    }
    CriterionOutcome::new(
        3,
        "eigenvalue identity",
        worst < EIGEN_TOL,
        format!("max |char_speeds - eig(DF)| = {worst:.2e} at 1000 points; need < {EIGEN_TOL:e}"),
    )
}

fn ctmc() -> CriterionOutcome {
    let p = DynamicsParams::new(4, 0.5).unwrap();
    let g = generator_matrix(&p).unwrap();
    let start = Configuration::from_values(&[-1, 0, 1, 0]).unwrap();
    let row = start.index() as usize;
    let exit = -g.diag[row];
    let sim = Simulator::new(p, start.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut counts = vec![0usize; g.dim()];
    let mut wait = 0.0;
    for _ in 0..CTMC_EVENTS {
        let mut s = sim.clone();
        match s.step(&mut rng) {
            StepOutcome::Event { time, .. } => {
                counts[s.config().index() as usize] += 1;
                wait += time;
            }
            StepOutcome::Absorbing => unreachable!("start state has positive rates"),
        }
    }
    let nf = CTMC_EVENTS as f64;
    let mut jump_z = 0.0f64;
    for &(k, w) in &g.rows[row] {
        let q = w / exit;
        let se = (q * (1.0 - q) / nf).sqrt();
        jump_z = jump_z.max((counts[k as usize] as f64 / nf - q).abs() / se);
    }
    let wait_z = (wait / nf - 1.0 / exit).abs() / (1.0 / exit / nf.sqrt());

    let t = 0.1;
    let times = time_grid(t, 1);
    let f = |c: &Configuration| c.xi(0) as f64 + 2.0 * (c.eta(1) * c.xi(2)) as f64;
    let fvec: Vec<f64> = (0..g.dim() as u64).map(|i| f(&Configuration::from_index(i, 4))).collect();
    let exact = g.transient_apply(&fvec, t)[row];
    let mut sum = 0.0;
    let mut sq = 0.0;
    for _ in 0..DYNKIN_REPLICAS {
        let rec = simulate(p, start.clone(), &times, None, &mut rng).unwrap();
        let v = f(rec.snapshots.last().unwrap());
        sum += v;
        sq += v * v;
    }
    let m = DYNKIN_REPLICAS as f64;
    let mean = sum / m;
    let se = ((sq / m - mean * mean) / (m - 1.0)).sqrt();
    let dynkin_z = (mean - exact).abs() / se;
    CriterionOutcome::new(
        4,
        "CTMC correctness",
        jump_z <= CTMC_SE && wait_z <= CTMC_SE && dynkin_z <= CTMC_SE,
        format!(
            "single event: max jump z {jump_z:.2}, holding-time z {wait_z:.2} over {CTMC_EVENTS} events; \
             E f(X_0.1) = {mean:.5} vs exp(tG)f = {exact:.5}, z {dynkin_z:.2}; need <= {CTMC_SE}"
        ),
    )
}

fn pde_sanity() -> CriterionOutcome {
    let nx = 1024;
    let burgers = InitialProfile::Riemann { left: [0.0, 0.5], right: [0.0, -0.5], x0: 0.5 };
    let f = solve_reference(&burgers, &PdeConfig::new(nx, 0.5, 1)).unwrap();
    let last = &f.u[nx..];
    let centre = (nx / 4..3 * nx / 4).find(|&i| last[i] >= 0.0 && last[i + 1] < 0.0);
    let drift = centre.map_or(f64::INFINITY, |i| {
        let x = f.xs[i] + (f.xs[i + 1] - f.xs[i]) * last[i] / (last[i] - last[i + 1]);
        (x - 0.5).abs() * nx as f64
    });
    let cfg = ExperimentConfig::new(Mode::Pde);
    let riemann = solve_reference(&cfg.profile, &PdeConfig::new(nx, cfg.t_final, 1)).unwrap();
    let mut mass = 0.0f64;
    for d in [&f.diagnostics, &riemann.diagnostics] {
        mass = mass.max((d.final_mass[0] - d.initial_mass[0]).abs()).max((d.final_mass[1] - d.initial_mass[1]).abs());
    }
    let (_, conv) = pde_pipeline(&cfg).unwrap();
    CriterionOutcome::new(
        13,
        "PDE solver sanity",
        drift < SHOCK_CELLS && mass < MASS_TOL && conv.factor >= SELF_CONVERGENCE,
        format!(
            "Burgers shock drift {drift:.3} cells at nx = {nx} (< {SHOCK_CELLS}); mass drift {mass:.1e} (< {MASS_TOL:e}); \
             self-convergence factor {:.3} over nx = {:?} (>= {SELF_CONVERGENCE})",
            conv.factor, conv.nx
        ),
    )
}

/// Tartar and Dirac defects of the per-point Young measure of a PDE field.
fn point_mass_factorization() -> (bool, String) {
    let cfg = ExperimentConfig::new(Mode::Pde);
    let f = solve_reference(&cfg.profile, &PdeConfig::new(256, cfg.t_final, 20)).unwrap();
    let nu = build_young_measure(&[f.view()], CellPartition::per_sample(&f.times, &f.xs), 1).unwrap();
    let grid = default_family_grid();
    let tartar = family_tartar_defect(&nu, &grid, &grid);
    let dirac = nu.cells.iter().map(|c| dirac_defect(c, &grid)).fold(0.0, f64::max);
    (
        tartar.abs() < FACTORIZATION_TOL && dirac < FACTORIZATION_TOL,
        format!("point masses: tartar {tartar:.1e}, dirac {dirac:.1e} (< {FACTORIZATION_TOL:e})"),
    )
}

/// Time-reversed Burgers shock, a rarefaction run backwards.
fn negative_control() -> (bool, String) {
    let init = InitialProfile::Riemann { left: [0.0, 0.5], right: [0.0, -0.5], x0: 0.5 };
    let f = solve_reference(&init, &PdeConfig::new(256, 0.5, 50)).unwrap().time_reversed();
    let nu = build_young_measure(&[f.view()], CellPartition::per_sample(&f.times, &f.xs), 1).unwrap();
    let worst = test_function_bank(9, 0.5)
        .iter()
        .map(|phi| mv_entropy_residual(&nu, &EntropyPair::Global, phi))
        .fold(f64::INFINITY, f64::min);
    (worst < NEGATIVE_CONTROL, format!("anti-entropy control residual {worst:.3e} (< {NEGATIVE_CONTROL})"))
}

fn and(mut c: CriterionOutcome, extra: (bool, String)) -> CriterionOutcome {
    c.passed &= extra.0;
    c.detail = format!("{}; {}", c.detail, extra.1);
    c
}

fn sweep_outcomes() -> Vec<CriterionOutcome> {
    let mut cfg = ExperimentConfig::new(Mode::Sweep);
    if let Some(r) = std::env::var("ACCEPTANCE_REPLICAS").ok().and_then(|v| v.parse().ok()) {
        cfg.replicas = r;
    }
    let norm = validate_config(&cfg).unwrap();
    let summary = sweep(&norm).unwrap();
    assert_eq!(reference_solution(&cfg).unwrap().nx, cfg.reference_nx);
    summary
        .criteria
        .into_iter()
        .map(|c| match c.id {
            11 => and(c, point_mass_factorization()),
            12 => and(c, negative_control()),
            _ => c,
        })
        .collect()
}

fn spectral_outcomes() -> Vec<CriterionOutcome> {
    let cfg = ExperimentConfig::new(Mode::LemmaCheck);
    let rows = spectral_table(&cfg).unwrap();
    let report = lemma_check(&cfg).unwrap();
    vec![criteria::gap_law(&rows), criteria::lsi_envelope(&report), criteria::exp_moment_bounds(&report.certificates)]
}

type Stage = fn() -> Vec<CriterionOutcome>;

fn main() {
    let start = Instant::now();
    let mut outcomes = Vec::new();
    let stages: [(&str, Stage); 4] = [
        ("exact checks", || vec![stationarity(), algebra(), eigenvalues(), ctmc()]),
        ("spectral", spectral_outcomes),
        ("sweep", sweep_outcomes),
        ("pde", || vec![pde_sanity()]),
    ];
    for (name, stage) in stages {
        let t = Instant::now();
        let out = stage();
        for c in &out {
            println!("{}", c.line());
        }
        eprintln!("  ({name}: {:.1} s)", t.elapsed().as_secs_f64());
        outcomes.extend(out);
    }
    outcomes.sort_by_key(|c| c.id);
    let failed: Vec<u32> = outcomes.iter().filter(|c| !c.passed).map(|c| c.id).collect();
    println!(
        "acceptance: {}/{} criteria passed{} in {:.0} s",
        outcomes.len() - failed.len(),
        outcomes.len(),
        if failed.is_empty() { String::new() } else { format!(", failing {failed:?}") },
        start.elapsed().as_secs_f64()
    );
    if !failed.is_empty() && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
