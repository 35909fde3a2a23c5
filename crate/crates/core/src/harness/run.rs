//! Pipelines behind each mode and the files they write.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::{DerivedParams, ExperimentConfig, Mode, NormalizedConfig};
use super::criteria::{self, CriterionOutcome};
use super::fit::{loglog_fit, SlopeFit};
use super::manifest::{inventory, ReplicaSeed, RunManifest, StageStatus};
use crate::block::{snapshot_fields, Channel, CosineKernel, SpaceTimeField};
use crate::compactness::{
    build_young_measure, compactness_report, default_family_grid, CellPartition, CompactnessReport, MIN_CELL_SAMPLES,
};
use crate::dynamics::{sample_initial_profile, simulate, time_grid};
use crate::equilibrium::{feasible_hyperplanes, hyperplane_counts, hyperplane_size, LocalObservable};
use crate::error::{Error, Result};
use crate::pde::{
    l1_distance_to, self_convergence, solve_reference, test_function_bank, FieldView, PdeConfig, PdeField,
    SelfConvergence,
};
use crate::production::{decompose_replica, mean_se, DecompositionReport, ReplicaTerms};
use crate::spectral::{
    build_hyperplane, certify_gamma, entropy_decomposition, lsi_ratio_search, lsi_violations, max_admissible_gamma,
    random_density, spectral_gap, GammaCertificate, MomentMode, MomentTable,
};

/// Seed and ChaCha stream of replica `r` at lattice size `n`.
pub fn replica_seed(cfg: &ExperimentConfig, n: usize, replica: usize) -> ReplicaSeed {
    ReplicaSeed { n, replica, seed: cfg.seed, stream: ((n as u64) << 20) | replica as u64 }
}

pub fn all_seeds(norm: &NormalizedConfig) -> Vec<ReplicaSeed> {
    norm.derived
        .iter()
        .flat_map(|d| (0..norm.config.replicas).map(move |r| replica_seed(&norm.config, d.n, r)))
        .collect()
}

/// Outputs of one simulated replica.
#[derive(Clone, Debug)]
pub struct ReplicaOutput {
    pub seed: ReplicaSeed,
    pub events: u64,
    pub terms: Option<ReplicaTerms>,
    pub field: SpaceTimeField,
}

impl ReplicaOutput {
    pub fn view(&self) -> Result<FieldView<'_>> {
        Ok(FieldView {
            times: &self.field.times,
            xs: &self.field.xs,
            rho: self.field.require("eta_hat")?,
            u: self.field.require("xi_hat")?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Ensemble {
    pub derived: DerivedParams,
    pub replicas: Vec<ReplicaOutput>,
}

impl Ensemble {
    pub fn views(&self) -> Result<Vec<FieldView<'_>>> {
        self.replicas.iter().map(|r| r.view()).collect()
    }
}

/// `eta_hat` and `xi_hat`.
pub fn density_channels() -> Vec<Channel> {
    Channel::standard().into_iter().take(2).collect()
}

/// Simulates every replica at one lattice size, in parallel.
pub fn simulate_ensemble(
    norm: &NormalizedConfig,
    d: &DerivedParams,
    channels: &[Channel],
    decompose: bool,
) -> Result<Ensemble> {
    let cfg = &norm.config;
    let pair = norm.pair();
    let bank = test_function_bank(cfg.bank_size, cfg.t_final);
    let params = d.dynamics()?;
    let times = time_grid(cfg.t_final, cfg.snapshots);
    let replicas = (0..cfg.replicas)
        .into_par_iter()
        .map(|r| {
            let seed = replica_seed(cfg, d.n, r);
            let mut rng = ChaCha8Rng::seed_from_u64(seed.seed);
            rng.set_stream(seed.stream);
            let init = sample_initial_profile(&cfg.profile, d.n, &mut rng)?;
            let mut rec = simulate(params, init, &times, cfg.event_budget, &mut rng)?;
            rec.seed = seed.seed;
            rec.stream = seed.stream;
            if rec.truncated {
                return Err(Error::EventBudgetExhausted(rec.events));
            }
            let terms = if decompose { Some(decompose_replica(&rec, &pair, &CosineKernel, d.l, &bank)?) } else { None };
            let field = snapshot_fields(&rec, channels, d.l, &CosineKernel, d.stride)?;
            Ok(ReplicaOutput { seed, events: rec.events, terms, field })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Ensemble { derived: *d, replicas })
}

/// Fine-grid entropy solution on the snapshot times of the config.
pub fn reference_solution(cfg: &ExperimentConfig) -> Result<PdeField> {
    solve_reference(&cfg.profile, &PdeConfig::new(cfg.reference_nx, cfg.t_final, cfg.snapshots))
}

/// Everything measured at one lattice size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub derived: DerivedParams,
    pub decomposition: Option<DecompositionReport>,
    pub compactness: CompactnessReport,
    /// Mean and standard error over replicas.
    pub l1_distance: (f64, f64),
    pub mean_events: f64,
    /// `max(0, -min_phi E(weak residual))`.
    pub weak_residual_floor: Option<f64>,
    /// `max(0, -min_phi mv residual)` of the pooled Young measure.
    pub mv_residual_floor: f64,
}

impl SweepPoint {
    pub fn n(&self) -> usize {
        self.derived.n
    }
}

fn floor_of(values: impl Iterator<Item = f64>) -> f64 {
    (-values.fold(f64::INFINITY, f64::min)).max(0.0)
}

pub fn summarize_ensemble(norm: &NormalizedConfig, ens: &Ensemble, reference: &PdeField) -> Result<SweepPoint> {
    let cfg = &norm.config;
    let d = &ens.derived;
    let pair = norm.pair();
    let bank = test_function_bank(cfg.bank_size, cfg.t_final);
    let views = ens.views()?;
    let first = views.first().ok_or_else(|| Error::InvalidParameter("empty ensemble".into()))?;
    let partition = CellPartition::uniform(first.times, first.xs, cfg.cells.time, cfg.cells.space)?;
    let nu = build_young_measure(&views, partition, MIN_CELL_SAMPLES)?;
    let compactness =
        compactness_report(&nu, d.n, d.l, ens.replicas.len(), &default_family_grid(), &pair, &bank, Some(reference));
    let l1: Vec<f64> = views.iter().map(|v| l1_distance_to(*v, reference)).collect();
    let terms: Vec<ReplicaTerms> = ens.replicas.iter().filter_map(|r| r.terms.clone()).collect();
    let decomposition = (!terms.is_empty())
        .then(|| DecompositionReport::from_replicas(&d.dynamics().expect("validated"), d.l, &pair, &terms));
    let weak_residual_floor = decomposition.as_ref().map(|r| floor_of(r.weak_residual.iter().map(|w| w.0)));
    Ok(SweepPoint {
        derived: *d,
        weak_residual_floor,
        mv_residual_floor: floor_of(compactness.mv_entropy_residual.iter().copied()),
        decomposition,
        compactness,
        l1_distance: mean_se(&l1),
        mean_events: ens.replicas.iter().map(|r| r.events as f64).sum::<f64>() / ens.replicas.len() as f64,
    })
}

/// Power-law fit of a measured quantity against its predicted scale.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedFit {
    pub quantity: String,
    pub regressor: String,
    pub fit: Option<SlopeFit>,
    pub target: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Values of a statistic at two consecutive lattice sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendPair {
    pub statistic: String,
    pub n_from: usize,
    pub n_to: usize,
    pub from: f64,
    pub to: f64,
    pub decreased: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub points: Vec<SweepPoint>,
    pub fits: Vec<NamedFit>,
    pub trends: Vec<TrendPair>,
    pub criteria: Vec<CriterionOutcome>,
}

/// Regressors: `l^2/(n^2 sigma)`, `n/l^2`, `n^2 sigma/l^3`.
pub fn scales(d: &DerivedParams) -> [f64; 3] {
    let (n, l) = (d.n as f64, d.l as f64);
    [l * l / (n * n * d.sigma), n / (l * l), n * n * d.sigma / (l * l * l)]
}

/// Scalar statistics of a sweep point, by name.
pub fn statistics(p: &SweepPoint) -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();
    if let Some(r) = &p.decomposition {
        out.extend([
            ("sup_a1", r.sup_a1.0),
            ("sup_a2", r.sup_a2.0),
            ("b1_hm1", r.b1_hm1.0),
            ("b2_hm1", r.b2_hm1.0),
            ("c1_l1", r.c1_l1.0),
            ("c2_l1", r.c2_l1.0),
            ("martingale_l2", r.martingale_l2.0),
            ("replacement_mse_psi", r.apriori.replacement_mse_psi.0),
            ("replacement_mse_phi", r.apriori.replacement_mse_phi.0),
            ("sigma_gradient_energy", p.derived.sigma * r.apriori.gradient_energy.0),
            ("weak_residual_floor", p.weak_residual_floor.unwrap_or(f64::NAN)),
        ]);
    }
    let c = &p.compactness;
    out.extend([
        ("l1_distance", p.l1_distance.0),
        ("tartar_defect", c.tartar_defect),
        ("dirac_defect_max", c.dirac_defect_max),
        ("dirac_defect_mean", c.dirac_defect_mean),
        ("max_cell_variance", c.max_cell_variance),
        ("mean_cell_variance", c.mean_cell_variance),
        ("cell_mean_l1", c.cell_mean_l1.unwrap_or(f64::NAN)),
        ("mv_residual_floor", p.mv_residual_floor),
    ]);
    out
}

pub fn statistic(p: &SweepPoint, name: &str) -> Option<f64> {
    statistics(p).into_iter().find(|(k, _)| *k == name).map(|(_, v)| v)
}

pub fn fits(points: &[SweepPoint]) -> Vec<NamedFit> {
    let specs = [
        ("replacement_mse_psi", "l^2/(n^2 sigma)", 0, criteria::REPLACEMENT_SLOPE_TOL),
        ("replacement_mse_phi", "l^2/(n^2 sigma)", 0, criteria::REPLACEMENT_SLOPE_TOL),
        ("sup_a1", "n/l^2", 1, criteria::TERM_SLOPE_TOL),
        ("sup_a2", "n^2 sigma/l^3", 2, criteria::TERM_SLOPE_TOL),
    ];
    specs
        .iter()
        .filter_map(|&(q, reg, k, tol)| {
            let ys: Option<Vec<f64>> = points.iter().map(|p| statistic(p, q)).collect();
            let ys = ys?;
            let xs: Vec<f64> = points.iter().map(|p| scales(&p.derived)[k]).collect();
            let fit = loglog_fit(&xs, &ys);
            Some(NamedFit {
                quantity: q.into(),
                regressor: reg.into(),
                passed: fit.is_some_and(|f| f.within(1.0, tol)),
                fit,
                target: 1.0,
                tolerance: tol,
            })
        })
        .collect()
}

pub fn trends(points: &[SweepPoint]) -> Vec<TrendPair> {
    let mut out = Vec::new();
    let Some(first) = points.first() else { return out };
    for (name, _) in statistics(first) {
        for w in points.windows(2) {
            if let (Some(a), Some(b)) = (statistic(&w[0], name), statistic(&w[1], name)) {
                out.push(TrendPair {
                    statistic: name.into(),
                    n_from: w[0].n(),
                    n_to: w[1].n(),
                    from: a,
                    to: b,
                    decreased: b < a,
                });
            }
        }
    }
    out
}

/// Full n-sweep: ensembles with decomposition, compactness and reference comparison.
pub fn sweep(norm: &NormalizedConfig) -> Result<SweepSummary> {
    let reference = reference_solution(&norm.config)?;
    let mut points = Vec::new();
    for d in &norm.derived {
        let ens = simulate_ensemble(norm, d, &density_channels(), true)?;
        points.push(summarize_ensemble(norm, &ens, &reference)?);
    }
    Ok(SweepSummary {
        fits: fits(&points),
        trends: trends(&points),
        criteria: criteria::sweep_criteria(&points),
        points,
    })
}

/// Ensembles with compactness diagnostics only.
pub fn diagnose(norm: &NormalizedConfig) -> Result<SweepSummary> {
    let reference = reference_solution(&norm.config)?;
    let mut points = Vec::new();
    for d in &norm.derived {
        let ens = simulate_ensemble(norm, d, &density_channels(), false)?;
        points.push(summarize_ensemble(norm, &ens, &reference)?);
    }
    Ok(SweepSummary {
        fits: Vec::new(),
        trends: trends(&points),
        criteria: vec![criteria::compactness_trends(&points), criteria::l1_trend(&points)],
        points,
    })
}

/// One row of the spectral table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralRow {
    pub l: usize,
    pub holes: i64,
    pub charge: i64,
    pub dimension: usize,
    pub gap: f64,
    pub gap_l2: f64,
    pub multiplicity: Option<usize>,
    pub lsi_ratio: Option<f64>,
    pub ratio_l2: Option<f64>,
    pub gamma0_m0: Option<f64>,
    pub gamma0_m1: Option<f64>,
}

fn hyperplane_gamma(l: usize, holes: i64, charge: i64, mode: MomentMode, bound: f64) -> Result<Option<f64>> {
    let tables = [LocalObservable::PSI, LocalObservable::PHI]
        .iter()
        .map(|o| MomentTable::new(l, holes, charge, o, &CosineKernel, mode))
        .collect::<Result<Vec<_>>>()?;
    let g = max_admissible_gamma(&tables.iter().collect::<Vec<_>>(), bound);
    Ok(g.is_finite().then_some(g))
}

/// Gap, log-Sobolev ratio (inside the LSI range) and per-hyperplane `gamma_0`
/// for every non-trivial hyperplane with `l_min <= l <= l_max`.
pub fn spectral_table(cfg: &ExperimentConfig) -> Result<Vec<SpectralRow>> {
    let s = &cfg.spectral;
    let jobs: Vec<(usize, i64, i64)> = (s.l_min..=s.l_max)
        .flat_map(|l| feasible_hyperplanes(l).into_iter().map(move |(n, z)| (l, n, z)))
        .filter(|&(l, n, z)| hyperplane_counts(l, n, z).map(hyperplane_size).unwrap_or(0) >= 2)
        .collect();
    jobs.into_par_iter()
        .map(|(l, holes, charge)| {
            let m = build_hyperplane(l, holes, charge)?;
            let gap = spectral_gap(&m)?;
            let l2 = (l * l) as f64;
            let lsi = if (s.lsi_l_min..=s.lsi_l_max).contains(&l) {
                Some(lsi_ratio_search(&m, s.lsi_trials, s.lsi_steps, cfg.seed)?.ratio)
            } else {
                None
            };
            Ok(SpectralRow {
                l,
                holes,
                charge,
                dimension: m.dim(),
                gap: gap.gap,
                gap_l2: gap.gap * l2,
                multiplicity: gap.multiplicity,
                lsi_ratio: lsi,
                ratio_l2: lsi.map(|r| r / l2),
                gamma0_m0: hyperplane_gamma(l, holes, charge, MomentMode::Centered, s.moment_bound)?,
                gamma0_m1: hyperplane_gamma(l, holes, charge, MomentMode::Replacement, s.moment_bound)?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LsiEnvelopeRow {
    pub l: usize,
    pub holes: i64,
    pub charge: i64,
    pub dimension: usize,
    pub ratio: f64,
    pub ratio_l2: f64,
    pub near_constant: f64,
    pub violations: usize,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LemmaReport {
    pub certificates: Vec<GammaCertificate>,
    pub lsi: Vec<LsiEnvelopeRow>,
    /// `max ratio / l^2` over the envelope rows.
    pub aleph: f64,
    /// `max / min` of `ratio / l^2` over the envelope rows.
    pub band: f64,
    /// Largest `|H - marginal - conditional|` over random densities.
    pub decomposition_error: f64,
}

/// Hyperplanes `N = floor(l/3)`, `Z in {0, 1}` of the log-Sobolev envelope.
pub fn lsi_envelope_hyperplanes(l_min: usize, l_max: usize) -> Vec<(usize, i64, i64)> {
    (l_min..=l_max)
        .flat_map(|l| [0i64, 1].into_iter().map(move |z| (l, (l / 3) as i64, z)))
        .filter(|&(l, n, z)| hyperplane_counts(l, n, z).map(hyperplane_size).unwrap_or(0) >= 2)
        .collect()
}

/// `gamma_0` certificates in both modes, the log-Sobolev envelope with its
/// random-density check, and the entropy decomposition identity.
pub fn lemma_check(cfg: &ExperimentConfig) -> Result<LemmaReport> {
    let s = &cfg.spectral;
    let obs = [LocalObservable::PSI, LocalObservable::PHI];
    let certificates = s
        .lemma_l
        .par_iter()
        .flat_map_iter(|&l| [MomentMode::Centered, MomentMode::Replacement].map(move |m| (l, m)))
        .map(|(l, mode)| certify_gamma(l, &obs, &CosineKernel, mode, s.moment_bound))
        .collect::<Result<Vec<_>>>()?;
    let searched = lsi_envelope_hyperplanes(s.lsi_l_min, s.lsi_l_max)
        .into_par_iter()
        .map(|(l, holes, charge)| {
            let m = build_hyperplane(l, holes, charge)?;
            let found = lsi_ratio_search(&m, s.lsi_trials, s.lsi_steps, cfg.seed)?;
            Ok((m, found.ratio, found.near_constant))
        })
        .collect::<Result<Vec<_>>>()?;
    let ratios_l2: Vec<f64> = searched.iter().map(|(m, r, _)| r / (m.l * m.l) as f64).collect();
    let aleph = ratios_l2.iter().cloned().fold(0.0, f64::max);
    let band = aleph / ratios_l2.iter().cloned().fold(f64::INFINITY, f64::min);
    let lsi = searched
        .par_iter()
        .zip(&ratios_l2)
        .enumerate()
        .map(|(k, ((m, ratio, near), rl2))| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(k as u64);
            let bound = aleph * (m.l * m.l) as f64;
            Ok(LsiEnvelopeRow {
                l: m.l,
                holes: m.holes,
                charge: m.charge,
                dimension: m.dim(),
                ratio: *ratio,
                ratio_l2: *rl2,
                near_constant: *near,
                violations: lsi_violations(m, bound, s.lsi_samples, &mut rng)?,
                samples: s.lsi_samples,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut decomposition_error = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for l in 3..=6 {
        for (n, z) in feasible_hyperplanes(l) {
            let m = build_hyperplane(l, n, z)?;
            for _ in 0..20 {
                let h = random_density(m.dim(), 0.5, &mut rng)?;
                let e = entropy_decomposition(&m, &h)?;
                decomposition_error = decomposition_error.max((e.total - e.marginal - e.conditional).abs());
            }
        }
    }
    Ok(LemmaReport { certificates, lsi, aleph, band, decomposition_error })
}

/// Reference solve at `pde_nx` and the self-convergence check from it.
pub fn pde_pipeline(cfg: &ExperimentConfig) -> Result<(PdeField, SelfConvergence)> {
    let base = PdeConfig::new(cfg.pde_nx, cfg.t_final, cfg.snapshots);
    let field = solve_reference(&cfg.profile, &base)?;
    let conv = self_convergence(&cfg.profile, &base)?;
    Ok((field, conv))
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(serde_json::to_string_pretty(value)?.as_bytes())?;
    f.write_all(b"\n")?;
    Ok(())
}

pub fn write_criteria(dir: &Path, outcomes: &[CriterionOutcome]) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("criteria.csv"))?;
    w.write_record(["id", "name", "passed", "detail"])?;
    for c in outcomes {
        w.write_record([c.id.to_string(), c.name.clone(), c.passed.to_string(), c.detail.clone()])?;
    }
    w.flush()?;
    Ok(())
}

/// Reads back `criteria.csv` if the run wrote one.
pub fn read_criteria(dir: &Path) -> Result<Option<Vec<CriterionOutcome>>> {
    let path = dir.join("criteria.csv");
    if !path.exists() {
        return Ok(None);
    }
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let field = |i: usize| rec.get(i).unwrap_or_default();
        let id = field(0).parse().map_err(|_| Error::InvalidParameter(format!("bad criterion id {:?}", field(0))))?;
        out.push(CriterionOutcome::new(id, field(1), field(2) == "true", field(3).to_string()));
    }
    Ok(Some(out))
}

/// `sweep_terms.csv`, `sweep_pairings.csv`, `sweep_fits.csv`, `sweep_trends.csv`,
/// `criteria.csv`, per-n JSON reports and Young-measure cell tables.
pub fn write_sweep(dir: &Path, summary: &SweepSummary) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("sweep_terms.csv"))?;
    w.write_record(["n", "sigma", "l", "quantity", "mean", "se"])?;
    for p in &summary.points {
        let d = &p.derived;
        let mut rows: Vec<(String, f64, f64)> = Vec::new();
        if let Some(r) = &p.decomposition {
            for (q, v) in [
                ("sup_a1", r.sup_a1),
                ("sup_a2", r.sup_a2),
                ("b1_hm1", r.b1_hm1),
                ("b2_hm1", r.b2_hm1),
                ("c1_l1", r.c1_l1),
                ("c2_l1", r.c2_l1),
                ("martingale_l2", r.martingale_l2),
                ("replacement_mse_psi", r.apriori.replacement_mse_psi),
                ("replacement_mse_phi", r.apriori.replacement_mse_phi),
                ("gradient_energy", r.apriori.gradient_energy),
                ("flux_gradient_energy", r.apriori.flux_gradient_energy),
            ] {
                rows.push((q.into(), v.0, v.1));
            }
        }
        rows.push(("l1_distance".into(), p.l1_distance.0, p.l1_distance.1));
        for (q, v) in statistics(p) {
            if !rows.iter().any(|r| r.0 == q) {
                rows.push((q.into(), v, f64::NAN));
            }
        }
        for (q, m, se) in rows {
            w.write_record([d.n.to_string(), d.sigma.to_string(), d.l.to_string(), q, m.to_string(), se.to_string()])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("sweep_pairings.csv"))?;
    w.write_record([
        "n",
        "phi",
        "martingale_mean",
        "martingale_se",
        "weak_residual_mean",
        "weak_residual_se",
        "dissipation",
        "mv_residual",
    ])?;
    for p in &summary.points {
        let Some(r) = &p.decomposition else { continue };
        for (k, m) in r.martingale_pairing.iter().enumerate() {
            w.write_record([
                p.n().to_string(),
                k.to_string(),
                m.0.to_string(),
                m.1.to_string(),
                r.weak_residual[k].0.to_string(),
                r.weak_residual[k].1.to_string(),
                r.dissipation[k].to_string(),
                p.compactness.mv_entropy_residual[k].to_string(),
            ])?;
        }
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("sweep_fits.csv"))?;
    w.write_record(["quantity", "regressor", "slope", "se", "ci_low", "ci_high", "target", "tolerance", "passed"])?;
    for f in &summary.fits {
        let g = |h: fn(&SlopeFit) -> f64| opt(f.fit.as_ref().map(h));
        w.write_record([
            f.quantity.clone(),
            f.regressor.clone(),
            g(|x| x.slope),
            g(|x| x.se),
            g(|x| x.ci_low),
            g(|x| x.ci_high),
            f.target.to_string(),
            f.tolerance.to_string(),
            f.passed.to_string(),
        ])?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join("sweep_trends.csv"))?;
    w.write_record(["statistic", "n_from", "n_to", "from", "to", "decreased"])?;
    for t in &summary.trends {
        w.write_record([
            t.statistic.clone(),
            t.n_from.to_string(),
            t.n_to.to_string(),
            t.from.to_string(),
            t.to.to_string(),
            t.decreased.to_string(),
        ])?;
    }
    w.flush()?;

    for p in &summary.points {
        if let Some(r) = &p.decomposition {
            write_json(&dir.join(format!("decomposition_n{}.json", p.n())), r)?;
        }
        write_json(&dir.join(format!("compactness_n{}.json", p.n())), &p.compactness)?;
        let mut w = csv::Writer::from_path(dir.join(format!("young_cells_n{}.csv", p.n())))?;
        w.write_record(["t_cell", "x_cell", "samples", "mean_rho", "mean_u", "var_rho", "var_u", "cov"])?;
        for c in &p.compactness.cells {
            w.write_record([
                c.t_index.to_string(),
                c.x_index.to_string(),
                c.samples.to_string(),
                c.mean_rho.to_string(),
                c.mean_u.to_string(),
                c.var_rho.to_string(),
                c.var_u.to_string(),
                c.cov.to_string(),
            ])?;
        }
        w.flush()?;
    }
    write_criteria(dir, &summary.criteria)
}

pub fn write_spectral(dir: &Path, rows: &[SpectralRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("spectral.csv"))?;
    w.write_record([
        "l",
        "N",
        "Z",
        "dimension",
        "gap",
        "gap_l2",
        "multiplicity",
        "lsi_ratio",
        "ratio_l2",
        "gamma0_M0",
        "gamma0_M1",
    ])?;
    for r in rows {
        w.write_record([
            r.l.to_string(),
            r.holes.to_string(),
            r.charge.to_string(),
            r.dimension.to_string(),
            r.gap.to_string(),
            r.gap_l2.to_string(),
            r.multiplicity.map_or(String::new(), |m| m.to_string()),
            opt(r.lsi_ratio),
            opt(r.ratio_l2),
            opt(r.gamma0_m0),
            opt(r.gamma0_m1),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_lemma(dir: &Path, report: &LemmaReport) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("gamma0.csv"))?;
    w.write_record(["l", "mode", "gamma0", "worst_moment", "bound"])?;
    for c in &report.certificates {
        w.write_record([
            c.l.to_string(),
            c.mode.tag().to_string(),
            c.gamma0.to_string(),
            c.worst_moment.to_string(),
            c.bound.to_string(),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("exp_moments.csv"))?;
    w.write_record(["l", "mode", "N", "Z", "gamma"])?;
    for c in &report.certificates {
        for (n, z, g) in &c.per_hyperplane {
            w.write_record([c.l.to_string(), c.mode.tag().to_string(), n.to_string(), z.to_string(), opt(*g)])?;
        }
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(dir.join("lsi_envelope.csv"))?;
    w.write_record(["l", "N", "Z", "dimension", "ratio", "ratio_l2", "near_constant", "violations", "samples"])?;
    for r in &report.lsi {
        w.write_record([
            r.l.to_string(),
            r.holes.to_string(),
            r.charge.to_string(),
            r.dimension.to_string(),
            r.ratio.to_string(),
            r.ratio_l2.to_string(),
            r.near_constant.to_string(),
            r.violations.to_string(),
            r.samples.to_string(),
        ])?;
    }
    w.flush()?;
    write_json(&dir.join("lemma_report.json"), report)
}

pub fn write_pde(dir: &Path, field: &PdeField, conv: &SelfConvergence) -> Result<()> {
    let mut w = csv::Writer::from_path(dir.join("pde_field.csv"))?;
    w.write_record(["t", "x", "rho", "u"])?;
    for (k, t) in field.times.iter().enumerate() {
        for (i, x) in field.xs.iter().enumerate() {
            let s = field.view().state(k, i);
            w.write_record([t.to_string(), x.to_string(), s.rho.to_string(), s.u.to_string()])?;
        }
    }
    w.flush()?;
    write_json(&dir.join("pde_diagnostics.json"), &field.diagnostics)?;
    write_json(&dir.join("self_convergence.json"), conv)
}

fn write_simulation(dir: &Path, norm: &NormalizedConfig) -> Result<()> {
    for d in &norm.derived {
        let ens = simulate_ensemble(norm, d, &Channel::standard(), false)?;
        let mut w = csv::Writer::from_path(dir.join(format!("ensemble_n{}.csv", d.n)))?;
        w.write_record(["replica", "seed", "stream", "events"])?;
        for r in &ens.replicas {
            w.write_record([
                r.seed.replica.to_string(),
                r.seed.seed.to_string(),
                r.seed.stream.to_string(),
                r.events.to_string(),
            ])?;
            if norm.config.save_fields {
                r.field.write_csv(&dir.join(format!("fields_n{}_r{}.csv", d.n, r.seed.replica)))?;
            }
        }
        w.flush()?;
    }
    Ok(())
}

fn stage(stages: &mut Vec<StageStatus>, name: &str, f: impl FnOnce() -> Result<()>) {
    let t0 = Instant::now();
    let res = f();
    stages.push(StageStatus {
        name: name.into(),
        ok: res.is_ok(),
        seconds: t0.elapsed().as_secs_f64(),
        message: res.err().map(|e| e.to_string()),
    });
}

/// Runs the configured mode, writes its outputs and `manifest.json` into the
/// output directory, and returns the manifest. Stage failures are recorded
/// in the manifest; files written before the failure are kept.
pub fn run(norm: &NormalizedConfig) -> Result<RunManifest> {
    let cfg = &norm.config;
    let started = Instant::now();
    let started_unix =
        std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let dir = cfg.out.clone();
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    let mut stages = Vec::new();
    pool.install(|| match cfg.mode {
        Mode::Simulate => stage(&mut stages, "simulate", || write_simulation(&dir, norm)),
        Mode::Pde => stage(&mut stages, "pde", || {
            let (field, conv) = pde_pipeline(cfg)?;
            write_pde(&dir, &field, &conv)
        }),
        Mode::Sweep => stage(&mut stages, "sweep", || write_sweep(&dir, &sweep(norm)?)),
        Mode::Diagnose => stage(&mut stages, "diagnose", || write_sweep(&dir, &diagnose(norm)?)),
        Mode::Spectral => stage(&mut stages, "spectral", || {
            let rows = spectral_table(cfg)?;
            write_spectral(&dir, &rows)?;
            write_criteria(&dir, &[criteria::gap_law(&rows)])
        }),
        Mode::LemmaCheck => stage(&mut stages, "lemma-check", || {
            let report = lemma_check(cfg)?;
            write_lemma(&dir, &report)?;
            write_criteria(&dir, &[criteria::lsi_envelope(&report), criteria::exp_moment_bounds(&report.certificates)])
        }),
    });
    let seeds =
        if matches!(cfg.mode, Mode::Simulate | Mode::Sweep | Mode::Diagnose) { all_seeds(norm) } else { Vec::new() };
    let mut manifest = RunManifest {
        config: norm.clone(),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        started_unix,
        wall_seconds: 0.0,
        seeds,
        stages,
        files: inventory(&dir, "manifest.json")?,
    };
    manifest.wall_seconds = started.elapsed().as_secs_f64();
    std::fs::write(dir.join("manifest.json"), manifest.to_json()?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::config::validate_config;

    fn small(mode: Mode, out: &Path) -> NormalizedConfig {
        let mut cfg = ExperimentConfig::new(mode);
        cfg.n = vec![64];
        cfg.t_final = 0.1;
        cfg.snapshots = 20;
        cfg.replicas = 3;
        cfg.field_points = 64;
        cfg.cells.time = 2;
        cfg.cells.space = 4;
        cfg.reference_nx = 256;
        cfg.pde_nx = 64;
        cfg.bank_size = 3;
        cfg.spectral.l_max = 4;
        cfg.spectral.lsi_l_max = 4;
        cfg.spectral.lemma_l = vec![4];
        cfg.spectral.lsi_samples = 50;
        cfg.spectral.lsi_trials = 2;
        cfg.spectral.lsi_steps = 20;
        cfg.out = out.to_path_buf();
        validate_config(&cfg).unwrap()
    }

    #[test]
    fn rerun_reproduces_outputs() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let ma = run(&small(Mode::Sweep, a.path())).unwrap();
        let mb = run(&small(Mode::Sweep, b.path())).unwrap();
        assert!(ma.succeeded(), "{:?}", ma.stages);
        let key = |m: &RunManifest| {
            m.files
                .iter()
                .filter(|f| f.path != "config.toml")
                .map(|f| (f.path.clone(), f.sha256.clone()))
                .collect::<Vec<_>>()
        };
        assert_eq!(key(&ma), key(&mb));
        assert!(ma.files.iter().any(|f| f.path == "sweep_fits.csv"));
        let crit = read_criteria(a.path()).unwrap().unwrap();
        assert_eq!(crit.iter().map(|c| c.id).collect::<Vec<_>>(), vec![8, 9, 10, 11, 12]);
        assert_eq!(ma.seeds.len(), 3);
        let back = RunManifest::from_json(&std::fs::read_to_string(a.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(back.files, ma.files);
    }

    #[test]
    fn every_mode_runs() {
        for mode in [Mode::Simulate, Mode::Pde, Mode::Spectral, Mode::LemmaCheck, Mode::Diagnose] {
            let dir = tempfile::tempdir().unwrap();
            let m = run(&small(mode, dir.path())).unwrap();
            assert!(m.succeeded(), "{mode:?}: {:?}", m.stages);
            assert!(m.files.len() >= 2, "{mode:?}");
        }
    }

    #[test]
    fn failing_stage_is_recorded() {
        let dir = tempfile::tempdir().unwrap();
        let mut norm = small(Mode::Simulate, dir.path());
        norm.config.event_budget = Some(10);
        let m = run(&norm).unwrap();
        assert!(!m.succeeded());
        assert!(m.stages[0].message.as_deref().unwrap_or("").contains("budget"));
        assert!(dir.path().join("manifest.json").exists());
    }
}
