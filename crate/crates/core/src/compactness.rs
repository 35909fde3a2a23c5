//! Empirical Young measures of block fields and the compensated-compactness
//! diagnostics built from them: Tartar's commutation defect, the Dirac
//! function `g(a) = <nu, F_a> / <nu, S_a>` of the absolute family, measure-
//! valued entropy residuals and per-cell moments.
//!
//! A cell pools the samples of every replica at every grid point inside a
//! space-time rectangle; quadratures still run over the underlying grid, with
//! moments held constant on each cell.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pde::{trapezoid_weights, EntropyPair, FieldView, MacroState, PdeField, TestFunction};

/// Assignment of grid samples `(t_k, x_i)` to space-time cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellPartition {
    pub times: Vec<f64>,
    pub xs: Vec<f64>,
    pub nt_cells: usize,
    pub nx_cells: usize,
    pub time_cell: Vec<usize>,
    pub space_cell: Vec<usize>,
}

impl CellPartition {
    /// `nt_cells x nx_cells` equal rectangles of `[0, T] x [0, 1)`.
    pub fn uniform(times: &[f64], xs: &[f64], nt_cells: usize, nx_cells: usize) -> Result<Self> {
        if nt_cells == 0 || nx_cells == 0 || times.is_empty() || xs.is_empty() {
            return Err(Error::InvalidParameter("empty cell partition".into()));
        }
        let t_final = *times.last().expect("non-empty");
        let time_cell =
            times.iter().map(|&t| ((t / t_final * nt_cells as f64).floor() as usize).min(nt_cells - 1)).collect();
        let space_cell =
            xs.iter().map(|&x| ((x.rem_euclid(1.0) * nx_cells as f64).floor() as usize).min(nx_cells - 1)).collect();
        Ok(Self { times: times.to_vec(), xs: xs.to_vec(), nt_cells, nx_cells, time_cell, space_cell })
    }

    /// Every grid point its own cell.
    pub fn per_sample(times: &[f64], xs: &[f64]) -> Self {
        Self {
            times: times.to_vec(),
            xs: xs.to_vec(),
            nt_cells: times.len(),
            nx_cells: xs.len(),
            time_cell: (0..times.len()).collect(),
            space_cell: (0..xs.len()).collect(),
        }
    }

    pub fn cells(&self) -> usize {
        self.nt_cells * self.nx_cells
    }

    #[inline]
    pub fn cell_of(&self, k: usize, i: usize) -> usize {
        self.time_cell[k] * self.nx_cells + self.space_cell[i]
    }

    /// Quadrature weight (trapezoid in `t`, rectangle in `x`) of each cell.
    pub fn cell_weights(&self) -> Vec<f64> {
        let wt = trapezoid_weights(&self.times);
        let dx = 1.0 / self.xs.len() as f64;
        let mut out = vec![0.0; self.cells()];
        for (k, w) in wt.iter().enumerate() {
            for i in 0..self.xs.len() {
                out[self.cell_of(k, i)] += w * dx;
            }
        }
        out
    }
}

/// Pooled `(rho, u)` samples per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalYoungMeasure {
    pub partition: CellPartition,
    pub cells: Vec<Vec<MacroState>>,
    /// Samples moved onto the domain when pooled.
    pub clamped: usize,
}

/// Minimum pooled samples per cell for ensemble diagnostics.
pub const MIN_CELL_SAMPLES: usize = 30;

/// Pools fields sharing one grid into cells; every cell must receive at
/// least `min_samples` samples.
pub fn build_young_measure(
    fields: &[FieldView<'_>],
    partition: CellPartition,
    min_samples: usize,
) -> Result<EmpiricalYoungMeasure> {
    let mut cells = vec![Vec::new(); partition.cells()];
    let mut clamped = 0;
    for f in fields {
        if f.times.len() != partition.times.len() || f.xs.len() != partition.xs.len() {
            return Err(Error::InvalidParameter("fields do not share the partition grid".into()));
        }
        for k in 0..f.times.len() {
            for i in 0..f.xs.len() {
                let raw = f.state(k, i);
                let s = raw.project();
                if s != raw {
                    clamped += 1;
                }
                cells[partition.cell_of(k, i)].push(s);
            }
        }
    }
    if let Some((c, v)) = cells.iter().enumerate().find(|(_, v)| v.len() < min_samples) {
        return Err(Error::DegenerateCell(format!("cell {c} has {} samples (need {min_samples})", v.len())));
    }
    Ok(EmpiricalYoungMeasure { partition, cells, clamped })
}

impl EmpiricalYoungMeasure {
    /// `<nu_c, f>` for every cell.
    pub fn moments(&self, f: impl Fn(MacroState) -> f64) -> Vec<f64> {
        self.cells.iter().map(|c| c.iter().map(|&s| f(s)).sum::<f64>() / c.len().max(1) as f64).collect()
    }

    /// `sum_k w_k sum_i dx g(t_k, x_i, cell(k, i))`.
    fn integrate(&self, g: impl Fn(f64, f64, usize) -> f64) -> f64 {
        let p = &self.partition;
        let wt = trapezoid_weights(&p.times);
        let dx = 1.0 / p.xs.len() as f64;
        let mut acc = 0.0;
        for (k, (&t, &w)) in p.times.iter().zip(&wt).enumerate() {
            for (i, &x) in p.xs.iter().enumerate() {
                acc += w * dx * g(t, x, p.cell_of(k, i));
            }
        }
        acc
    }
}

/// Per-cell defect `<S1 F2 - S2 F1> - (<S1><F2> - <S2><F1>)`.
pub fn cell_tartar_defects(nu: &EmpiricalYoungMeasure, p1: &EntropyPair, p2: &EntropyPair) -> Vec<f64> {
    nu.cells
        .iter()
        .map(|c| {
            let m = c.len().max(1) as f64;
            let (mut s1, mut f1, mut s2, mut f2, mut cross) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for &s in c {
                let (a, b, x, y) = (p1.entropy(s), p1.flux(s), p2.entropy(s), p2.flux(s));
                s1 += a;
                f1 += b;
                s2 += x;
                f2 += y;
                cross += a * y - x * b;
            }
            cross / m - (s1 / m * f2 / m - s2 / m * f1 / m)
        })
        .collect()
}

/// `int int phi (<S1 F2 - S2 F1> - <S1><F2> + <S2><F1>)`.
pub fn tartar_defect(nu: &EmpiricalYoungMeasure, p1: &EntropyPair, p2: &EntropyPair, phi: &TestFunction) -> f64 {
    let d = cell_tartar_defects(nu, p1, p2);
    nu.integrate(|t, x, c| phi.value(t, x) * d[c])
}

/// Moments of one cell from which every linear/absolute family quantity follows.
#[derive(Clone, Debug, PartialEq)]
struct FamilyMoments {
    rho: f64,
    u: f64,
    rho_u: f64,
    u2: f64,
    /// Per `b`: `<|S_b|>`, `<rho |S_b|>`, `<u |S_b|>`.
    abs: Vec<[f64; 3]>,
}

fn family_moments(cell: &[MacroState], b_grid: &[f64]) -> FamilyMoments {
    let m = cell.len().max(1) as f64;
    let mut fm = FamilyMoments { rho: 0.0, u: 0.0, rho_u: 0.0, u2: 0.0, abs: vec![[0.0; 3]; b_grid.len()] };
    for s in cell {
        fm.rho += s.rho;
        fm.u += s.u;
        fm.rho_u += s.rho * s.u;
        fm.u2 += s.u * s.u;
        for (acc, &b) in fm.abs.iter_mut().zip(b_grid) {
            let v = (s.rho + b * s.u - b * b).abs();
            acc[0] += v;
            acc[1] += s.rho * v;
            acc[2] += s.u * v;
        }
    }
    fm.rho /= m;
    fm.u /= m;
    fm.rho_u /= m;
    fm.u2 /= m;
    for acc in &mut fm.abs {
        for v in acc.iter_mut() {
            *v /= m;
        }
    }
    fm
}

/// Tartar defect of `(S_a, F_a)` against `(|S_b|, (b+u)|S_b|)` from moments:
/// `S_a F_b - S_b F_a = (b - a) S_a |S_b|` pointwise.
fn family_defect(fm: &FamilyMoments, a: f64, b: f64, bi: usize) -> f64 {
    let [m0, mr, mu] = fm.abs[bi];
    let cross = (b - a) * (mr + a * mu - a * a * m0);
    let s_a = fm.rho + a * fm.u - a * a;
    let f_a = a * fm.rho - a * a * a + fm.rho_u + a * fm.u2;
    let f_b = b * m0 + mu;
    cross - (s_a * f_b - m0 * f_a)
}

/// `max_{a, b} int int |defect|` over the linear family `a_grid` against the
/// absolute family `b_grid`.
pub fn family_tartar_defect(nu: &EmpiricalYoungMeasure, a_grid: &[f64], b_grid: &[f64]) -> f64 {
    let weights = nu.partition.cell_weights();
    let moments: Vec<FamilyMoments> = nu.cells.iter().map(|c| family_moments(c, b_grid)).collect();
    let mut worst = 0.0f64;
    for &a in a_grid {
        for (bi, &b) in b_grid.iter().enumerate() {
            let total: f64 = moments.iter().zip(&weights).map(|(fm, w)| w * family_defect(fm, a, b, bi).abs()).sum();
            worst = worst.max(total);
        }
    }
    worst
}

/// Below this `<nu, |S_a|>` the cell sits on the line `S_a = 0`.
pub const DEGENERATE_TOL: f64 = 1e-10;

/// `g(a) = <nu, (a+u)|S_a|> / <nu, |S_a|>`; fails when `<nu, |S_a|>` vanishes.
pub fn dirac_g(cell: &[MacroState], a: f64) -> Result<f64> {
    let fm = family_moments(cell, &[a]);
    let [m0, _, mu] = fm.abs[0];
    if m0 < DEGENERATE_TOL {
        return Err(Error::DegenerateCell(format!("<|S_a|> = {m0:.3e} at a = {a}")));
    }
    Ok(a + mu / m0)
}

/// `max_a |g(a) - a - <nu, u>|` over the non-degenerate grid points.
pub fn dirac_defect(cell: &[MacroState], a_grid: &[f64]) -> f64 {
    let fm = family_moments(cell, a_grid);
    a_grid
        .iter()
        .zip(&fm.abs)
        .filter(|(_, m)| m[0] >= DEGENERATE_TOL)
        .map(|(_, m)| (m[2] / m[0] - fm.u).abs())
        .fold(0.0, f64::max)
}

/// `int int (phi_t <nu, S> + phi_x <nu, F>) + int phi(0) <nu_0, S>`.
pub fn mv_entropy_residual(nu: &EmpiricalYoungMeasure, pair: &EntropyPair, phi: &TestFunction) -> f64 {
    let s = nu.moments(|x| pair.entropy(x));
    let f = nu.moments(|x| pair.flux(x));
    let p = &nu.partition;
    let dx = 1.0 / p.xs.len() as f64;
    let bulk = nu.integrate(|t, x, c| phi.dt(t, x) * s[c] + phi.dx(t, x) * f[c]);
    let t0 = p.times[0];
    let initial: f64 = p.xs.iter().enumerate().map(|(i, &x)| dx * phi.value(t0, x) * s[p.cell_of(0, i)]).sum();
    bulk + initial
}

/// First and second moments of a cell.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub cell: usize,
    pub t_index: usize,
    pub x_index: usize,
    pub samples: usize,
    pub mean_rho: f64,
    pub mean_u: f64,
    pub var_rho: f64,
    pub var_u: f64,
    pub cov: f64,
}

impl CellStats {
    /// `var_rho + var_u`.
    pub fn total_variance(&self) -> f64 {
        self.var_rho + self.var_u
    }
}

pub fn cell_statistics(nu: &EmpiricalYoungMeasure) -> Vec<CellStats> {
    nu.cells
        .iter()
        .enumerate()
        .map(|(c, v)| {
            let m = v.len().max(1) as f64;
            let mr = v.iter().map(|s| s.rho).sum::<f64>() / m;
            let mu = v.iter().map(|s| s.u).sum::<f64>() / m;
            let (mut vr, mut vu, mut cv) = (0.0, 0.0, 0.0);
            for s in v {
                vr += (s.rho - mr).powi(2);
                vu += (s.u - mu).powi(2);
                cv += (s.rho - mr) * (s.u - mu);
            }
            CellStats {
                cell: c,
                t_index: c / nu.partition.nx_cells,
                x_index: c % nu.partition.nx_cells,
                samples: v.len(),
                mean_rho: mr,
                mean_u: mu,
                var_rho: vr / m,
                var_u: vu / m,
                cov: cv / m,
            }
        })
        .collect()
}

/// `sum_c |cell| (|<rho> - rho_ref| + |<u> - u_ref|)` with the reference
/// averaged over the same grid points.
pub fn cell_mean_distance(nu: &EmpiricalYoungMeasure, reference: &PdeField) -> f64 {
    let p = &nu.partition;
    let cells = p.cells();
    let mut ref_sum = vec![(0.0, 0.0, 0.0); cells];
    let wt = trapezoid_weights(&p.times);
    for (k, (&t, &w)) in p.times.iter().zip(&wt).enumerate() {
        for (i, &x) in p.xs.iter().enumerate() {
            let r = reference.interpolate(t, x);
            let e = &mut ref_sum[p.cell_of(k, i)];
            e.0 += w * r.rho;
            e.1 += w * r.u;
            e.2 += w;
        }
    }
    let stats = cell_statistics(nu);
    let weights = p.cell_weights();
    stats
        .iter()
        .zip(&ref_sum)
        .zip(&weights)
        .map(|((s, r), w)| {
            let (rr, ru) = if r.2 > 0.0 { (r.0 / r.2, r.1 / r.2) } else { (0.0, 0.0) };
            w * ((s.mean_rho - rr).abs() + (s.mean_u - ru).abs())
        })
        .sum()
}

/// Summary written by the diagnostics pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompactnessReport {
    pub n: usize,
    pub l: usize,
    pub replicas: usize,
    pub nt_cells: usize,
    pub nx_cells: usize,
    pub clamped_samples: usize,
    pub tartar_defect: f64,
    pub dirac_defect_max: f64,
    pub dirac_defect_mean: f64,
    pub max_cell_variance: f64,
    pub mean_cell_variance: f64,
    pub mv_entropy_residual: Vec<f64>,
    pub cell_mean_l1: Option<f64>,
    pub cells: Vec<CellStats>,
}

impl CompactnessReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Symmetric grid of `points` family parameters on `[-a_max, a_max]`.
pub fn family_grid(a_max: f64, points: usize) -> Vec<f64> {
    let step = 2.0 * a_max / (points.max(2) - 1) as f64;
    (0..points.max(2)).map(|k| -a_max + k as f64 * step).collect()
}

/// 41 points on `[-2, 2]`; the lines `rho + a u - a^2 = 0` sweep past the domain.
pub fn default_family_grid() -> Vec<f64> {
    family_grid(2.0, 41)
}

/// All diagnostics of one ensemble.
#[allow(clippy::too_many_arguments)]
pub fn compactness_report(
    nu: &EmpiricalYoungMeasure,
    n: usize,
    l: usize,
    replicas: usize,
    a_grid: &[f64],
    pair: &EntropyPair,
    bank: &[TestFunction],
    reference: Option<&PdeField>,
) -> CompactnessReport {
    let stats = cell_statistics(nu);
    let dirac: Vec<f64> = nu.cells.iter().map(|c| dirac_defect(c, a_grid)).collect();
    let variances: Vec<f64> = stats.iter().map(|s| s.total_variance()).collect();
    CompactnessReport {
        n,
        l,
        replicas,
        nt_cells: nu.partition.nt_cells,
        nx_cells: nu.partition.nx_cells,
        clamped_samples: nu.clamped,
        tartar_defect: family_tartar_defect(nu, a_grid, a_grid),
        dirac_defect_max: dirac.iter().cloned().fold(0.0, f64::max),
        dirac_defect_mean: dirac.iter().sum::<f64>() / dirac.len().max(1) as f64,
        max_cell_variance: variances.iter().cloned().fold(0.0, f64::max),
        mean_cell_variance: variances.iter().sum::<f64>() / variances.len().max(1) as f64,
        mv_entropy_residual: bank.iter().map(|phi| mv_entropy_residual(nu, pair, phi)).collect(),
        cell_mean_l1: reference.map(|r| cell_mean_distance(nu, r)),
        cells: stats,
    }
}
