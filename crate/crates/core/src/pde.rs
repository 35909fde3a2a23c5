//! The Leroux system `rho_t + (rho u)_x = 0`, `u_t + (rho + u^2)_x = 0`:
//! fluxes, characteristic speeds, entropy/entropy-flux pairs, a conservative
//! finite-volume reference solver and weak entropy residuals.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dynamics::InitialProfile;
use crate::error::{Error, Result};

/// Point `(rho, u)` of the state space.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MacroState {
    pub rho: f64,
    pub u: f64,
}

impl MacroState {
    pub fn new(rho: f64, u: f64) -> Self {
        Self { rho, u }
    }

    pub fn in_domain(&self, tol: f64) -> bool {
        self.rho >= -tol && self.rho + self.u.abs() <= 1.0 + tol
    }

    /// Nearest point of the triangle `{rho >= 0, rho + |u| <= 1}`.
    pub fn project(&self) -> MacroState {
        if self.in_domain(0.0) {
            return *self;
        }
        let vertices = [(1.0, 0.0), (0.0, 1.0), (0.0, -1.0)];
        let mut best = MacroState::new(1.0, 0.0);
        let mut best_d = f64::INFINITY;
        for k in 0..3 {
            let (a, b) = (vertices[k], vertices[(k + 1) % 3]);
            let (dx, dy) = (b.0 - a.0, b.1 - a.1);
            let t = (((self.rho - a.0) * dx + (self.u - a.1) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
            let p = MacroState::new(a.0 + t * dx, a.1 + t * dy);
            let d = (p.rho - self.rho).powi(2) + (p.u - self.u).powi(2);
            if d < best_d {
                best_d = d;
                best = p;
            }
        }
        best
    }
}

/// `(rho u, rho + u^2)`.
#[inline]
pub fn macro_flux(s: MacroState) -> [f64; 2] {
    [s.rho * s.u, s.rho + s.u * s.u]
}

/// Jacobian `[[u, rho], [1, 2u]]` of the flux.
pub fn flux_jacobian(s: MacroState) -> [[f64; 2]; 2] {
    [[s.u, s.rho], [1.0, 2.0 * s.u]]
}

/// Characteristic speeds `lambda >= mu`:
/// `lambda = u + (sqrt(u^2 + 4 rho) + u)/2`, `mu = u - (sqrt(u^2 + 4 rho) - u)/2`.
pub fn char_speeds(s: MacroState) -> Result<(f64, f64)> {
    if !s.in_domain(1e-12) {
        return Err(Error::OutsideDomain { rho: s.rho, u: s.u });
    }
    let root = (s.u * s.u + 4.0 * s.rho.max(0.0)).sqrt();
    Ok((s.u + 0.5 * (root + s.u), s.u - 0.5 * (root - s.u)))
}

#[inline]
fn max_speed(s: MacroState) -> f64 {
    let root = (s.u * s.u + 4.0 * s.rho.max(0.0)).sqrt();
    (1.5 * s.u).abs() + 0.5 * root
}

/// Smallest density used where an entropy needs `log rho` or `1 / rho`.
pub const RHO_FLOOR: f64 = 1e-9;

/// User-supplied pair; derivatives come from finite differences.
#[derive(Clone)]
pub struct CustomPair {
    pub name: String,
    pub entropy: Arc<dyn Fn(MacroState) -> f64 + Send + Sync>,
    pub flux: Arc<dyn Fn(MacroState) -> f64 + Send + Sync>,
    pub convex: bool,
}

/// Entropy/entropy-flux pairs.
#[derive(Clone)]
pub enum EntropyPair {
    /// `S_a = rho + a u - a^2`, `F_a = (a + u) S_a`.
    Linear(f64),
    /// `|S_a|`, `(a + u) |S_a|`.
    Absolute(f64),
    /// `S = rho log rho + u^2 / 2`, `F = u rho + u rho log rho + 2 u^3 / 3`.
    Global,
    Custom(CustomPair),
}

impl std::fmt::Debug for EntropyPair {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "EntropyPair({})", self.tag())
    }
}

fn xlogx(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        x * x.ln()
    }
}

impl EntropyPair {
    pub fn tag(&self) -> String {
        match self {
            EntropyPair::Linear(a) => format!("linear(a={a})"),
            EntropyPair::Absolute(a) => format!("absolute(a={a})"),
            EntropyPair::Global => "global".into(),
            EntropyPair::Custom(c) => format!("custom({})", c.name),
        }
    }

    pub fn is_convex(&self) -> bool {
        match self {
            EntropyPair::Custom(c) => c.convex,
            _ => true,
        }
    }

    #[inline]
    pub fn entropy(&self, s: MacroState) -> f64 {
        match self {
            EntropyPair::Linear(a) => s.rho + a * s.u - a * a,
            EntropyPair::Absolute(a) => (s.rho + a * s.u - a * a).abs(),
            EntropyPair::Global => xlogx(s.rho) + 0.5 * s.u * s.u,
            EntropyPair::Custom(c) => (c.entropy)(s),
        }
    }

    #[inline]
    pub fn flux(&self, s: MacroState) -> f64 {
        match self {
            EntropyPair::Linear(a) => (a + s.u) * (s.rho + a * s.u - a * a),
            EntropyPair::Absolute(a) => (a + s.u) * (s.rho + a * s.u - a * a).abs(),
            EntropyPair::Global => s.u * s.rho + s.u * xlogx(s.rho) + 2.0 / 3.0 * s.u.powi(3),
            EntropyPair::Custom(c) => (c.flux)(s),
        }
    }

    /// `(S_rho, S_u)`.
    #[inline]
    pub fn gradient(&self, s: MacroState) -> [f64; 2] {
        match self {
            EntropyPair::Linear(a) => [1.0, *a],
            EntropyPair::Absolute(a) => {
                let sg = (s.rho + a * s.u - a * a).signum();
                [sg, sg * a]
            }
            EntropyPair::Global => [s.rho.max(RHO_FLOOR).ln() + 1.0, s.u],
            EntropyPair::Custom(_) => fd_gradient(|p| self.entropy(p), s),
        }
    }

    /// `(F_rho, F_u)`, from the compatibility relation for built-in pairs.
    pub fn flux_gradient(&self, s: MacroState) -> [f64; 2] {
        match self {
            EntropyPair::Custom(_) => fd_gradient(|p| self.flux(p), s),
            _ => {
                let [sr, su] = self.gradient(s);
                [s.u * sr + su, s.rho * sr + 2.0 * s.u * su]
            }
        }
    }

    /// Hessian of the entropy.
    #[inline]
    pub fn hessian(&self, s: MacroState) -> [[f64; 2]; 2] {
        match self {
            EntropyPair::Linear(_) | EntropyPair::Absolute(_) => [[0.0; 2]; 2],
            EntropyPair::Global => [[1.0 / s.rho.max(RHO_FLOOR), 0.0], [0.0, 1.0]],
            EntropyPair::Custom(_) => {
                let h = 1e-4;
                let g = |p: MacroState| fd_gradient(|q| self.entropy(q), p);
                let (gp, gm) = (g(MacroState::new(s.rho + h, s.u)), g(MacroState::new(s.rho - h, s.u)));
                let (hp, hm) = (g(MacroState::new(s.rho, s.u + h)), g(MacroState::new(s.rho, s.u - h)));
                let rr = (gp[0] - gm[0]) / (2.0 * h);
                let uu = (hp[1] - hm[1]) / (2.0 * h);
                let ru = 0.5 * ((gp[1] - gm[1]) + (hp[0] - hm[0])) / (2.0 * h);
                [[rr, ru], [ru, uu]]
            }
        }
    }

    /// Linear-family bank `S_a` for `a` on a grid; absolute-family likewise.
    pub fn family_bank(a_grid: &[f64], absolute: bool) -> Vec<EntropyPair> {
        a_grid.iter().map(|&a| if absolute { EntropyPair::Absolute(a) } else { EntropyPair::Linear(a) }).collect()
    }
}

/// Central differences with one Richardson step.
fn fd_gradient(f: impl Fn(MacroState) -> f64, s: MacroState) -> [f64; 2] {
    let d = |h: f64, dir: usize| {
        let shift = |t: f64| if dir == 0 { MacroState::new(s.rho + t, s.u) } else { MacroState::new(s.rho, s.u + t) };
        (f(shift(h)) - f(shift(-h))) / (2.0 * h)
    };
    let h = 1e-4;
    let r = |dir| (4.0 * d(h / 2.0, dir) - d(h, dir)) / 3.0;
    [r(0), r(1)]
}

/// Residuals of the compatibility relations `F_rho = u S_rho + S_u` and
/// `F_u = rho S_rho + 2 u S_u`, with every derivative taken by finite
/// differences of `S` and `F` themselves.
pub fn entropy_residual(pair: &EntropyPair, s: MacroState) -> [f64; 2] {
    let gs = fd_gradient(|p| pair.entropy(p), s);
    let gf = fd_gradient(|p| pair.flux(p), s);
    [gf[0] - (s.u * gs[0] + gs[1]), gf[1] - (s.rho * gs[0] + 2.0 * s.u * gs[1])]
}

/// Residual of the entropy wave equation `rho S_rr + u S_ru - S_uu = 0`,
/// second derivatives by finite differences.
pub fn entropy_wave_residual(pair: &EntropyPair, s: MacroState) -> f64 {
    let h = 1e-4;
    let f = |dr: f64, du: f64| pair.entropy(MacroState::new(s.rho + dr, s.u + du));
    let s_rr = (f(h, 0.0) - 2.0 * f(0.0, 0.0) + f(-h, 0.0)) / (h * h);
    let s_uu = (f(0.0, h) - 2.0 * f(0.0, 0.0) + f(0.0, -h)) / (h * h);
    let s_ru = (f(h, h) - f(h, -h) - f(-h, h) + f(-h, -h)) / (4.0 * h * h);
    s.rho * s_rr + s.u * s_ru - s_uu
}

/// Numerical flux of the finite-volume scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum NumericalFlux {
    #[default]
    Rusanov,
    /// Central flux; only stable with enough physical viscosity.
    Central,
}

/// Settings of [`solve_reference`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdeConfig {
    pub nx: usize,
    pub t_final: f64,
    /// Number of output intervals; outputs at `k t_final / out_intervals`.
    pub out_intervals: usize,
    pub cfl: f64,
    pub viscosity: f64,
    pub flux: NumericalFlux,
}

impl PdeConfig {
    pub fn new(nx: usize, t_final: f64, out_intervals: usize) -> Self {
        Self { nx, t_final, out_intervals, cfl: 0.45, viscosity: 0.0, flux: NumericalFlux::Rusanov }
    }
}

/// Counters collected by the solver.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PdeDiagnostics {
    pub steps: usize,
    pub max_cfl: f64,
    /// Cells with `-1e-8 < rho < 0` reset to zero.
    pub density_projections: usize,
    /// Cell-steps with `rho + |u| > 1` (the domain is not projected onto).
    pub domain_exits: usize,
    pub initial_mass: [f64; 2],
    pub final_mass: [f64; 2],
}

/// Finite-volume solution on cell centres `(i + 1/2) / nx`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PdeField {
    pub nx: usize,
    pub xs: Vec<f64>,
    pub times: Vec<f64>,
    /// Time-major, `rho[k * nx + i]`.
    pub rho: Vec<f64>,
    pub u: Vec<f64>,
    pub diagnostics: PdeDiagnostics,
}

impl PdeField {
    pub fn view(&self) -> FieldView<'_> {
        FieldView { times: &self.times, xs: &self.xs, rho: &self.rho, u: &self.u }
    }

    /// Cell averages over groups of `factor` cells.
    pub fn restrict(&self, factor: usize) -> Result<PdeField> {
        if factor == 0 || !self.nx.is_multiple_of(factor) {
            return Err(Error::InvalidParameter(format!("cannot restrict {} cells by {factor}", self.nx)));
        }
        let nx = self.nx / factor;
        let avg = |v: &[f64]| -> Vec<f64> { v.chunks(factor).map(|c| c.iter().sum::<f64>() / factor as f64).collect() };
        Ok(PdeField {
            nx,
            xs: (0..nx).map(|i| (i as f64 + 0.5) / nx as f64).collect(),
            times: self.times.clone(),
            rho: avg(&self.rho),
            u: avg(&self.u),
            diagnostics: self.diagnostics.clone(),
        })
    }

    /// Bilinear interpolation in `t` and periodic `x`.
    pub fn interpolate(&self, t: f64, x: f64) -> MacroState {
        let nt = self.times.len();
        let ti = match self.times.iter().position(|&s| s >= t) {
            Some(0) => 0,
            Some(p) => p - 1,
            None => nt.saturating_sub(2),
        }
        .min(nt.saturating_sub(2));
        let (t0, t1) = (self.times[ti], self.times[(ti + 1).min(nt - 1)]);
        let wt = if t1 > t0 { ((t - t0) / (t1 - t0)).clamp(0.0, 1.0) } else { 0.0 };
        let pos = x.rem_euclid(1.0) * self.nx as f64 - 0.5;
        let i0 = pos.floor();
        let wx = pos - i0;
        let i0 = (i0 as isize).rem_euclid(self.nx as isize) as usize;
        let i1 = (i0 + 1) % self.nx;
        let at = |v: &[f64], k: usize| (1.0 - wx) * v[k * self.nx + i0] + wx * v[k * self.nx + i1];
        let k1 = (ti + 1).min(nt - 1);
        MacroState::new(
            (1.0 - wt) * at(&self.rho, ti) + wt * at(&self.rho, k1),
            (1.0 - wt) * at(&self.u, ti) + wt * at(&self.u, k1),
        )
    }

    /// Time reversal with velocity flip, `(rho, u)(t) -> (rho, -u)(T - t)`.
    /// It maps classical solutions to classical solutions and admissible
    /// shocks to inadmissible ones.
    pub fn time_reversed(&self) -> PdeField {
        let nt = self.times.len();
        let t_final = *self.times.last().unwrap_or(&0.0);
        let mut rho = Vec::with_capacity(self.rho.len());
        let mut u = Vec::with_capacity(self.u.len());
        for k in (0..nt).rev() {
            rho.extend_from_slice(&self.rho[k * self.nx..(k + 1) * self.nx]);
            u.extend(self.u[k * self.nx..(k + 1) * self.nx].iter().map(|v| -v));
        }
        PdeField {
            nx: self.nx,
            xs: self.xs.clone(),
            times: self.times.iter().rev().map(|t| t_final - t).collect(),
            rho,
            u,
            diagnostics: self.diagnostics.clone(),
        }
    }
}

/// Borrowed `(rho, u)` samples on a uniform periodic space grid.
#[derive(Clone, Copy, Debug)]
pub struct FieldView<'a> {
    pub times: &'a [f64],
    pub xs: &'a [f64],
    pub rho: &'a [f64],
    pub u: &'a [f64],
}

impl FieldView<'_> {
    #[inline]
    pub fn state(&self, k: usize, i: usize) -> MacroState {
        let idx = k * self.xs.len() + i;
        MacroState::new(self.rho[idx], self.u[idx])
    }
}

/// Trapezoid weights of a sorted time grid.
pub fn trapezoid_weights(times: &[f64]) -> Vec<f64> {
    let m = times.len();
    let mut w = vec![0.0; m];
    for k in 0..m.saturating_sub(1) {
        let h = times[k + 1] - times[k];
        w[k] += 0.5 * h;
        w[k + 1] += 0.5 * h;
    }
    w
}

fn rhs(rho: &[f64], u: &[f64], dx: f64, cfg: &PdeConfig, out_r: &mut [f64], out_u: &mut [f64]) {
    let nx = rho.len();
    let mut fr = vec![0.0; nx];
    let mut fu = vec![0.0; nx];
    for i in 0..nx {
        let k = (i + 1) % nx;
        let (l, r) = (MacroState::new(rho[i], u[i]), MacroState::new(rho[k], u[k]));
        let (fl, frr) = (macro_flux(l), macro_flux(r));
        let alpha = match cfg.flux {
            NumericalFlux::Rusanov => max_speed(l).max(max_speed(r)),
            NumericalFlux::Central => 0.0,
        };
        fr[i] = 0.5 * (fl[0] + frr[0]) - 0.5 * alpha * (r.rho - l.rho);
        fu[i] = 0.5 * (fl[1] + frr[1]) - 0.5 * alpha * (r.u - l.u);
    }
    let nu = cfg.viscosity / (dx * dx);
    for i in 0..nx {
        let (m, p) = ((i + nx - 1) % nx, (i + 1) % nx);
        out_r[i] = -(fr[i] - fr[m]) / dx + nu * (rho[p] - 2.0 * rho[i] + rho[m]);
        out_u[i] = -(fu[i] - fu[m]) / dx + nu * (u[p] - 2.0 * u[i] + u[m]);
    }
}

/// Explicit conservative finite-volume solution with forward Euler steps.
///
/// The time step is `cfl dx / max(|lambda|, |mu|)` recomputed each step,
/// further limited by the diffusion number when `viscosity > 0`; output
/// times are hit exactly.
pub fn solve_reference(init: &InitialProfile, cfg: &PdeConfig) -> Result<PdeField> {
    if cfg.nx < 4 || cfg.out_intervals == 0 || cfg.t_final <= 0.0 || !(cfg.cfl > 0.0 && cfg.cfl <= 1.0) {
        return Err(Error::InvalidParameter("PDE grid, output count, final time and CFL must be positive".into()));
    }
    if cfg.viscosity < 0.0 {
        return Err(Error::InvalidParameter("viscosity must be non-negative".into()));
    }
    let nx = cfg.nx;
    let dx = 1.0 / nx as f64;
    let xs: Vec<f64> = (0..nx).map(|i| (i as f64 + 0.5) * dx).collect();
    let mut rho = Vec::with_capacity(nx);
    let mut u = Vec::with_capacity(nx);
    for &x in &xs {
        // Cell averages of the initial data by a 16-point midpoint rule.
        let (mut r, mut v) = (0.0, 0.0);
        for q in 0..16 {
            let (a, b) = init.at(x - 0.5 * dx + (q as f64 + 0.5) * dx / 16.0);
            r += a / 16.0;
            v += b / 16.0;
        }
        if !MacroState::new(r, v).in_domain(1e-12) {
            return Err(Error::OutsideDomain { rho: r, u: v });
        }
        rho.push(r);
        u.push(v);
    }
    if cfg.flux == NumericalFlux::Central {
        let amax = rho.iter().zip(&u).map(|(&r, &v)| max_speed(MacroState::new(r, v))).fold(0.0, f64::max);
        if cfg.viscosity <= 0.0 || amax * dx > 2.0 * cfg.viscosity {
            return Err(Error::InvalidParameter(format!(
                "central flux needs cell Peclet number <= 2 (viscosity {}, dx {dx})",
                cfg.viscosity
            )));
        }
    }
    let mass = |r: &[f64], v: &[f64]| [r.iter().sum::<f64>() * dx, v.iter().sum::<f64>() * dx];
    let mut diag = PdeDiagnostics { initial_mass: mass(&rho, &u), ..Default::default() };
    let times: Vec<f64> = (0..=cfg.out_intervals).map(|k| cfg.t_final * k as f64 / cfg.out_intervals as f64).collect();
    let mut out_r = Vec::with_capacity(times.len() * nx);
    let mut out_u = Vec::with_capacity(times.len() * nx);
    out_r.extend_from_slice(&rho);
    out_u.extend_from_slice(&u);
    let (mut dr, mut du) = (vec![0.0; nx], vec![0.0; nx]);
    let mut t = 0.0;
    for &t_out in &times[1..] {
        while t < t_out - 1e-14 {
            let amax =
                rho.iter().zip(&u).map(|(&r, &v)| max_speed(MacroState::new(r, v))).fold(0.0f64, f64::max).max(1e-12);
            let mut dt = cfg.cfl * dx / amax;
            if cfg.viscosity > 0.0 {
                dt = dt.min(cfg.cfl * dx * dx / (2.0 * cfg.viscosity));
            }
            dt = dt.min(t_out - t);
            diag.max_cfl = diag.max_cfl.max(amax * dt / dx);
            rhs(&rho, &u, dx, cfg, &mut dr, &mut du);
            for i in 0..nx {
                rho[i] += dt * dr[i];
                u[i] += dt * du[i];
                if rho[i] < 0.0 {
                    if rho[i] < -1e-8 {
                        return Err(Error::NegativeDensity { rho: rho[i], cell: i, step: diag.steps });
                    }
                    rho[i] = 0.0;
                    diag.density_projections += 1;
                }
                if rho[i] + u[i].abs() > 1.0 + 1e-12 {
                    diag.domain_exits += 1;
                }
            }
            t += dt;
            diag.steps += 1;
        }
        t = t_out;
        out_r.extend_from_slice(&rho);
        out_u.extend_from_slice(&u);
    }
    diag.final_mass = mass(&rho, &u);
    Ok(PdeField { nx, xs, times, rho: out_r, u: out_u, diagnostics: diag })
}

/// Smooth non-negative test function `phi(t, x) = b((t - tc)/wt) b(d(x, xc)/wx)`
/// with `b(y) = (1 + cos(pi y))^2 / 4` and `d` the signed torus distance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TestFunction {
    pub tc: f64,
    pub wt: f64,
    pub xc: f64,
    pub wx: f64,
}

#[inline]
fn bump(y: f64) -> (f64, f64) {
    if y.abs() >= 1.0 {
        return (0.0, 0.0);
    }
    let pi = std::f64::consts::PI;
    let c = 1.0 + (pi * y).cos();
    (0.25 * c * c, -0.5 * pi * c * (pi * y).sin())
}

impl TestFunction {
    fn parts(&self, t: f64, x: f64) -> ((f64, f64), (f64, f64)) {
        let mut d = (x - self.xc).rem_euclid(1.0);
        if d > 0.5 {
            d -= 1.0;
        }
        (bump((t - self.tc) / self.wt), bump(d / self.wx))
    }

    #[inline]
    pub fn value(&self, t: f64, x: f64) -> f64 {
        let ((a, _), (b, _)) = self.parts(t, x);
        a * b
    }

    #[inline]
    pub fn dt(&self, t: f64, x: f64) -> f64 {
        let ((_, da), (b, _)) = self.parts(t, x);
        da / self.wt * b
    }

    #[inline]
    pub fn dx(&self, t: f64, x: f64) -> f64 {
        let ((a, _), (_, db)) = self.parts(t, x);
        a * db / self.wx
    }
}

/// Deterministic bank of bumps supported in `[0, T) x torus`, a third of
/// them centred at `t = 0` so that the initial-data term is exercised.
pub fn test_function_bank(count: usize, t_final: f64) -> Vec<TestFunction> {
    let golden = 0.618_033_988_749_894_9;
    (0..count)
        .map(|i| {
            let tc = [0.0, 0.25, 0.5][i % 3] * t_final;
            TestFunction {
                tc,
                wt: 0.45 * t_final,
                xc: (0.5 + i as f64 * golden).rem_euclid(1.0),
                wx: [0.1, 0.2, 0.3][(i / 3) % 3],
            }
        })
        .collect()
}

/// Result of a weak residual evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeakResidual {
    pub value: f64,
    /// Samples moved onto the domain before evaluating the entropy.
    pub clamped: usize,
}

/// `int int (phi_t S + phi_x F) dx dt + int phi(0, x) S(0, x) dx`, which is
/// non-negative for an entropy solution and a convex pair. Trapezoid rule in
/// `t`, periodic rectangle rule in `x`.
pub fn weak_entropy_residual(field: FieldView<'_>, pair: &EntropyPair, phi: &TestFunction) -> WeakResidual {
    let nx = field.xs.len();
    let dx = 1.0 / nx as f64;
    let wts = trapezoid_weights(field.times);
    let mut clamped = 0;
    let mut acc = 0.0;
    for (k, (&t, &w)) in field.times.iter().zip(&wts).enumerate() {
        for (i, &x) in field.xs.iter().enumerate() {
            let raw = field.state(k, i);
            let s = raw.project();
            if s != raw {
                clamped += 1;
            }
            let (pt, px) = (phi.dt(t, x), phi.dx(t, x));
            let mut v = w * (pt * pair.entropy(s) + px * pair.flux(s));
            if k == 0 {
                v += phi.value(t, x) * pair.entropy(s);
            }
            acc += v * dx;
        }
    }
    WeakResidual { value: acc, clamped }
}

/// Space-time L1 distance `int int |rho - rho_ref| + |u - u_ref|` between a
/// sampled field and a reference interpolated at its sample points.
pub fn l1_distance_to(field: FieldView<'_>, reference: &PdeField) -> f64 {
    let wts = trapezoid_weights(field.times);
    let nx = field.xs.len();
    let mut acc = 0.0;
    for (k, (&t, &w)) in field.times.iter().zip(&wts).enumerate() {
        let mut row = 0.0;
        for (i, &x) in field.xs.iter().enumerate() {
            let s = field.state(k, i);
            let r = reference.interpolate(t, x);
            row += (s.rho - r.rho).abs() + (s.u - r.u).abs();
        }
        acc += w * row / nx as f64;
    }
    acc
}

/// L1 errors of resolutions `nx` and `2 nx` against `4 nx`, all restricted
/// to `nx` cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelfConvergence {
    pub nx: [usize; 3],
    pub coarse_error: f64,
    pub mid_error: f64,
    /// `coarse_error / mid_error`.
    pub factor: f64,
}

pub fn self_convergence(init: &InitialProfile, base: &PdeConfig) -> Result<SelfConvergence> {
    let nx = base.nx;
    let solve = |m: usize| solve_reference(init, &PdeConfig { nx: m * nx, ..base.clone() });
    let coarse = solve(1)?;
    let mid = solve(2)?.restrict(2)?;
    let fine = solve(4)?.restrict(4)?;
    let coarse_error = l1_distance_to(coarse.view(), &fine);
    let mid_error = l1_distance_to(mid.view(), &fine);
    Ok(SelfConvergence { nx: [nx, 2 * nx, 4 * nx], coarse_error, mid_error, factor: coarse_error / mid_error })
}
