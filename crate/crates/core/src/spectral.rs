//! The symmetric stirring generator restricted to a hyperplane
//! `Omega^l_{N,Z}` of a free-boundary block: spectral gap, Dirichlet form,
//! entropy, a randomized search for the log-Sobolev ratio, and exact
//! conditional exponential moments of weighted block averages.

use std::collections::HashMap;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::block::WeightKernel;
use crate::equilibrium::{
    enumerate_hyperplane, feasible_hyperplanes, hyperplane_counts, hyperplane_size, LocalObservable,
};
use crate::error::{Error, Result};
use crate::lattice::Configuration;

/// Largest hyperplane that [`build_hyperplane`] accepts.
pub const MAX_DIMENSION: u64 = 200_000;
/// Largest dimension diagonalized densely.
pub const DENSE_LIMIT: usize = 3_000;

/// Uniform measure on one hyperplane with the exchange graph of its
/// generator: `(K f)(w) = sum_j 1{w_j != w_{j+1}} (f(Theta_j w) - f(w))`,
/// `j = 1..l-1`.
#[derive(Clone, Debug)]
pub struct HyperplaneModel {
    pub l: usize,
    pub holes: i64,
    pub charge: i64,
    pub states: Vec<Configuration>,
    pub index: HashMap<u64, usize>,
    pub neighbours: Vec<Vec<usize>>,
}

pub fn build_hyperplane(l: usize, holes: i64, charge: i64) -> Result<HyperplaneModel> {
    let size = hyperplane_size(hyperplane_counts(l, holes, charge)?);
    if size > MAX_DIMENSION {
        return Err(Error::StateSpaceTooLarge { states: size, limit: MAX_DIMENSION });
    }
    let states = enumerate_hyperplane(l, holes, charge)?;
    let index: HashMap<u64, usize> = states.iter().enumerate().map(|(i, c)| (c.index(), i)).collect();
    let neighbours = states
        .iter()
        .map(|c| {
            (0..l.saturating_sub(1))
                .filter(|&j| c.at(j) != c.at(j + 1))
                .map(|j| {
                    let mut s = c.spins().to_vec();
                    s.swap(j, j + 1);
                    index[&Configuration::new(s).expect("non-empty").index()]
                })
                .collect()
        })
        .collect();
    Ok(HyperplaneModel { l, holes, charge, states, index, neighbours })
}

impl HyperplaneModel {
    pub fn dim(&self) -> usize {
        self.states.len()
    }

    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        self.neighbours.iter().enumerate().map(|(i, nb)| nb.iter().map(|&j| f[j] - f[i]).sum()).collect()
    }

    pub fn dense_generator(&self) -> DMatrix<f64> {
        let d = self.dim();
        let mut k = DMatrix::zeros(d, d);
        for (i, nb) in self.neighbours.iter().enumerate() {
            for &j in nb {
                k[(i, j)] += 1.0;
                k[(i, i)] -= 1.0;
            }
        }
        k
    }

    /// `E f` under the uniform measure.
    pub fn mean(&self, f: &[f64]) -> f64 {
        f.iter().sum::<f64>() / self.dim() as f64
    }
}

/// `D(f) = 1/2 sum_j E (f o Theta_j - f)^2`.
pub fn dirichlet_form(m: &HyperplaneModel, f: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (i, nb) in m.neighbours.iter().enumerate() {
        for &j in nb {
            acc += (f[j] - f[i]).powi(2);
        }
    }
    0.5 * acc / m.dim() as f64
}

/// Nonnegative function with uniform mean 1.
#[derive(Clone, Debug, PartialEq)]
pub struct DensityVector(Vec<f64>);

impl DensityVector {
    pub fn new(h: Vec<f64>) -> Result<Self> {
        if h.is_empty() || h.iter().any(|&x| !(x >= 0.0)) {
            return Err(Error::InvalidParameter("density must be nonnegative".into()));
        }
        let mean = h.iter().sum::<f64>() / h.len() as f64;
        if (mean - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParameter(format!("density has mean {mean}")));
        }
        Ok(Self(h))
    }

    /// Rescales a nonnegative, not identically zero vector to mean 1.
    pub fn normalized(mut h: Vec<f64>) -> Result<Self> {
        let mean = h.iter().sum::<f64>() / h.len().max(1) as f64;
        if !(mean > 0.0) {
            return Err(Error::InvalidParameter("density has no mass".into()));
        }
        h.iter_mut().for_each(|x| *x /= mean);
        Self::new(h)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn sqrt(&self) -> Vec<f64> {
        self.0.iter().map(|x| x.sqrt()).collect()
    }
}

fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

/// `H(h) = E h log h`.
pub fn entropy_functional(m: &HyperplaneModel, h: &DensityVector) -> Result<f64> {
    if h.0.len() != m.dim() {
        return Err(Error::InvalidParameter("density does not match the hyperplane".into()));
    }
    Ok(h.0.iter().map(|&x| xlogx(x)).sum::<f64>() / m.dim() as f64)
}

/// Entropy split along the value of the first spin:
/// `H(h) = sum_c p_c hbar_c log hbar_c + sum_c p_c hbar_c H_c(h / hbar_c)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntropyDecomposition {
    pub total: f64,
    pub marginal: f64,
    pub conditional: f64,
}

pub fn entropy_decomposition(m: &HyperplaneModel, h: &DensityVector) -> Result<EntropyDecomposition> {
    let total = entropy_functional(m, h)?;
    let d = m.dim() as f64;
    let mut groups: [Vec<f64>; 3] = Default::default();
    for (c, &x) in m.states.iter().zip(&h.0) {
        groups[c.at(0).index()].push(x);
    }
    let (mut marginal, mut conditional) = (0.0, 0.0);
    for g in groups.iter().filter(|g| !g.is_empty()) {
        let p = g.len() as f64 / d;
        let hbar = g.iter().sum::<f64>() / g.len() as f64;
        marginal += p * xlogx(hbar);
        if hbar > 0.0 {
            let cond = g.iter().map(|&x| xlogx(x / hbar)).sum::<f64>() / g.len() as f64;
            conditional += p * hbar * cond;
        }
    }
    Ok(EntropyDecomposition { total, marginal, conditional })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EigenMethod {
    Dense,
    Lanczos,
}

/// Smallest nonzero eigenvalue of `-K`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectralGap {
    pub gap: f64,
    /// Known for dense solves only.
    pub multiplicity: Option<usize>,
    pub method: EigenMethod,
    /// Normalized eigenvector (uniform inner product).
    #[serde(skip)]
    pub eigenvector: Vec<f64>,
}

/// Dense solve up to [`DENSE_LIMIT`] states, Lanczos above.
pub fn spectral_gap(m: &HyperplaneModel) -> Result<SpectralGap> {
    if m.dim() < 2 {
        return Err(Error::InvalidParameter("single-state hyperplane has no gap".into()));
    }
    if m.dim() <= DENSE_LIMIT {
        Ok(dense_gap(m))
    } else {
        Ok(lanczos_gap(m, 300, 7))
    }
}

pub fn dense_gap(m: &HyperplaneModel) -> SpectralGap {
    let eig = SymmetricEigen::new(-m.dense_generator());
    let mut order: Vec<usize> = (0..m.dim()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    // order[0] is the constant mode.
    let gap = eig.eigenvalues[order[1]];
    let multiplicity = order[1..].iter().filter(|&&i| (eig.eigenvalues[i] - gap).abs() < 1e-8).count();
    let scale = (m.dim() as f64).sqrt();
    let eigenvector = eig.eigenvectors.column(order[1]).iter().map(|x| x * scale).collect();
    SpectralGap { gap, multiplicity: Some(multiplicity), method: EigenMethod::Dense, eigenvector }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn project_out_constants(v: &mut [f64]) {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
}

/// Lanczos with full reorthogonalization on the complement of constants.
pub fn lanczos_gap(m: &HyperplaneModel, max_iter: usize, seed: u64) -> SpectralGap {
    let d = m.dim();
    let steps = max_iter.min(d - 1).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut q: Vec<f64> = (0..d).map(|_| rng.random::<f64>() - 0.5).collect();
    project_out_constants(&mut q);
    let nq = dot(&q, &q).sqrt();
    q.iter_mut().for_each(|x| *x /= nq);
    let mut basis = vec![q];
    let (mut alpha, mut beta) = (Vec::new(), Vec::new());
    for k in 0..steps {
        let mut w: Vec<f64> = m.apply(&basis[k]).into_iter().map(|x| -x).collect();
        alpha.push(dot(&basis[k], &w));
        for _ in 0..2 {
            for b in &basis {
                let c = dot(b, &w);
                w.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
            project_out_constants(&mut w);
        }
        let bn = dot(&w, &w).sqrt();
        if bn < 1e-10 || k + 1 == steps {
            break;
        }
        beta.push(bn);
        basis.push(w.into_iter().map(|x| x / bn).collect());
    }
    let k = alpha.len();
    let t = DMatrix::from_fn(k, k, |i, j| {
        if i == j {
            alpha[i]
        } else if i + 1 == j {
            beta[i]
        } else if j + 1 == i {
            beta[j]
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(t);
    let imin = (0..k).min_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b])).expect("k >= 1");
    let mut v = vec![0.0; d];
    for (i, b) in basis.iter().take(k).enumerate() {
        let c = eig.eigenvectors[(i, imin)];
        v.iter_mut().zip(b).for_each(|(x, y)| *x += c * y);
    }
    let scale = (d as f64 / dot(&v, &v)).sqrt();
    v.iter_mut().for_each(|x| *x *= scale);
    SpectralGap { gap: eig.eigenvalues[imin], multiplicity: None, method: EigenMethod::Lanczos, eigenvector: v }
}

/// `2 (1 - cos(pi / l))`, the gap of a single walker on `l` sites.
pub fn random_walk_gap(l: usize) -> f64 {
    2.0 * (1.0 - (std::f64::consts::PI / l as f64).cos())
}

/// `x log x - x + 1 >= 0`, by its Taylor series near `x = 1`.
fn relative_entropy_density(x: f64) -> f64 {
    let y = x - 1.0;
    if y.abs() < 1e-3 {
        let mut acc = 0.0;
        let mut p = y * y;
        for k in 2..12 {
            let k = k as f64;
            acc += p / (k * (k - 1.0));
            p *= -y;
        }
        acc
    } else {
        xlogx(x) - x + 1.0
    }
}

/// `(E g^2 log g^2 - Z log Z, Z)` with `Z = E g^2`.
fn entropy_of_square(g: &[f64]) -> (f64, f64) {
    let d = g.len() as f64;
    let z = g.iter().map(|x| x * x).sum::<f64>() / d;
    let ent = z * g.iter().map(|x| relative_entropy_density(x * x / z)).sum::<f64>() / d;
    (ent, z)
}

/// `H(g^2 / E g^2) E g^2 / D(g)`, or `None` when `D(g)` vanishes.
pub fn lsi_ratio(m: &HyperplaneModel, g: &[f64]) -> Option<f64> {
    let dir = dirichlet_form(m, g);
    let (ent, z) = entropy_of_square(g);
    if dir <= 1e-300 || z <= 0.0 {
        return None;
    }
    Some(ent / dir)
}

fn lsi_gradient(m: &HyperplaneModel, g: &[f64]) -> Option<(f64, Vec<f64>)> {
    let d = m.dim() as f64;
    let dir = dirichlet_form(m, g);
    let (ent, z) = entropy_of_square(g);
    if dir <= 1e-300 || z <= 0.0 {
        return None;
    }
    let kg = m.apply(g);
    let grad = g
        .iter()
        .zip(&kg)
        .map(|(&gi, &ki)| {
            let d_ent = if gi > 0.0 { 2.0 * gi / d * (gi * gi / z).ln() } else { 0.0 };
            let d_dir = -2.0 / d * ki;
            (d_ent * dir - ent * d_dir) / (dir * dir)
        })
        .collect();
    Some((ent / dir, grad))
}

fn normalize_l2(g: &mut [f64]) {
    let z = (g.iter().map(|x| x * x).sum::<f64>() / g.len() as f64).sqrt();
    if z > 0.0 {
        g.iter_mut().for_each(|x| *x /= z);
    }
}

/// Adaptive-step gradient ascent of `R(g)` over `g >= 0`.
fn ascend(m: &HyperplaneModel, mut g: Vec<f64>, steps: usize) -> (f64, Vec<f64>) {
    normalize_l2(&mut g);
    let Some((mut r, mut grad)) = lsi_gradient(m, &g) else {
        return (f64::NEG_INFINITY, g);
    };
    let mut eta = 0.1;
    for _ in 0..steps {
        let gmax = grad.iter().fold(0.0f64, |a, x| a.max(x.abs()));
        if gmax == 0.0 || eta < 1e-12 {
            break;
        }
        let mut trial: Vec<f64> = g.iter().zip(&grad).map(|(x, d)| (x + eta * d / gmax).abs()).collect();
        normalize_l2(&mut trial);
        match lsi_gradient(m, &trial) {
            Some((rt, gt)) if rt > r => {
                g = trial;
                r = rt;
                grad = gt;
                eta *= 1.5;
            }
            _ => eta *= 0.5,
        }
    }
    (r, g)
}

/// Best ratio `sup_h H(h) / D(sqrt h)` found and its density.
#[derive(Clone, Debug, PartialEq)]
pub struct LsiSearch {
    pub ratio: f64,
    pub density: DensityVector,
    /// Ratio reached from the perturbed gap eigenvector, close to `2 / gap`.
    pub near_constant: f64,
}

/// Random restarts from Dirichlet densities (concentrations 1 and 0.2,
/// alternating) plus a start at `1 + eps v` with `v` the gap eigenvector.
pub fn lsi_ratio_search(m: &HyperplaneModel, trials: usize, steps: usize, seed: u64) -> Result<LsiSearch> {
    if m.dim() < 2 {
        return Err(Error::InvalidParameter("single-state hyperplane has no log-Sobolev ratio".into()));
    }
    if m.dim() > 20_000 {
        return Err(Error::StateSpaceTooLarge { states: m.dim() as u64, limit: 20_000 });
    }
    let gap = spectral_gap(m)?;
    let eps = 1e-3;
    let start: Vec<f64> = gap.eigenvector.iter().map(|v| 1.0 + eps * v).collect();
    let near_constant = lsi_ratio(m, &start).unwrap_or(0.0);
    let (mut best, mut best_g) = ascend(m, start, steps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gammas = [Gamma::new(1.0, 1.0).expect("valid"), Gamma::new(0.2, 1.0).expect("valid")];
    for t in 0..trials {
        let h: Vec<f64> = (0..m.dim()).map(|_| gammas[t % 2].sample(&mut rng)).collect();
        let g: Vec<f64> = h.iter().map(|x| x.sqrt()).collect();
        let (r, g) = ascend(m, g, steps);
        if r > best {
            best = r;
            best_g = g;
        }
    }
    let density = DensityVector::normalized(best_g.iter().map(|x| x * x).collect())?;
    Ok(LsiSearch { ratio: best, density, near_constant })
}

/// Dirichlet(alpha) density with uniform mean 1.
pub fn random_density<R: Rng + ?Sized>(dim: usize, alpha: f64, rng: &mut R) -> Result<DensityVector> {
    let g = Gamma::new(alpha, 1.0).map_err(|e| Error::InvalidParameter(e.to_string()))?;
    DensityVector::normalized((0..dim).map(|_| g.sample(rng)).collect())
}

/// Number of `samples` random densities with `H(h) > bound * D(sqrt h)`.
pub fn lsi_violations<R: Rng + ?Sized>(m: &HyperplaneModel, bound: f64, samples: usize, rng: &mut R) -> Result<usize> {
    let mut bad = 0;
    for s in 0..samples {
        let h = random_density(m.dim(), if s % 2 == 0 { 1.0 } else { 0.2 }, rng)?;
        let ent = entropy_functional(m, &h)?;
        if ent > bound * dirichlet_form(m, &h.sqrt()) * (1.0 + 1e-12) {
            bad += 1;
        }
    }
    Ok(bad)
}

/// `M(b) = 0` (`b = a'`, centred average) or `M(b) = 1` (`b = 2a`, compared
/// against `Upsilon` of the weighted block averages).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MomentMode {
    Centered,
    Replacement,
}

impl MomentMode {
    pub fn tag(self) -> &'static str {
        match self {
            MomentMode::Centered => "M0",
            MomentMode::Replacement => "M1",
        }
    }

    /// Kernel weight at block position `s in [0, 1]`.
    pub fn weight(self, kernel: &dyn WeightKernel, s: f64) -> f64 {
        match self {
            MomentMode::Centered => kernel.deriv(2.0 * s - 1.0),
            MomentMode::Replacement => 2.0 * kernel.value(2.0 * s - 1.0),
        }
    }
}

/// Equilibrium expectation of a standard observable as a polynomial in `(rho, u)`.
pub fn closed_form_upsilon(obs: &LocalObservable) -> Option<fn(f64, f64) -> f64> {
    Some(match obs.name {
        "eta" => |r, _| r,
        "xi" => |_, u| u,
        "psi" => |r, u| r * u,
        "phi" => |r, u| r + u * u - 1.0,
        "psi_s" | "phi_s" => |_, _| 0.0,
        _ => return None,
    })
}

/// `<b, v>_l = (1/l) sum_j b(s_j) v(w_j .. w_{j+m-1})` over the windows of
/// length `m` inside the block, `s_j = (j + m/2) / l` (0-based `j`).
fn weighted_average(c: &Configuration, obs: &LocalObservable, weights: &[f64]) -> f64 {
    let l = c.len();
    let mut acc = 0.0;
    for (j, &b) in weights.iter().enumerate() {
        acc += b * (obs.eval)(&c.spins()[j..j + obs.window]);
    }
    acc / l as f64
}

pub fn block_weights(kernel: &dyn WeightKernel, mode: MomentMode, l: usize, window: usize) -> Vec<f64> {
    (0..=l - window).map(|j| mode.weight(kernel, (j as f64 + window as f64 / 2.0) / l as f64)).collect()
}

/// Exponents `Q(w)` over one hyperplane so that the conditional moment is
/// `E exp(gamma Q)`.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentTable {
    pub holes: i64,
    pub charge: i64,
    pub q: Vec<f64>,
}

impl MomentTable {
    pub fn new(
        l: usize,
        holes: i64,
        charge: i64,
        obs: &LocalObservable,
        kernel: &dyn WeightKernel,
        mode: MomentMode,
    ) -> Result<Self> {
        if obs.window > l {
            return Err(Error::InvalidParameter(format!("window {} exceeds block length {l}", obs.window)));
        }
        let states = enumerate_hyperplane(l, holes, charge)?;
        let wv = block_weights(kernel, mode, l, obs.window);
        let w1 = block_weights(kernel, mode, l, 1);
        let ups = closed_form_upsilon(obs)
            .ok_or_else(|| Error::InvalidParameter(format!("no closed form for {}", obs.name)))?;
        let q = states
            .iter()
            .map(|c| {
                let v = weighted_average(c, obs, &wv);
                let centred = match mode {
                    MomentMode::Centered => v,
                    MomentMode::Replacement => {
                        let rho = weighted_average(c, &LocalObservable::ETA, &w1);
                        let u = weighted_average(c, &LocalObservable::XI, &w1);
                        v - ups(rho, u)
                    }
                };
                l as f64 * centred * centred
            })
            .collect();
        Ok(Self { holes, charge, q })
    }

    pub fn moment(&self, gamma: f64) -> f64 {
        self.q.iter().map(|q| (gamma * q).exp()).sum::<f64>() / self.q.len() as f64
    }
}

/// Exact `E(exp(gamma Q) | N, Z)` for one hyperplane.
pub fn conditional_exp_moment(
    l: usize,
    holes: i64,
    charge: i64,
    obs: &LocalObservable,
    kernel: &dyn WeightKernel,
    mode: MomentMode,
    gamma: f64,
) -> Result<f64> {
    Ok(MomentTable::new(l, holes, charge, obs, kernel, mode)?.moment(gamma))
}

/// Largest `gamma` with `max_t t.moment(gamma) <= bound`; infinite when every
/// exponent vanishes.
pub fn max_admissible_gamma(tables: &[&MomentTable], bound: f64) -> f64 {
    let worst = |g: f64| tables.iter().map(|t| t.moment(g)).fold(0.0f64, f64::max);
    if tables.iter().all(|t| t.q.iter().all(|&q| q == 0.0)) {
        return f64::INFINITY;
    }
    let mut hi = 1.0;
    while worst(hi) <= bound {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..100 {
        let mid = 0.5 * (lo + hi);
        if worst(mid) <= bound {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Uniform `gamma_0` over every feasible hyperplane of length `l`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaCertificate {
    pub l: usize,
    pub mode: MomentMode,
    pub observables: Vec<String>,
    pub bound: f64,
    pub gamma0: f64,
    /// Moment at `gamma0` maximized over hyperplanes and observables.
    pub worst_moment: f64,
    /// `(N, Z, gamma)` per hyperplane; `None` when the exponent vanishes.
    pub per_hyperplane: Vec<(i64, i64, Option<f64>)>,
}

pub fn certify_gamma(
    l: usize,
    observables: &[LocalObservable],
    kernel: &dyn WeightKernel,
    mode: MomentMode,
    bound: f64,
) -> Result<GammaCertificate> {
    let mut tables = Vec::new();
    let mut per_hyperplane = Vec::new();
    for (holes, charge) in feasible_hyperplanes(l) {
        let ts: Vec<MomentTable> =
            observables.iter().map(|o| MomentTable::new(l, holes, charge, o, kernel, mode)).collect::<Result<_>>()?;
        let refs: Vec<&MomentTable> = ts.iter().collect();
        let g = max_admissible_gamma(&refs, bound);
        per_hyperplane.push((holes, charge, g.is_finite().then_some(g)));
        tables.extend(ts);
    }
    let refs: Vec<&MomentTable> = tables.iter().collect();
    let gamma0 = max_admissible_gamma(&refs, bound);
    let worst_moment = refs.iter().map(|t| t.moment(gamma0)).fold(0.0, f64::max);
    Ok(GammaCertificate {
        l,
        mode,
        observables: observables.iter().map(|o| o.name.to_string()).collect(),
        bound,
        gamma0,
        worst_moment,
        per_hyperplane,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::block::CosineKernel;
    use crate::equilibrium::microcanonical_expectation;
    use proptest::prelude::*;

    #[test]
    fn two_state_generator() {
        let m = build_hyperplane(2, 1, 1).unwrap();
        assert_eq!(m.dim(), 2);
        let k = m.dense_generator();
        assert_eq!(k, DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]));
        let f = [1.0, -1.0];
        assert!((dirichlet_form(&m, &f) - 2.0).abs() < 1e-15);
        assert!((spectral_gap(&m).unwrap().gap - 2.0).abs() < 1e-12);
    }

    #[test]
    fn generator_is_symmetric_with_zero_rows() {
        for l in 2..=6 {
            for (n, z) in feasible_hyperplanes(l) {
                let m = build_hyperplane(l, n, z).unwrap();
                let k = m.dense_generator();
                assert_eq!(k, k.transpose());
                for i in 0..m.dim() {
                    assert!(k.row(i).sum().abs() < 1e-15);
                    for j in 0..m.dim() {
                        assert!(i == j || k[(i, j)] >= 0.0);
                    }
                }
            }
        }
        assert_eq!(build_hyperplane(3, 1, 0).unwrap().dim(), 6);
    }

    #[test]
    fn oversized_hyperplane_is_refused() {
        assert!(matches!(build_hyperplane(15, 5, 0), Err(Error::StateSpaceTooLarge { .. })));
    }

    #[test]
    fn gap_equals_random_walk_gap() {
        for l in 2..=6 {
            for (n, z) in feasible_hyperplanes(l) {
                let m = build_hyperplane(l, n, z).unwrap();
                if m.dim() < 2 {
                    continue;
                }
                let g = spectral_gap(&m).unwrap().gap;
                assert!((g - random_walk_gap(l)).abs() < 1e-10, "l={l} N={n} Z={z}: {g}");
            }
        }
    }

    #[test]
    fn lanczos_matches_dense() {
        let m = build_hyperplane(9, 3, 0).unwrap();
        let dense = dense_gap(&m).gap;
        let lz = lanczos_gap(&m, 300, 1);
        assert!((dense - lz.gap).abs() < 1e-9, "{dense} {}", lz.gap);
        let kv = m.apply(&lz.eigenvector);
        let res: f64 = kv.iter().zip(&lz.eigenvector).map(|(a, b)| (a + lz.gap * b).powi(2)).sum::<f64>().sqrt();
        assert!(res < 1e-6 * (m.dim() as f64).sqrt());
    }

    #[test]
    fn entropy_examples() {
        let m = build_hyperplane(4, 2, 0).unwrap();
        let d = m.dim();
        let one = DensityVector::new(vec![1.0; d]).unwrap();
        assert_eq!(entropy_functional(&m, &one).unwrap(), 0.0);
        let mut point = vec![0.0; d];
        point[2] = d as f64;
        let h = DensityVector::new(point).unwrap();
        assert!((entropy_functional(&m, &h).unwrap() - (d as f64).ln()).abs() < 1e-12);
        assert!(DensityVector::new(vec![-1.0; d]).is_err());
    }

    #[test]
    fn two_state_lsi_matches_scan() {
        let m = build_hyperplane(2, 1, 1).unwrap();
        let scan = (1..100_000)
            .map(|i| i as f64 / 100_000.0)
            .filter(|&p| (p - 0.5).abs() > 1e-9)
            .filter_map(|p| lsi_ratio(&m, &[p.sqrt(), (1.0 - p).sqrt()]))
            .fold(0.0, f64::max);
        let found = lsi_ratio_search(&m, 10, 200, 3).unwrap();
        assert!((found.ratio - scan).abs() < 1e-3, "{} {scan}", found.ratio);
    }

    #[test]
    fn exchangeable_single_site_laws() {
        let m = build_hyperplane(6, 2, 0).unwrap();
        for obs in [LocalObservable::ETA, LocalObservable::XI, LocalObservable::PSI] {
            let exact = microcanonical_expectation(&obs, 6, 2, 0).unwrap();
            for j in 0..=6 - obs.window {
                let mean =
                    m.states.iter().map(|c| (obs.eval)(&c.spins()[j..j + obs.window])).sum::<f64>() / m.dim() as f64;
                assert!((mean - exact).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_gamma_moment_is_one() {
        for mode in [MomentMode::Centered, MomentMode::Replacement] {
            let v = conditional_exp_moment(8, 2, 0, &LocalObservable::PSI, &CosineKernel, mode, 0.0).unwrap();
            assert_eq!(v, 1.0);
        }
        assert!(
            conditional_exp_moment(8, 3, 0, &LocalObservable::PSI, &CosineKernel, MomentMode::Centered, 0.1).is_err()
        );
    }

    #[test]
    fn centred_certificate_at_l8() {
        let c = certify_gamma(8, &[LocalObservable::PSI], &CosineKernel, MomentMode::Centered, 2f64.sqrt()).unwrap();
        assert!(c.gamma0 > 0.0 && c.gamma0.is_finite());
        assert!(c.worst_moment <= 2f64.sqrt() + 1e-12);
        assert!((c.worst_moment - 2f64.sqrt()).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn dirichlet_form_is_quadratic_form(seed in 0u64..1000, l in 2usize..=5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let hs = feasible_hyperplanes(l);
            let (n, z) = hs[rng.random_range(0..hs.len())];
            let m = build_hyperplane(l, n, z).unwrap();
            let f: Vec<f64> = (0..m.dim()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let kf = m.apply(&f);
            let q = -dot(&f, &kf) / m.dim() as f64;
            prop_assert!((dirichlet_form(&m, &f) - q).abs() < 1e-12);
        }

        #[test]
        fn entropy_decomposes(seed in 0u64..500, l in 3usize..=6) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let hs = feasible_hyperplanes(l);
            let (n, z) = hs[rng.random_range(0..hs.len())];
            let m = build_hyperplane(l, n, z).unwrap();
            let h = random_density(m.dim(), 0.5, &mut rng).unwrap();
            let e = entropy_decomposition(&m, &h).unwrap();
            prop_assert!((e.total - e.marginal - e.conditional).abs() < 1e-12);
            prop_assert!(e.total >= -1e-15);
        }
    }
}
