//! Product (grand-canonical) and microcanonical equilibrium measures.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{micro_flux, Configuration, Spin};

const DOMAIN_TOL: f64 = 1e-12;

/// Parameters of the product measure `p(0) = rho`, `p(+-1) = (1 - rho +- u) / 2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GibbsParams {
    rho: f64,
    u: f64,
}

impl GibbsParams {
    pub fn new(rho: f64, u: f64) -> Result<Self> {
        if !rho.is_finite() || !u.is_finite() || rho < -DOMAIN_TOL || rho + u.abs() > 1.0 + DOMAIN_TOL {
            return Err(Error::OutsideDomain { rho, u });
        }
        Ok(Self { rho: rho.clamp(0.0, 1.0), u })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn u(&self) -> f64 {
        self.u
    }

    /// Probabilities of `-1, 0, +1`.
    pub fn marginal(&self) -> [f64; 3] {
        let minus = ((1.0 - self.rho - self.u) * 0.5).max(0.0);
        let plus = ((1.0 - self.rho + self.u) * 0.5).max(0.0);
        [minus, self.rho, plus]
    }

    pub fn prob(&self, s: Spin) -> f64 {
        self.marginal()[s.index()]
    }

    pub fn sample_spin<R: Rng + ?Sized>(&self, rng: &mut R) -> Spin {
        let p = self.marginal();
        let x: f64 = rng.random::<f64>() * (p[0] + p[1] + p[2]);
        if x < p[0] {
            Spin::Minus
        } else if x < p[0] + p[1] {
            Spin::Zero
        } else {
            Spin::Plus
        }
    }
}

/// A function of `window` consecutive spins.
#[derive(Clone, Copy)]
pub struct LocalObservable {
    pub name: &'static str,
    pub window: usize,
    pub eval: fn(&[Spin]) -> f64,
}

impl std::fmt::Debug for LocalObservable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "LocalObservable({}, window {})", self.name, self.window)
    }
}

impl LocalObservable {
    pub const ETA: LocalObservable = LocalObservable { name: "eta", window: 1, eval: |w| w[0].eta() as f64 };
    pub const XI: LocalObservable = LocalObservable { name: "xi", window: 1, eval: |w| w[0].xi() as f64 };
    pub const PSI: LocalObservable =
        LocalObservable { name: "psi", window: 2, eval: |w| micro_flux(w[0], w[1]).psi as f64 };
    pub const PHI: LocalObservable =
        LocalObservable { name: "phi", window: 2, eval: |w| micro_flux(w[0], w[1]).phi as f64 };
    pub const PSI_S: LocalObservable =
        LocalObservable { name: "psi_s", window: 2, eval: |w| micro_flux(w[0], w[1]).psi_s as f64 };
    pub const PHI_S: LocalObservable =
        LocalObservable { name: "phi_s", window: 2, eval: |w| micro_flux(w[0], w[1]).phi_s as f64 };

    pub fn standard() -> [LocalObservable; 6] {
        [Self::ETA, Self::XI, Self::PSI, Self::PHI, Self::PSI_S, Self::PHI_S]
    }

    pub fn by_name(name: &str) -> Option<LocalObservable> {
        Self::standard().into_iter().find(|o| o.name == name)
    }

    /// Value at site `j` of a periodic configuration, reading `j..j+window`.
    #[inline]
    pub fn at(&self, c: &Configuration, j: usize) -> f64 {
        let mut buf = [Spin::Zero; 8];
        for (k, b) in buf.iter_mut().enumerate().take(self.window) {
            *b = c.at(j + k);
        }
        (self.eval)(&buf[..self.window])
    }
}

fn for_each_tuple(m: usize, mut f: impl FnMut(&[Spin])) {
    let mut buf = vec![Spin::Minus; m];
    let total = 3usize.pow(m as u32);
    for mut idx in 0..total {
        for b in buf.iter_mut() {
            *b = Spin::from_index(idx % 3);
            idx /= 3;
        }
        f(&buf);
    }
}

/// `Upsilon(rho, u) = E_{rho,u}[v]` by exact enumeration of the observable window.
pub fn upsilon(obs: &LocalObservable, g: &GibbsParams) -> f64 {
    let p = g.marginal();
    let mut acc = 0.0;
    for_each_tuple(obs.window, |w| {
        let weight: f64 = w.iter().map(|s| p[s.index()]).product();
        if weight > 0.0 {
            acc += weight * (obs.eval)(w);
        }
    });
    acc
}

/// Closed-form equilibrium fluxes `(E psi, E phi) = (rho u, rho + u^2 - 1)`.
pub fn upsilon_flux(rho: f64, u: f64) -> [f64; 2] {
    [rho * u, rho + u * u - 1.0]
}

/// Spin counts `(n_minus, n_zero, n_plus)` of the hyperplane `(l, N, Z)`.
pub fn hyperplane_counts(l: usize, holes: i64, charge: i64) -> Result<[usize; 3]> {
    let infeasible = Error::InfeasibleHyperplane { l, holes, charge };
    let l_i = l as i64;
    if holes < 0 || holes > l_i {
        return Err(infeasible);
    }
    let rest = l_i - holes;
    if (rest + charge) % 2 != 0 || charge.abs() > rest {
        return Err(infeasible);
    }
    let plus = (rest + charge) / 2;
    let minus = (rest - charge) / 2;
    Ok([minus as usize, holes as usize, plus as usize])
}

/// All `(N, Z)` pairs with a non-empty hyperplane in a block of `l` sites.
pub fn feasible_hyperplanes(l: usize) -> Vec<(i64, i64)> {
    let mut out = Vec::new();
    for holes in 0..=l as i64 {
        let rest = l as i64 - holes;
        let mut z = -rest;
        while z <= rest {
            out.push((holes, z));
            z += 2;
        }
    }
    out
}

/// Number of configurations in the hyperplane.
pub fn hyperplane_size(counts: [usize; 3]) -> u64 {
    let l = counts.iter().sum::<usize>() as u64;
    let mut out = 1u64;
    let mut remaining = l;
    for &k in &counts {
        out *= binomial(remaining, k as u64);
        remaining -= k as u64;
    }
    out
}

fn binomial(n: u64, k: u64) -> u64 {
    let k = k.min(n - k);
    let mut acc = 1u128;
    for i in 0..k {
        acc = acc * (n - i) as u128 / (i + 1) as u128;
    }
    acc as u64
}

/// Enumerates `Omega^l_{N,Z}` in lexicographic order (`- < 0 < +`).
pub fn enumerate_hyperplane(l: usize, holes: i64, charge: i64) -> Result<Vec<Configuration>> {
    let counts = hyperplane_counts(l, holes, charge)?;
    let size = hyperplane_size(counts);
    const LIMIT: u64 = 5_000_000;
    if size > LIMIT {
        return Err(Error::StateSpaceTooLarge { states: size, limit: LIMIT });
    }
    let mut out = Vec::with_capacity(size as usize);
    let mut buf = Vec::with_capacity(l);
    let mut left = counts;
    fn rec(l: usize, buf: &mut Vec<Spin>, left: &mut [usize; 3], out: &mut Vec<Configuration>) {
        if buf.len() == l {
            out.push(Configuration::new(buf.clone()).expect("non-empty block"));
            return;
        }
        for k in 0..3 {
            if left[k] > 0 {
                left[k] -= 1;
                buf.push(Spin::from_index(k));
                rec(l, buf, left, out);
                buf.pop();
                left[k] += 1;
            }
        }
    }
    rec(l, &mut buf, &mut left, &mut out);
    Ok(out)
}

/// Uniform sample from the hyperplane.
pub fn sample_hyperplane<R: Rng + ?Sized>(l: usize, holes: i64, charge: i64, rng: &mut R) -> Result<Configuration> {
    let counts = hyperplane_counts(l, holes, charge)?;
    let mut spins = Vec::with_capacity(l);
    for (k, &c) in counts.iter().enumerate() {
        spins.extend(std::iter::repeat_n(Spin::from_index(k), c));
    }
    spins.shuffle(rng);
    Configuration::new(spins)
}

/// Exact microcanonical expectation of a local observable sitting on sites
/// `offset .. offset + window` of the block.
///
/// Under the uniform measure on a hyperplane the spins are exchangeable, so
/// the law of any `m` sites is that of `m` draws without replacement; the
/// result is therefore independent of `offset` and exact for every `l`.
pub fn microcanonical_expectation(obs: &LocalObservable, l: usize, holes: i64, charge: i64) -> Result<f64> {
    let counts = hyperplane_counts(l, holes, charge)?;
    if obs.window > l {
        return Err(Error::InvalidParameter(format!("window {} exceeds block length {l}", obs.window)));
    }
    let mut acc = 0.0;
    for_each_tuple(obs.window, |w| {
        let mut left = counts;
        let mut p = 1.0;
        for (k, s) in w.iter().enumerate() {
            let i = s.index();
            if left[i] == 0 {
                p = 0.0;
                break;
            }
            p *= left[i] as f64 / (l - k) as f64;
            left[i] -= 1;
        }
        if p > 0.0 {
            acc += p * (obs.eval)(w);
        }
    });
    Ok(acc)
}

/// Writes `Upsilon` of each observable on a `(rho, u)` grid covering the domain.
pub fn write_expectation_table(path: &Path, observables: &[LocalObservable], grid: usize) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["rho", "u", "observable", "upsilon"])?;
    for i in 0..=grid {
        let rho = i as f64 / grid as f64;
        let umax = 1.0 - rho;
        for k in 0..=grid {
            let u = -umax + 2.0 * umax * k as f64 / grid as f64;
            let g = GibbsParams::new(rho, u)?;
            for o in observables {
                w.write_record(&[
                    format!("{rho:.6}"),
                    format!("{u:.6}"),
                    o.name.to_string(),
                    format!("{:.12e}", upsilon(o, &g)),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Writes the exact microcanonical expectations of the observables for every
/// feasible hyperplane of a block of `l` sites.
pub fn write_microcanonical_table(path: &Path, observables: &[LocalObservable], l: usize) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "l,N,Z,observable,expectation")?;
    for (holes, charge) in feasible_hyperplanes(l) {
        for o in observables {
            let e = microcanonical_expectation(o, l, holes, charge)?;
            writeln!(f, "{l},{holes},{charge},{},{e:.12e}", o.name)?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn marginal_sums_to_one() {
        let g = GibbsParams::new(0.3, -0.2).unwrap();
        let p = g.marginal();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!((p[0] - 0.45).abs() < 1e-15 && (p[2] - 0.25).abs() < 1e-15);
        assert!(GibbsParams::new(0.6, 0.5).is_err());
        assert!(GibbsParams::new(-0.1, 0.0).is_err());
    }

    #[test]
    fn conserved_expectations() {
        let g = GibbsParams::new(0.3, 0.1).unwrap();
        assert!((upsilon(&LocalObservable::ETA, &g) - 0.3).abs() < 1e-15);
        assert!((upsilon(&LocalObservable::XI, &g) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn flux_expectations_match_closed_form() {
        // Hand expansion over the nine spin pairs, independent of `upsilon`.
        for &(rho, u) in &[(0.3, 0.1), (0.0, 0.5), (0.5, -0.5), (1.0, 0.0), (0.2, -0.7)] {
            let pm = (1.0 - rho - u) / 2.0;
            let pp = (1.0 - rho + u) / 2.0;
            // psi contributions: (-,0): r=1, d_eta=-1; (0,+): r=1, d_eta=+1.
            let e_psi = -pm * rho + rho * pp;
            // phi contributions: (-,+): -4; (-,0): -1; (0,+): -1.
            let e_phi = -4.0 * pm * pp - pm * rho - rho * pp;
            let g = GibbsParams::new(rho, u).unwrap();
            let [a, b] = upsilon_flux(rho, u);
            assert!((upsilon(&LocalObservable::PSI, &g) - e_psi).abs() < 1e-14);
            assert!((upsilon(&LocalObservable::PHI, &g) - e_phi).abs() < 1e-14);
            assert!((a - e_psi).abs() < 1e-14, "psi {rho} {u}");
            assert!((b - e_phi).abs() < 1e-14, "phi {rho} {u}");
        }
    }

    #[test]
    fn symmetric_fluxes_have_zero_mean() {
        let g = GibbsParams::new(0.2, 0.3).unwrap();
        assert!(upsilon(&LocalObservable::PSI_S, &g).abs() < 1e-15);
        assert!(upsilon(&LocalObservable::PHI_S, &g).abs() < 1e-15);
    }

    #[test]
    fn hyperplane_sizes() {
        assert_eq!(enumerate_hyperplane(3, 1, 0).unwrap().len(), 6);
        assert!(matches!(enumerate_hyperplane(3, 1, 1), Err(Error::InfeasibleHyperplane { .. })));
        let all: u64 =
            feasible_hyperplanes(6).iter().map(|&(n, z)| hyperplane_size(hyperplane_counts(6, n, z).unwrap())).sum();
        assert_eq!(all, 3u64.pow(6));
        let list = enumerate_hyperplane(4, 2, 0).unwrap();
        assert_eq!(list[0].to_string(), "-00+");
        for c in &list {
            let p = c.conserved();
            assert_eq!((p.holes, p.charge), (2, 0));
        }
    }

    #[test]
    fn microcanonical_matches_enumeration_at_every_offset() {
        for (l, n, z) in [(6, 2, 0), (7, 2, 1), (8, 3, -1), (5, 0, 1)] {
            let states = enumerate_hyperplane(l, n, z).unwrap();
            for o in LocalObservable::standard() {
                let exact = microcanonical_expectation(&o, l, n, z).unwrap();
                for offset in 0..=(l - o.window) {
                    let mean = states.iter().map(|c| (o.eval)(&c.spins()[offset..offset + o.window])).sum::<f64>()
                        / states.len() as f64;
                    assert!((mean - exact).abs() < 1e-12, "{} at {offset}: {mean} vs {exact}", o.name);
                }
            }
        }
    }

    #[test]
    fn hyperplane_sampler_is_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let states = enumerate_hyperplane(4, 1, 1).unwrap();
        let mut counts = std::collections::HashMap::new();
        let draws = 24_000;
        for _ in 0..draws {
            *counts.entry(sample_hyperplane(4, 1, 1, &mut rng).unwrap()).or_insert(0usize) += 1;
        }
        let p = 1.0 / states.len() as f64;
        let se = (p * (1.0 - p) / draws as f64).sqrt();
        for s in &states {
            let f = counts[s] as f64 / draws as f64;
            assert!((f - p).abs() < 4.0 * se, "{s}: {f}");
        }
    }

    proptest! {
        #[test]
        fn upsilon_is_linear(rho in 0.0f64..1.0, t in -1.0f64..1.0, alpha in -3.0f64..3.0) {
            let u = t * (1.0 - rho);
            let g = GibbsParams::new(rho, u).unwrap();
            let combo = LocalObservable { name: "c", window: 2, eval: |w| {
                2.0 * micro_flux(w[0], w[1]).psi as f64 + w[1].xi() as f64
            }};
            let lhs = alpha * upsilon(&combo, &g);
            let rhs = alpha * (2.0 * upsilon(&LocalObservable::PSI, &g) + upsilon(&LocalObservable::XI, &g));
            prop_assert!((lhs - rhs).abs() < 1e-12);
        }
    }
}
