//! Spins, periodic configurations and the local jump rates of the two-species
//! exclusion process with collisions.
//!
//! A site carries a spin in {-1, 0, +1}. The conserved variables are
//! `eta = 1 - |spin|` (empty sites) and `xi = spin` (signed particles).
//! Everything here is exact integer arithmetic; floating point starts in the
//! observables layer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Value of a single site.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(i8)]
pub enum Spin {
    Minus = -1,
    Zero = 0,
    Plus = 1,
}

impl Spin {
    pub const ALL: [Spin; 3] = [Spin::Minus, Spin::Zero, Spin::Plus];

    pub fn from_i64(v: i64) -> Result<Spin> {
        match v {
            -1 => Ok(Spin::Minus),
            0 => Ok(Spin::Zero),
            1 => Ok(Spin::Plus),
            other => Err(Error::InvalidSpin(other)),
        }
    }

    #[inline]
    pub fn value(self) -> i32 {
        self as i8 as i32
    }

    /// `eta = 1 - |spin|`.
    #[inline]
    pub fn eta(self) -> i32 {
        1 - self.value().abs()
    }

    /// `xi = spin`.
    #[inline]
    pub fn xi(self) -> i32 {
        self.value()
    }

    /// Index 0, 1, 2 for -1, 0, +1.
    #[inline]
    pub fn index(self) -> usize {
        (self.value() + 1) as usize
    }

    #[inline]
    pub fn from_index(i: usize) -> Spin {
        Spin::ALL[i]
    }

    pub fn to_char(self) -> char {
        match self {
            Spin::Minus => '-',
            Spin::Zero => '0',
            Spin::Plus => '+',
        }
    }

    pub fn from_char(c: char) -> Result<Spin> {
        match c {
            '-' => Ok(Spin::Minus),
            '0' => Ok(Spin::Zero),
            '+' => Ok(Spin::Plus),
            other => Err(Error::InvalidSpinChar(other)),
        }
    }
}

/// Totals `N = sum eta` and `Z = sum xi`, both conserved by every exchange.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConservedPair {
    pub holes: i64,
    pub charge: i64,
}

/// A configuration on the discrete torus `Z / nZ`, or an open block of sites
/// when used for microcanonical computations.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Configuration {
    spins: Vec<Spin>,
}

impl Configuration {
    /// Periodic configurations need at least three sites so that every bond
    /// touches two distinct neighbours.
    pub const MIN_PERIODIC: usize = 3;

    pub fn new(spins: Vec<Spin>) -> Result<Self> {
        if spins.is_empty() {
            return Err(Error::LatticeTooSmall(0, 1));
        }
        Ok(Self { spins })
    }

    pub fn from_values(values: &[i64]) -> Result<Self> {
        let spins = values.iter().map(|&v| Spin::from_i64(v)).collect::<Result<Vec<_>>>()?;
        Self::new(spins)
    }

    pub fn uniform(n: usize, spin: Spin) -> Self {
        Self { spins: vec![spin; n.max(1)] }
    }

    /// Decodes the base-3 index used by the generator matrix (site 0 is the
    /// least significant digit, digit = spin + 1).
    pub fn from_index(mut index: u64, n: usize) -> Self {
        let mut spins = Vec::with_capacity(n);
        for _ in 0..n {
            spins.push(Spin::from_index((index % 3) as usize));
            index /= 3;
        }
        Self { spins }
    }

    pub fn index(&self) -> u64 {
        self.spins.iter().rev().fold(0u64, |acc, s| acc * 3 + s.index() as u64)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.spins.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.spins.is_empty()
    }

    #[inline]
    pub fn spins(&self) -> &[Spin] {
        &self.spins
    }

    /// Periodic access.
    #[inline]
    pub fn get(&self, j: isize) -> Spin {
        let n = self.spins.len() as isize;
        self.spins[j.rem_euclid(n) as usize]
    }

    #[inline]
    pub fn at(&self, j: usize) -> Spin {
        self.spins[j % self.spins.len()]
    }

    pub fn set(&mut self, j: usize, s: Spin) {
        let n = self.spins.len();
        self.spins[j % n] = s;
    }

    /// Swaps sites `j` and `j + 1` (periodically) in place.
    #[inline]
    pub fn exchange(&mut self, j: usize) {
        let n = self.spins.len();
        let j = j % n;
        self.spins.swap(j, (j + 1) % n);
    }

    /// The configuration `Theta_j omega`.
    pub fn exchanged(&self, j: usize) -> Self {
        let mut c = self.clone();
        c.exchange(j);
        c
    }

    pub fn conserved(&self) -> ConservedPair {
        let mut holes = 0i64;
        let mut charge = 0i64;
        for s in &self.spins {
            holes += s.eta() as i64;
            charge += s.xi() as i64;
        }
        ConservedPair { holes, charge }
    }

    pub fn eta(&self, j: usize) -> i32 {
        self.at(j).eta()
    }

    pub fn xi(&self, j: usize) -> i32 {
        self.at(j).xi()
    }

    /// Asymmetric rate of bond `(j, j+1)`.
    #[inline]
    pub fn rate_r(&self, j: usize) -> u32 {
        rate_r(self.at(j), self.at(j + 1))
    }

    /// Symmetric rate of bond `(j, j+1)`.
    #[inline]
    pub fn rate_s(&self, j: usize) -> u32 {
        rate_s(self.at(j), self.at(j + 1))
    }

    pub fn micro_flux(&self, j: usize) -> MicroFlux {
        micro_flux(self.at(j), self.at(j + 1))
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.spins {
            write!(f, "{}", s.to_char())?;
        }
        Ok(())
    }
}

impl FromStr for Configuration {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let spins = s.trim().chars().map(Spin::from_char).collect::<Result<Vec<_>>>()?;
        Self::new(spins)
    }
}

/// Table of the asymmetric rate `r(w_j, w_{j+1})`.
///
/// A `-1` particle moves right over holes and collides with `+1` particles at
/// rate two; a `+1` particle moves left over holes.
#[inline]
pub fn rate_r(a: Spin, b: Spin) -> u32 {
    match (a, b) {
        (Spin::Minus, Spin::Plus) => 2,
        (Spin::Minus, Spin::Zero) => 1,
        (Spin::Zero, Spin::Plus) => 1,
        _ => 0,
    }
}

/// `r = w^-_j (1 - w^-_{j+1}) + w^+_{j+1} (1 - w^+_j)` with `w^+ = 1{w = +1}`,
/// `w^- = 1{w = -1}`.
pub fn rate_r_indicator_form(a: Spin, b: Spin) -> u32 {
    let minus = |s: Spin| (s == Spin::Minus) as u32;
    let plus = |s: Spin| (s == Spin::Plus) as u32;
    minus(a) * (1 - minus(b)) + plus(b) * (1 - plus(a))
}

/// Four times the asymmetric rate, written in the conserved variables:
/// `(1 - eta_j - xi_j)(1 + eta_{j+1} + xi_{j+1}) + (1 + eta_j - xi_j)(1 - eta_{j+1} + xi_{j+1})`.
pub fn rate_r_times4_conserved_form(a: Spin, b: Spin) -> i32 {
    let (ej, xj, ek, xk) = (a.eta(), a.xi(), b.eta(), b.xi());
    (1 - ej - xj) * (1 + ek + xk) + (1 + ej - xj) * (1 - ek + xk)
}

/// Symmetric stirring rate `1{w_j != w_{j+1}}`.
#[inline]
pub fn rate_s(a: Spin, b: Spin) -> u32 {
    (a != b) as u32
}

/// Microscopic currents across a bond.
///
/// `psi`, `phi` are the asymmetric currents of `eta` and `xi`,
/// `psi_s`, `phi_s` the symmetric ones. Under the generators,
/// `L eta_j = psi_{j-1} - psi_j` and `K eta_j = psi_s_{j-1} - psi_s_j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MicroFlux {
    pub psi: i32,
    pub phi: i32,
    pub psi_s: i32,
    pub phi_s: i32,
}

pub fn micro_flux(a: Spin, b: Spin) -> MicroFlux {
    let r = rate_r(a, b) as i32;
    let d_eta = a.eta() - b.eta();
    let d_xi = a.xi() - b.xi();
    MicroFlux { psi: r * d_eta, phi: r * d_xi, psi_s: d_eta, phi_s: d_xi }
}

/// `2 psi = eta_j xi_{j+1} + eta_{j+1} xi_j + (eta_j - eta_{j+1})`.
pub fn psi_times2_closed_form(a: Spin, b: Spin) -> i32 {
    let (ej, xj, ek, xk) = (a.eta(), a.xi(), b.eta(), b.xi());
    ej * xk + ek * xj + (ej - ek)
}

/// `2 phi = (eta_j + eta_{j+1} - 2 + 2 xi_j xi_{j+1}) + (xi_{j+1} eta_j - xi_j eta_{j+1}) + 2 (xi_j - xi_{j+1})`.
pub fn phi_times2_closed_form(a: Spin, b: Spin) -> i32 {
    let (ej, xj, ek, xk) = (a.eta(), a.xi(), b.eta(), b.xi());
    (ej + ek - 2 + 2 * xj * xk) + (xk * ej - xj * ek) + 2 * (xj - xk)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairs() -> impl Iterator<Item = (Spin, Spin)> {
        Spin::ALL.into_iter().flat_map(|a| Spin::ALL.into_iter().map(move |b| (a, b)))
    }

    #[test]
    fn rate_table_values() {
        use Spin::*;
        assert_eq!(rate_r(Minus, Plus), 2);
        assert_eq!(rate_r(Minus, Zero), 1);
        assert_eq!(rate_r(Zero, Plus), 1);
        for (a, b) in [(Plus, Minus), (Zero, Minus), (Plus, Zero)] {
            assert_eq!(rate_r(a, b), 0);
        }
        for s in Spin::ALL {
            assert_eq!(rate_r(s, s), 0);
            assert_eq!(rate_s(s, s), 0);
        }
    }

    #[test]
    fn three_rate_forms_agree() {
        for (a, b) in pairs() {
            let r = rate_r(a, b);
            assert_eq!(rate_r_indicator_form(a, b), r, "{a:?} {b:?}");
            assert_eq!(rate_r_times4_conserved_form(a, b), 4 * r as i32, "{a:?} {b:?}");
        }
    }

    #[test]
    fn flux_closed_forms_agree() {
        for (a, b) in pairs() {
            let f = micro_flux(a, b);
            assert_eq!(psi_times2_closed_form(a, b), 2 * f.psi, "{a:?} {b:?}");
            assert_eq!(phi_times2_closed_form(a, b), 2 * f.phi, "{a:?} {b:?}");
        }
        assert_eq!(micro_flux(Spin::Minus, Spin::Plus).phi, -4);
        assert_eq!(micro_flux(Spin::Zero, Spin::Plus).psi, 1);
    }

    #[test]
    fn parse_and_display_roundtrip() {
        let c: Configuration = "-0+".parse().unwrap();
        assert_eq!(c.spins(), &[Spin::Minus, Spin::Zero, Spin::Plus]);
        assert_eq!(c.to_string(), "-0+");
        assert!("-x+".parse::<Configuration>().is_err());
        assert!(Configuration::from_values(&[0, 2]).is_err());
    }

    #[test]
    fn periodic_exchange_wraps() {
        let c: Configuration = "-0+".parse().unwrap();
        assert_eq!(c.exchanged(2).to_string(), "+0-");
        assert_eq!(c.rate_r(2), 0);
        assert_eq!(c.rate_r(0), 1);
        assert_eq!(c.get(-1), Spin::Plus);
    }

    #[test]
    fn index_roundtrip() {
        for idx in 0..81u64 {
            assert_eq!(Configuration::from_index(idx, 4).index(), idx);
        }
    }

    fn config_strategy() -> impl Strategy<Value = Configuration> {
        prop::collection::vec(-1i64..=1, 3..40).prop_map(|v| Configuration::from_values(&v).unwrap())
    }

    proptest! {
        #[test]
        fn exchange_conserves_totals(c in config_strategy(), j in 0usize..64) {
            let before = c.conserved();
            let after = c.exchanged(j).conserved();
            prop_assert_eq!(before, after);
        }

        #[test]
        fn exchange_is_an_involution(c in config_strategy(), j in 0usize..64) {
            prop_assert_eq!(c.exchanged(j).exchanged(j), c);
        }

        #[test]
        fn continuity_equations_hold(c in config_strategy(), j in 0usize..64) {
            // Summing the currents around the torus gives zero net change.
            let n = c.len();
            let j = j % n;
            let total_psi: i32 = (0..n).map(|k| c.micro_flux(k).psi_s).sum();
            prop_assert_eq!(total_psi, 0);
            let f_prev = c.micro_flux((j + n - 1) % n);
            let f = c.micro_flux(j);
            // The symmetric current difference is the discrete Laplacian.
            let lap = c.eta((j + n - 1) % n) - 2 * c.eta(j) + c.eta(j + 1);
            prop_assert_eq!(f_prev.psi_s - f.psi_s, lap);
        }
    }
}
