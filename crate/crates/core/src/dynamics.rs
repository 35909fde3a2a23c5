//! Exact continuous-time simulation of the generator `G = n L + n^2 sigma K`
//! on the torus, plus the explicit sparse generator for small lattices.
//!
//! Time is macroscopic: the `n` and `n^2 sigma` factors are part of the bond
//! rates, so a run to `t_final` is a run of the rescaled process.

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::equilibrium::GibbsParams;
use crate::error::{Error, Result};
use crate::lattice::{rate_r, rate_s, Configuration};

/// Lattice size and viscosity parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DynamicsParams {
    pub n: usize,
    pub sigma: f64,
}

impl DynamicsParams {
    pub fn new(n: usize, sigma: f64) -> Result<Self> {
        if n < Configuration::MIN_PERIODIC {
            return Err(Error::LatticeTooSmall(n, Configuration::MIN_PERIODIC));
        }
        if !(sigma > 0.0 && sigma < 1.0) {
            return Err(Error::InvalidParameter(format!("sigma must lie in (0, 1), got {sigma}")));
        }
        Ok(Self { n, sigma })
    }

    /// `sigma = n^{-beta}`.
    pub fn from_beta(n: usize, beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta < 0.5) {
            return Err(Error::InvalidParameter(format!("beta must lie in (0, 1/2), got {beta}")));
        }
        Self::new(n, (n as f64).powf(-beta))
    }

    #[inline]
    pub fn asym_scale(&self) -> f64 {
        self.n as f64
    }

    #[inline]
    pub fn sym_scale(&self) -> f64 {
        (self.n * self.n) as f64 * self.sigma
    }
}

/// Total rate of the exchange across bond `(j, j+1)`.
#[inline]
pub fn bond_rate(c: &Configuration, j: usize, p: &DynamicsParams) -> f64 {
    let (a, b) = (c.at(j), c.at(j + 1));
    p.asym_scale() * rate_r(a, b) as f64 + p.sym_scale() * rate_s(a, b) as f64
}

/// Binary tree of bond rates supporting O(log n) updates and sampling.
#[derive(Clone, Debug)]
pub struct RateTree {
    leaves: usize,
    nodes: Vec<f64>,
}

impl RateTree {
    pub fn new(rates: &[f64]) -> Self {
        let leaves = rates.len().next_power_of_two().max(1);
        let mut nodes = vec![0.0; 2 * leaves];
        nodes[leaves..leaves + rates.len()].copy_from_slice(rates);
        let mut tree = Self { leaves, nodes };
        tree.rebuild_internal();
        tree
    }

    fn rebuild_internal(&mut self) {
        for i in (1..self.leaves).rev() {
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1];
        }
    }

    #[inline]
    pub fn total(&self) -> f64 {
        self.nodes[1.min(self.nodes.len() - 1)]
    }

    #[inline]
    pub fn get(&self, j: usize) -> f64 {
        self.nodes[self.leaves + j]
    }

    /// Sets a leaf and recomputes its ancestors from their children, so
    /// internal sums never accumulate drift.
    #[inline]
    pub fn update(&mut self, j: usize, rate: f64) {
        let mut i = self.leaves + j;
        self.nodes[i] = rate;
        while i > 1 {
            i >>= 1;
            self.nodes[i] = self.nodes[2 * i] + self.nodes[2 * i + 1];
        }
    }

    /// Leaf `j` chosen with probability `rate_j / total`, driven by `x` in `[0, 1)`.
    #[inline]
    pub fn sample(&self, x: f64) -> usize {
        if self.leaves == 1 {
            return 0;
        }
        let mut target = x * self.total();
        let mut i = 1;
        while i < self.leaves {
            let left = self.nodes[2 * i];
            if target < left {
                i *= 2;
            } else {
                target -= left;
                i = 2 * i + 1;
            }
        }
        i - self.leaves
    }
}

/// Receives the state at each requested snapshot time.
pub trait Observer {
    fn observe(&mut self, index: usize, time: f64, config: &Configuration);
}

/// Snapshots of one trajectory on a fixed time grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub params: DynamicsParams,
    pub seed: u64,
    pub stream: u64,
    pub times: Vec<f64>,
    #[serde(with = "config_strings")]
    pub snapshots: Vec<Configuration>,
    pub events: u64,
    /// Set when the event budget ran out before the final time; snapshots
    /// after that point are missing.
    pub truncated: bool,
}

mod config_strings {
    use super::Configuration;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(v: &[Configuration], s: S) -> Result<S::Ok, S::Error> {
        v.iter().map(|c| c.to_string()).collect::<Vec<_>>().serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Configuration>, D::Error> {
        let raw = Vec::<String>::deserialize(d)?;
        raw.iter().map(|s| s.parse().map_err(serde::de::Error::custom)).collect()
    }
}

impl TrajectoryRecord {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

struct Recorder<'a> {
    snapshots: &'a mut Vec<Configuration>,
}

impl Observer for Recorder<'_> {
    fn observe(&mut self, _index: usize, _time: f64, config: &Configuration) {
        self.snapshots.push(config.clone());
    }
}

/// Outcome of a single Gillespie step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepOutcome {
    Event {
        bond: usize,
        time: f64,
    },
    /// All rates are zero (a constant configuration); nothing ever happens.
    Absorbing,
}

/// Live state of a simulation.
#[derive(Clone, Debug)]
pub struct Simulator {
    params: DynamicsParams,
    config: Configuration,
    tree: RateTree,
    time: f64,
    events: u64,
    since_rebuild: u64,
}

impl Simulator {
    pub const REBUILD_INTERVAL: u64 = 1_000_000;

    pub fn new(params: DynamicsParams, config: Configuration) -> Result<Self> {
        if config.len() != params.n {
            return Err(Error::InvalidParameter(format!(
                "configuration has {} sites, parameters say {}",
                config.len(),
                params.n
            )));
        }
        let rates: Vec<f64> = (0..params.n).map(|j| bond_rate(&config, j, &params)).collect();
        Ok(Self { params, config, tree: RateTree::new(&rates), time: 0.0, events: 0, since_rebuild: 0 })
    }

    pub fn config(&self) -> &Configuration {
        &self.config
    }

    pub fn time(&self) -> f64 {
        self.time
    }

    pub fn events(&self) -> u64 {
        self.events
    }

    pub fn total_rate(&self) -> f64 {
        self.tree.total()
    }

    pub fn tree(&self) -> &RateTree {
        &self.tree
    }

    /// Draws the next waiting time and bond without applying the event.
    #[inline]
    fn propose<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<(f64, usize)> {
        let total = self.tree.total();
        if total <= 0.0 {
            return None;
        }
        let dt: f64 = rng.sample::<f64, _>(Exp1) / total;
        loop {
            let j = self.tree.sample(rng.random::<f64>());
            if j < self.params.n && self.tree.get(j) > 0.0 {
                return Some((dt, j));
            }
        }
    }

    #[inline]
    fn apply(&mut self, j: usize, dt: f64) {
        let n = self.params.n;
        self.config.exchange(j);
        for b in [(j + n - 1) % n, j, (j + 1) % n] {
            let rate = bond_rate(&self.config, b, &self.params);
            self.tree.update(b, rate);
        }
        self.time += dt;
        self.events += 1;
        self.since_rebuild += 1;
        if self.since_rebuild >= Self::REBUILD_INTERVAL {
            self.rebuild();
        }
    }

    /// Recomputes every bond rate from the configuration.
    pub fn rebuild(&mut self) {
        let rates: Vec<f64> = (0..self.params.n).map(|j| bond_rate(&self.config, j, &self.params)).collect();
        self.tree = RateTree::new(&rates);
        self.since_rebuild = 0;
    }

    /// Performs one event.
    pub fn step<R: Rng + ?Sized>(&mut self, rng: &mut R) -> StepOutcome {
        match self.propose(rng) {
            None => StepOutcome::Absorbing,
            Some((dt, j)) => {
                self.apply(j, dt);
                StepOutcome::Event { bond: j, time: self.time }
            }
        }
    }

    /// Runs until `times.last()`, reporting the state at each grid time
    /// (the state after every event with time `<= t_k`). Returns `false` if
    /// the event budget ran out first.
    pub fn run_observed<R: Rng + ?Sized, O: Observer>(
        &mut self,
        times: &[f64],
        budget: Option<u64>,
        rng: &mut R,
        observer: &mut O,
    ) -> bool {
        let mut k = 0;
        while k < times.len() && times[k] <= self.time {
            observer.observe(k, times[k], &self.config);
            k += 1;
        }
        let Some(&t_final) = times.last() else { return true };
        let start_events = self.events;
        while k < times.len() {
            if budget.is_some_and(|b| self.events - start_events >= b) {
                return false;
            }
            let Some((dt, j)) = self.propose(rng) else {
                while k < times.len() {
                    observer.observe(k, times[k], &self.config);
                    k += 1;
                }
                break;
            };
            let t_next = self.time + dt;
            while k < times.len() && times[k] < t_next {
                observer.observe(k, times[k], &self.config);
                k += 1;
            }
            if t_next > t_final {
                self.time = t_final;
                break;
            }
            self.apply(j, dt);
        }
        true
    }
}

/// Uniform grid `0, T/K, ..., T` with `K = intervals`.
pub fn time_grid(t_final: f64, intervals: usize) -> Vec<f64> {
    (0..=intervals).map(|k| t_final * k as f64 / intervals as f64).collect()
}

/// Simulates one trajectory and records the configuration at every grid time.
pub fn simulate<R: Rng + ?Sized>(
    params: DynamicsParams,
    init: Configuration,
    times: &[f64],
    budget: Option<u64>,
    rng: &mut R,
) -> Result<TrajectoryRecord> {
    if times.is_empty() || times.windows(2).any(|w| w[1] < w[0]) || times[0] < 0.0 {
        return Err(Error::InvalidParameter("snapshot times must be non-empty, non-negative and sorted".into()));
    }
    let mut sim = Simulator::new(params, init)?;
    let mut snapshots = Vec::with_capacity(times.len());
    let complete = sim.run_observed(times, budget, rng, &mut Recorder { snapshots: &mut snapshots });
    Ok(TrajectoryRecord {
        params,
        seed: 0,
        stream: 0,
        times: times[..snapshots.len()].to_vec(),
        snapshots,
        events: sim.events(),
        truncated: !complete,
    })
}

/// Macroscopic initial data `x -> (rho_0(x), u_0(x))` on the unit torus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialProfile {
    Constant {
        rho: f64,
        u: f64,
    },
    /// `left` on `[0, x0)`, `right` on `[x0, 1)`.
    Riemann {
        left: [f64; 2],
        right: [f64; 2],
        x0: f64,
    },
    /// `rho = rho0 + rho1 sin(2 pi x)`, `u = u0 + u1 cos(2 pi x)`.
    Sine {
        rho0: f64,
        rho1: f64,
        u0: f64,
        u1: f64,
    },
}

impl InitialProfile {
    pub fn at(&self, x: f64) -> (f64, f64) {
        let x = x.rem_euclid(1.0);
        match *self {
            InitialProfile::Constant { rho, u } => (rho, u),
            InitialProfile::Riemann { left, right, x0 } => {
                let s = if x < x0 { left } else { right };
                (s[0], s[1])
            }
            InitialProfile::Sine { rho0, rho1, u0, u1 } => {
                let th = 2.0 * std::f64::consts::PI * x;
                (rho0 + rho1 * th.sin(), u0 + u1 * th.cos())
            }
        }
    }

    /// Checks every value the profile can take lies in the domain.
    pub fn validate(&self) -> Result<()> {
        let probe = 4096;
        for i in 0..probe {
            let (rho, u) = self.at(i as f64 / probe as f64);
            GibbsParams::new(rho, u)?;
        }
        Ok(())
    }
}

/// Product of Gibbs marginals with parameters `profile(j / n)` at site `j`.
pub fn sample_initial_profile<R: Rng + ?Sized>(
    profile: &InitialProfile,
    n: usize,
    rng: &mut R,
) -> Result<Configuration> {
    let mut spins = Vec::with_capacity(n);
    for j in 0..n {
        let (rho, u) = profile.at(j as f64 / n as f64);
        spins.push(GibbsParams::new(rho, u)?.sample_spin(rng));
    }
    Configuration::new(spins)
}

/// Sparse generator `G` on `{-1,0,1}^n`, states indexed by
/// [`Configuration::index`].
#[derive(Clone, Debug)]
pub struct SparseGenerator {
    pub n: usize,
    /// Off-diagonal entries `(target, rate)` of each row.
    pub rows: Vec<Vec<(u32, f64)>>,
    /// Diagonal entries (minus the total exit rate).
    pub diag: Vec<f64>,
}

impl SparseGenerator {
    pub fn dim(&self) -> usize {
        self.diag.len()
    }

    /// `(G f)(c) = sum_c' G(c, c') f(c')`.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        (0..self.dim())
            .map(|i| self.diag[i] * f[i] + self.rows[i].iter().map(|&(k, w)| w * f[k as usize]).sum::<f64>())
            .collect()
    }

    /// `(pi G)(c') = sum_c pi(c) G(c, c')`.
    pub fn apply_left(&self, pi: &[f64]) -> Vec<f64> {
        let mut out: Vec<f64> = (0..self.dim()).map(|i| pi[i] * self.diag[i]).collect();
        for (i, row) in self.rows.iter().enumerate() {
            for &(k, w) in row {
                out[k as usize] += pi[i] * w;
            }
        }
        out
    }

    /// Row sums, which vanish for a generator.
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.dim()).map(|i| self.diag[i] + self.rows[i].iter().map(|&(_, w)| w).sum::<f64>()).collect()
    }

    /// `(exp(t G) f)` by uniformization: a Poisson mixture of powers of the
    /// stochastic matrix `I + G / lambda`.
    pub fn transient_apply(&self, f: &[f64], t: f64) -> Vec<f64> {
        let lambda = self.diag.iter().fold(0.0f64, |m, d| m.max(-d)).max(1e-300);
        let mean = lambda * t;
        let mut term = f.to_vec();
        let mut weight = (-mean).exp();
        let mut out: Vec<f64> = term.iter().map(|v| weight * v).collect();
        let mut mass = weight;
        let mut k = 0usize;
        while 1.0 - mass > 1e-16 && k < 100_000 {
            k += 1;
            let g = self.apply(&term);
            for (v, gv) in term.iter_mut().zip(g) {
                *v += gv / lambda;
            }
            weight *= mean / k as f64;
            mass += weight;
            for (o, v) in out.iter_mut().zip(&term) {
                *o += weight * v;
            }
        }
        out
    }

    /// Vector of the product measure `pi_{rho,u}` over all states.
    pub fn product_measure(&self, g: &GibbsParams) -> Vec<f64> {
        let p = g.marginal();
        (0..self.dim() as u64)
            .map(|i| Configuration::from_index(i, self.n).spins().iter().map(|s| p[s.index()]).product())
            .collect()
    }
}

/// Explicit generator for `n <= 8`.
pub fn generator_matrix(p: &DynamicsParams) -> Result<SparseGenerator> {
    const MAX_N: usize = 8;
    if p.n > MAX_N {
        return Err(Error::StateSpaceTooLarge { states: 3u64.pow(p.n as u32), limit: 3u64.pow(MAX_N as u32) });
    }
    let dim = 3usize.pow(p.n as u32);
    let mut rows = Vec::with_capacity(dim);
    let mut diag = Vec::with_capacity(dim);
    for i in 0..dim {
        let c = Configuration::from_index(i as u64, p.n);
        let mut row: Vec<(u32, f64)> = Vec::new();
        let mut exit = 0.0;
        for j in 0..p.n {
            let w = bond_rate(&c, j, p);
            if w > 0.0 {
                let target = c.exchanged(j).index() as u32;
                match row.iter_mut().find(|(k, _)| *k == target) {
                    Some(e) => e.1 += w,
                    None => row.push((target, w)),
                }
                exit += w;
            }
        }
        rows.push(row);
        diag.push(-exit);
    }
    Ok(SparseGenerator { n: p.n, rows, diag })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn params_validation() {
        assert!(DynamicsParams::new(2, 0.5).is_err());
        assert!(DynamicsParams::new(10, 1.0).is_err());
        let p = DynamicsParams::from_beta(512, 0.4).unwrap();
        assert!((p.sigma - 512f64.powf(-0.4)).abs() < 1e-15);
    }

    #[test]
    fn rate_tree_sampling_frequencies() {
        let rates = [1.0, 0.0, 3.0, 2.0, 0.5];
        let tree = RateTree::new(&rates);
        assert!((tree.total() - 6.5).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut counts = [0usize; 5];
        let draws = 200_000;
        for _ in 0..draws {
            counts[tree.sample(rng.random())] += 1;
        }
        assert_eq!(counts[1], 0);
        for (c, r) in counts.iter().zip(rates) {
            let p = r / 6.5;
            let se = (p * (1.0 - p) / draws as f64).sqrt().max(1e-12);
            assert!((*c as f64 / draws as f64 - p).abs() < 4.0 * se);
        }
    }

    #[test]
    fn tree_stays_consistent_over_a_million_events() {
        let p = DynamicsParams::new(128, 0.2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let profile = InitialProfile::Constant { rho: 0.3, u: 0.1 };
        let init = sample_initial_profile(&profile, p.n, &mut rng).unwrap();
        let mut sim = Simulator::new(p, init).unwrap();
        for _ in 0..(Simulator::REBUILD_INTERVAL - 1) {
            sim.step(&mut rng);
        }
        let direct: f64 = (0..p.n).map(|j| bond_rate(sim.config(), j, &p)).sum();
        assert!((sim.total_rate() - direct).abs() <= 1e-9 * direct);
        for j in 0..p.n {
            assert_eq!(sim.tree().get(j), bond_rate(sim.config(), j, &p));
        }
    }

    #[test]
    fn constant_configuration_is_absorbing() {
        let p = DynamicsParams::new(8, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let times = time_grid(1.0, 4);
        let rec = simulate(p, Configuration::uniform(8, crate::lattice::Spin::Plus), &times, None, &mut rng).unwrap();
        assert_eq!(rec.events, 0);
        assert_eq!(rec.snapshots.len(), 5);
        assert!(!rec.truncated);
    }

    #[test]
    fn budget_truncates() {
        let p = DynamicsParams::new(64, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let init = sample_initial_profile(&InitialProfile::Constant { rho: 0.3, u: 0.0 }, 64, &mut rng).unwrap();
        let rec = simulate(p, init, &time_grid(1.0, 10), Some(100), &mut rng).unwrap();
        assert!(rec.truncated);
        assert_eq!(rec.events, 100);
        assert!(rec.snapshots.len() < 11);
    }

    #[test]
    fn record_json_roundtrip() {
        let p = DynamicsParams::new(16, 0.4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let init = sample_initial_profile(&InitialProfile::Constant { rho: 0.4, u: 0.2 }, 16, &mut rng).unwrap();
        let rec = simulate(p, init, &time_grid(0.1, 3), None, &mut rng).unwrap();
        let back = TrajectoryRecord::from_json(&rec.to_json().unwrap()).unwrap();
        assert_eq!(rec, back);
    }

    #[test]
    fn same_seed_same_trajectory() {
        let p = DynamicsParams::new(32, 0.4).unwrap();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let init = sample_initial_profile(&InitialProfile::Constant { rho: 0.2, u: -0.3 }, 32, &mut rng).unwrap();
            simulate(p, init, &time_grid(0.05, 5), None, &mut rng).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn generator_rows_sum_to_zero() {
        let p = DynamicsParams::new(4, 0.5).unwrap();
        let g = generator_matrix(&p).unwrap();
        assert_eq!(g.dim(), 81);
        assert!(g.row_sums().iter().all(|s| s.abs() < 1e-12));
        assert!(generator_matrix(&DynamicsParams::new(9, 0.5).unwrap()).is_err());
    }

    #[test]
    fn product_measures_are_stationary() {
        for n in 3..=6 {
            let p = DynamicsParams::new(n, 0.37).unwrap();
            let g = generator_matrix(&p).unwrap();
            for &(rho, u) in &[(0.2, 0.1), (0.5, -0.3), (0.0, 0.4), (0.7, 0.0)] {
                let pi = g.product_measure(&GibbsParams::new(rho, u).unwrap());
                let res: f64 = g.apply_left(&pi).iter().map(|v| v.abs()).sum();
                assert!(res < 1e-12, "n={n} rho={rho} u={u}: {res}");
            }
        }
    }

    #[test]
    fn transient_is_identity_at_zero_and_stochastic() {
        let p = DynamicsParams::new(3, 0.5).unwrap();
        let g = generator_matrix(&p).unwrap();
        let ones = vec![1.0; g.dim()];
        let out = g.transient_apply(&ones, 0.7);
        assert!(out.iter().all(|v| (v - 1.0).abs() < 1e-12));
        let f: Vec<f64> = (0..g.dim()).map(|i| i as f64).collect();
        let same = g.transient_apply(&f, 0.0);
        assert!(same.iter().zip(&f).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn simulation_conserves_totals(seed in 0u64..1000, rho in 0.05f64..0.9, t in -0.9f64..0.9) {
            let u = t * (1.0 - rho);
            let p = DynamicsParams::new(24, 0.3).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let init = sample_initial_profile(&InitialProfile::Constant { rho, u }, 24, &mut rng).unwrap();
            let c0 = init.conserved();
            let rec = simulate(p, init, &time_grid(0.2, 4), None, &mut rng).unwrap();
            for s in &rec.snapshots {
                prop_assert_eq!(s.conserved(), c0);
            }
        }
    }
}
