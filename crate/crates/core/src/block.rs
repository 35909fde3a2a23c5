//! Smoothed block averages `y_hat(x) = (1/l) sum_j a((n x - j)/l) v_j` and
//! their space derivatives, evaluated on the lattice grid `x_i = i / n`.
//!
//! On that grid `n x_i - j` is an integer, so every block field is a circular
//! convolution of the site values with one fixed weight vector.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dynamics::TrajectoryRecord;
use crate::equilibrium::LocalObservable;
use crate::error::{Error, Result};
use crate::lattice::Configuration;

/// Smooth weight on `[-1, 1]`, vanishing with its first two derivatives at
/// the endpoints, with unit mass.
pub trait WeightKernel: Send + Sync {
    fn value(&self, x: f64) -> f64;
    fn deriv(&self, x: f64) -> f64;
    fn second(&self, x: f64) -> f64;
}

/// `a(x) = (1 + cos(pi x))^2 / 3` on `[-1, 1]`.
#[derive(Clone, Copy, Debug, Default)]
pub struct CosineKernel;

impl WeightKernel for CosineKernel {
    #[inline]
    fn value(&self, x: f64) -> f64 {
        if x.abs() >= 1.0 {
            return 0.0;
        }
        let c = 1.0 + (std::f64::consts::PI * x).cos();
        c * c / 3.0
    }

    #[inline]
    fn deriv(&self, x: f64) -> f64 {
        if x.abs() >= 1.0 {
            return 0.0;
        }
        let pi = std::f64::consts::PI;
        -(2.0 * pi / 3.0) * (pi * x).sin() * (1.0 + (pi * x).cos())
    }

    #[inline]
    fn second(&self, x: f64) -> f64 {
        if x.abs() >= 1.0 {
            return 0.0;
        }
        let pi = std::f64::consts::PI;
        -(2.0 * pi * pi / 3.0) * ((pi * x).cos() + (2.0 * pi * x).cos())
    }
}

/// `a(x) = (35/32)(1 - x^2)^3` on `[-1, 1]`.
#[derive(Clone, Copy, Debug, Default)]
pub struct TriweightKernel;

impl WeightKernel for TriweightKernel {
    fn value(&self, x: f64) -> f64 {
        if x.abs() >= 1.0 {
            return 0.0;
        }
        let q = 1.0 - x * x;
        35.0 / 32.0 * q * q * q
    }

    fn deriv(&self, x: f64) -> f64 {
        if x.abs() >= 1.0 {
            return 0.0;
        }
        let q = 1.0 - x * x;
        -35.0 / 32.0 * 6.0 * x * q * q
    }

    fn second(&self, x: f64) -> f64 {
        if x.abs() >= 1.0 {
            return 0.0;
        }
        let q = 1.0 - x * x;
        35.0 / 32.0 * (24.0 * x * x * q - 6.0 * q * q)
    }
}

/// Convolution weights for block size `l` on a lattice of `n` sites:
/// entry `k + l - 1` multiplies `v_{i-k}` in the field at grid point `i`.
#[derive(Clone, Debug)]
pub struct KernelWeights {
    pub n: usize,
    pub l: usize,
    /// `a(k/l) / l`
    pub w0: Vec<f64>,
    /// `(n / l^2) a'(k/l)`
    pub w1: Vec<f64>,
    /// `(n^2 / l^3) a''(k/l)`
    pub w2: Vec<f64>,
}

impl KernelWeights {
    pub fn new(kernel: &dyn WeightKernel, n: usize, l: usize) -> Result<Self> {
        check_block(n, l)?;
        let (nf, lf) = (n as f64, l as f64);
        let ks = -(l as isize - 1)..=(l as isize - 1);
        let w0 = ks.clone().map(|k| kernel.value(k as f64 / lf) / lf).collect();
        let w1 = ks.clone().map(|k| nf / (lf * lf) * kernel.deriv(k as f64 / lf)).collect();
        let w2 = ks.map(|k| nf * nf / (lf * lf * lf) * kernel.second(k as f64 / lf)).collect();
        Ok(Self { n, l, w0, w1, w2 })
    }

    pub fn order(&self, order: usize) -> &[f64] {
        match order {
            0 => &self.w0,
            1 => &self.w1,
            _ => &self.w2,
        }
    }

    /// `sum_k w_k v_{i-k}` at grid points `0, stride, 2 stride, ...`.
    pub fn convolve(&self, values: &[f64], order: usize, stride: usize) -> Vec<f64> {
        let n = self.n;
        let w = self.order(order);
        let half = self.l as isize - 1;
        let stride = stride.max(1);
        (0..n)
            .step_by(stride)
            .map(|i| {
                let mut acc = 0.0;
                for (idx, wk) in w.iter().enumerate() {
                    let k = idx as isize - half;
                    let j = (i as isize - k).rem_euclid(n as isize) as usize;
                    acc += wk * values[j];
                }
                acc
            })
            .collect()
    }
}

fn check_block(n: usize, l: usize) -> Result<()> {
    if l == 0 || 2 * l >= n {
        return Err(Error::InvalidParameter(format!("block size l={l} must satisfy 1 <= l < n/2 (n={n})")));
    }
    Ok(())
}

/// Values `v_j` of a local observable at every site of a periodic configuration.
pub fn site_values(c: &Configuration, obs: &LocalObservable) -> Vec<f64> {
    (0..c.len()).map(|j| obs.at(c, j)).collect()
}

fn block_sum(c: &Configuration, obs: &LocalObservable, x: f64, l: usize, f: impl Fn(f64) -> f64) -> Result<f64> {
    let n = c.len();
    check_block(n, l)?;
    let nx = n as f64 * x;
    let (lf, lo, hi) = (l as f64, (nx - l as f64).ceil() as isize, (nx + l as f64).floor() as isize);
    let mut acc = 0.0;
    for j in lo..=hi {
        let w = f((nx - j as f64) / lf);
        if w != 0.0 {
            acc += w * obs.at(c, j.rem_euclid(n as isize) as usize);
        }
    }
    Ok(acc)
}

/// `y_hat(x)` at an arbitrary point of the torus.
pub fn block_average(
    c: &Configuration,
    obs: &LocalObservable,
    x: f64,
    l: usize,
    kernel: &dyn WeightKernel,
) -> Result<f64> {
    Ok(block_sum(c, obs, x, l, |y| kernel.value(y))? / l as f64)
}

/// `d/dx y_hat` (`order = 1`) or `d^2/dx^2 y_hat` (`order = 2`) at `x`.
pub fn block_derivative(
    c: &Configuration,
    obs: &LocalObservable,
    x: f64,
    l: usize,
    kernel: &dyn WeightKernel,
    order: usize,
) -> Result<f64> {
    let (n, lf) = (c.len() as f64, l as f64);
    match order {
        1 => Ok(n / (lf * lf) * block_sum(c, obs, x, l, |y| kernel.deriv(y))?),
        2 => Ok(n * n / (lf * lf * lf) * block_sum(c, obs, x, l, |y| kernel.second(y))?),
        _ => Err(Error::InvalidParameter(format!("derivative order {order} not supported"))),
    }
}

/// Admissible block-size window `n^{2/3} sigma^{1/3} < l < n sigma`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockChoice {
    pub l: usize,
    pub lower: f64,
    pub upper: f64,
}

/// Integer nearest the geometric mean of the window bounds, kept strictly
/// inside the window and below `n / 2`.
pub fn choose_block_size(n: usize, sigma: f64) -> Result<BlockChoice> {
    let nf = n as f64;
    let lower = nf.powf(2.0 / 3.0) * sigma.cbrt();
    let upper = (nf * sigma).min(nf / 2.0);
    if nf * sigma * sigma <= 1.0 || lower >= upper {
        return Err(Error::EmptyBlockWindow { n, sigma });
    }
    let mut l = (lower * upper).sqrt().round();
    if l <= lower {
        l = lower.floor() + 1.0;
    }
    if l >= upper {
        l = upper.ceil() - 1.0;
    }
    if l <= lower || l >= upper || l < 1.0 {
        return Err(Error::EmptyBlockWindow { n, sigma });
    }
    Ok(BlockChoice { l: l as usize, lower, upper })
}

/// Which block field a channel holds.
#[derive(Clone, Copy, Debug)]
pub struct Channel {
    pub name: &'static str,
    pub observable: LocalObservable,
    pub order: usize,
}

impl Channel {
    /// `eta_hat, xi_hat, psi_hat, phi_hat, d_x eta_hat, d_x xi_hat`.
    pub fn standard() -> Vec<Channel> {
        vec![
            Channel { name: "eta_hat", observable: LocalObservable::ETA, order: 0 },
            Channel { name: "xi_hat", observable: LocalObservable::XI, order: 0 },
            Channel { name: "psi_hat", observable: LocalObservable::PSI, order: 0 },
            Channel { name: "phi_hat", observable: LocalObservable::PHI, order: 0 },
            Channel { name: "dx_eta_hat", observable: LocalObservable::ETA, order: 1 },
            Channel { name: "dx_xi_hat", observable: LocalObservable::XI, order: 1 },
        ]
    }
}

/// Block fields on a space-time grid; each channel is stored time-major
/// (`values[k * nx + i]`).
#[derive(Clone, Debug, PartialEq)]
pub struct SpaceTimeField {
    pub n: usize,
    pub l: usize,
    pub times: Vec<f64>,
    pub xs: Vec<f64>,
    pub names: Vec<String>,
    pub channels: Vec<Vec<f64>>,
}

impl SpaceTimeField {
    pub fn nt(&self) -> usize {
        self.times.len()
    }

    pub fn nx(&self) -> usize {
        self.xs.len()
    }

    pub fn channel(&self, name: &str) -> Option<&[f64]> {
        self.names.iter().position(|n| n == name).map(|i| self.channels[i].as_slice())
    }

    pub fn require(&self, name: &str) -> Result<&[f64]> {
        self.channel(name).ok_or_else(|| Error::Format(format!("field has no channel {name:?}")))
    }

    /// Writes `t, x, <channels...>` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["t".to_string(), "x".to_string()];
        header.extend(self.names.iter().cloned());
        w.write_record(&header)?;
        let nx = self.nx();
        for (k, t) in self.times.iter().enumerate() {
            for (i, x) in self.xs.iter().enumerate() {
                let mut row = vec![format!("{t:.9}"), format!("{x:.9}")];
                row.extend(self.channels.iter().map(|c| format!("{:.12e}", c[k * nx + i])));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Binary layout, all integers and floats little-endian:
    /// magic `b"STF1"`; `u32` n, l, nt, nx, channel count; per channel a
    /// `u16` name length and UTF-8 name; `nt` times and `nx` positions as
    /// `f64`; then each channel's `nt * nx` values as `f64`, time-major.
    pub fn write_binary(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(b"STF1")?;
        for v in [self.n, self.l, self.nt(), self.nx(), self.names.len()] {
            f.write_all(&(v as u32).to_le_bytes())?;
        }
        for name in &self.names {
            f.write_all(&(name.len() as u16).to_le_bytes())?;
            f.write_all(name.as_bytes())?;
        }
        for v in self.times.iter().chain(&self.xs).chain(self.channels.iter().flatten()) {
            f.write_all(&v.to_le_bytes())?;
        }
        f.flush()?;
        Ok(())
    }

    pub fn read_binary(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let mut take = |k: usize| -> Result<&[u8]> {
            let s = bytes.get(pos..pos + k).ok_or_else(|| Error::Format("truncated field file".into()))?;
            pos += k;
            Ok(s)
        };
        if take(4)? != b"STF1" {
            return Err(Error::Format("bad magic".into()));
        }
        let mut header = [0usize; 5];
        for h in header.iter_mut() {
            *h = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
        }
        let [n, l, nt, nx, nch] = header;
        let mut names = Vec::with_capacity(nch);
        for _ in 0..nch {
            let len = u16::from_le_bytes(take(2)?.try_into().expect("2 bytes")) as usize;
            names.push(String::from_utf8(take(len)?.to_vec()).map_err(|e| Error::Format(e.to_string()))?);
        }
        let mut floats = |count: usize| -> Result<Vec<f64>> {
            (0..count).map(|_| Ok(f64::from_le_bytes(take(8)?.try_into().expect("8 bytes")))).collect()
        };
        let times = floats(nt)?;
        let xs = floats(nx)?;
        let channels = (0..nch).map(|_| floats(nt * nx)).collect::<Result<Vec<_>>>()?;
        Ok(Self { n, l, times, xs, names, channels })
    }
}

/// Block fields of every snapshot of a record on the grid `x_i = i stride / n`.
pub fn snapshot_fields(
    record: &TrajectoryRecord,
    channels: &[Channel],
    l: usize,
    kernel: &dyn WeightKernel,
    stride: usize,
) -> Result<SpaceTimeField> {
    let n = record.params.n;
    let weights = KernelWeights::new(kernel, n, l)?;
    let stride = stride.max(1);
    let xs: Vec<f64> = (0..n).step_by(stride).map(|i| i as f64 / n as f64).collect();
    let nx = xs.len();
    let mut data = vec![Vec::with_capacity(record.snapshots.len() * nx); channels.len()];
    for c in &record.snapshots {
        let mut cache: Vec<(&'static str, Vec<f64>)> = Vec::new();
        for (ch, out) in channels.iter().zip(data.iter_mut()) {
            let pos = match cache.iter().position(|(name, _)| *name == ch.observable.name) {
                Some(p) => p,
                None => {
                    cache.push((ch.observable.name, site_values(c, &ch.observable)));
                    cache.len() - 1
                }
            };
            out.extend(weights.convolve(&cache[pos].1, ch.order, stride));
        }
    }
    Ok(SpaceTimeField {
        n,
        l,
        times: record.times.clone(),
        xs,
        names: channels.iter().map(|c| c.name.to_string()).collect(),
        channels: data,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{sample_initial_profile, DynamicsParams, InitialProfile};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_config(n: usize, seed: u64) -> Configuration {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        sample_initial_profile(&InitialProfile::Constant { rho: 0.35, u: 0.15 }, n, &mut rng).unwrap()
    }

    fn quad(f: impl Fn(f64) -> f64) -> f64 {
        let m = 20_000;
        (0..m).map(|i| f(-1.0 + (i as f64 + 0.5) * 2.0 / m as f64)).sum::<f64>() * 2.0 / m as f64
    }

    #[test]
    fn kernel_shape() {
        let k = CosineKernel;
        assert!((k.value(0.0) - 4.0 / 3.0).abs() < 1e-15);
        for x in [-1.0, 1.0] {
            assert!(k.value(x).abs() < 1e-15 && k.deriv(x).abs() < 1e-15);
        }
        assert!(k.second(0.999_999).abs() < 1e-8);
        for kern in [&CosineKernel as &dyn WeightKernel, &TriweightKernel] {
            assert!((quad(|x| kern.value(x)) - 1.0).abs() < 1e-8);
            // Derivatives against central differences.
            for &x in &[-0.7, -0.2, 0.1, 0.55] {
                let h = 1e-5;
                let fd1 = (kern.value(x + h) - kern.value(x - h)) / (2.0 * h);
                let fd2 = (kern.deriv(x + h) - kern.deriv(x - h)) / (2.0 * h);
                assert!((fd1 - kern.deriv(x)).abs() < 1e-7);
                assert!((fd2 - kern.second(x)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn riemann_sum_of_weights_is_one() {
        let w = KernelWeights::new(&CosineKernel, 1000, 50).unwrap();
        assert!((w.w0.iter().sum::<f64>() - 1.0).abs() < 5e-3);
        assert!(w.w1.iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn constant_configuration_gives_constant_field() {
        let c = Configuration::uniform(64, crate::lattice::Spin::Plus);
        let w = KernelWeights::new(&CosineKernel, 64, 8).unwrap();
        let xi = w.convolve(&site_values(&c, &LocalObservable::XI), 0, 1);
        let mass: f64 = w.w0.iter().sum();
        assert!(xi.iter().all(|v| (v - mass).abs() < 1e-14));
        let d = w.convolve(&site_values(&c, &LocalObservable::XI), 1, 1);
        assert!(d.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn windowed_matches_naive() {
        let c = random_config(97, 4);
        let (l, kernel) = (11, CosineKernel);
        let w = KernelWeights::new(&kernel, 97, l).unwrap();
        for obs in [LocalObservable::ETA, LocalObservable::PHI] {
            let vals = site_values(&c, &obs);
            for order in 0..3 {
                let fast = w.convolve(&vals, order, 1);
                for (i, f) in fast.iter().enumerate() {
                    let x = i as f64 / 97.0;
                    // Naive O(n) sum over every site with the torus distance.
                    let naive: f64 = (0..97)
                        .map(|j| {
                            let mut d = (97.0 * x - j as f64) / l as f64;
                            if d > 97.0 / (2.0 * l as f64) {
                                d -= 97.0 / l as f64;
                            }
                            if d < -97.0 / (2.0 * l as f64) {
                                d += 97.0 / l as f64;
                            }
                            let (nf, lf) = (97.0, l as f64);
                            let k = match order {
                                0 => kernel.value(d) / lf,
                                1 => nf / (lf * lf) * kernel.deriv(d),
                                _ => nf * nf / (lf * lf * lf) * kernel.second(d),
                            };
                            k * vals[j]
                        })
                        .sum();
                    assert!((naive - f).abs() < 1e-12 * f.abs().max(1.0), "order {order} at {i}: {naive} vs {f}");
                    let direct = if order == 0 {
                        block_average(&c, &obs, x, l, &kernel).unwrap()
                    } else {
                        block_derivative(&c, &obs, x, l, &kernel, order).unwrap()
                    };
                    assert!((direct - f).abs() < 1e-11 * f.abs().max(1.0));
                }
            }
        }
    }

    #[test]
    fn block_size_choice() {
        let b = choose_block_size(512, 512f64.powf(-0.4)).unwrap();
        assert_eq!(b.l, 34);
        assert!((b.lower - 27.85).abs() < 0.01 && (b.upper - 42.22).abs() < 0.01);
        assert!(matches!(choose_block_size(100, 0.05), Err(Error::EmptyBlockWindow { .. })));
        assert_eq!(choose_block_size(128, 128f64.powf(-0.4)).unwrap().l, 16);
        assert_eq!(choose_block_size(256, 256f64.powf(-0.4)).unwrap().l, 23);
    }

    #[test]
    fn binary_and_csv_roundtrip() {
        let p = DynamicsParams::new(40, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let init = sample_initial_profile(&InitialProfile::Constant { rho: 0.3, u: 0.1 }, 40, &mut rng).unwrap();
        let rec = crate::dynamics::simulate(p, init, &crate::dynamics::time_grid(0.05, 3), None, &mut rng).unwrap();
        let f = snapshot_fields(&rec, &Channel::standard(), 5, &CosineKernel, 2).unwrap();
        assert_eq!((f.nt(), f.nx()), (4, 20));
        let dir = tempfile::tempdir().unwrap();
        let bin = dir.path().join("f.stf");
        f.write_binary(&bin).unwrap();
        assert_eq!(SpaceTimeField::read_binary(&bin).unwrap(), f);
        let csvp = dir.path().join("f.csv");
        f.write_csv(&csvp).unwrap();
        let text = std::fs::read_to_string(&csvp).unwrap();
        assert!(text.starts_with("t,x,eta_hat,xi_hat,psi_hat,phi_hat,dx_eta_hat,dx_xi_hat"));
        assert_eq!(text.lines().count(), 1 + 4 * 20);
    }

    #[test]
    fn block_averages_converge_to_profile() {
        let profile = InitialProfile::Sine { rho0: 0.4, rho1: 0.1, u0: 0.1, u1: 0.2 };
        let err = |n: usize, seed: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = sample_initial_profile(&profile, n, &mut rng).unwrap();
            let l = n / 16;
            let w = KernelWeights::new(&CosineKernel, n, l).unwrap();
            let eta = w.convolve(&site_values(&c, &LocalObservable::ETA), 0, 1);
            let xi = w.convolve(&site_values(&c, &LocalObservable::XI), 0, 1);
            (0..n)
                .map(|i| {
                    let (rho, u) = profile.at(i as f64 / n as f64);
                    (eta[i] - rho).abs() + (xi[i] - u).abs()
                })
                .sum::<f64>()
                / n as f64
        };
        let coarse = (0..8).map(|s| err(256, s)).sum::<f64>() / 8.0;
        let fine = (0..8).map(|s| err(2048, 100 + s)).sum::<f64>() / 8.0;
        assert!(fine <= 0.5 * coarse, "coarse {coarse}, fine {fine}");
    }

    proptest! {
        #[test]
        fn block_average_is_linear(seed in 0u64..500, alpha in -2.0f64..2.0) {
            let c = random_config(60, seed);
            let w = KernelWeights::new(&CosineKernel, 60, 7).unwrap();
            let eta = site_values(&c, &LocalObservable::ETA);
            let xi = site_values(&c, &LocalObservable::XI);
            let combo: Vec<f64> = eta.iter().zip(&xi).map(|(a, b)| alpha * a + b).collect();
            let lhs = w.convolve(&combo, 0, 1);
            let (e, x) = (w.convolve(&eta, 0, 1), w.convolve(&xi, 0, 1));
            for i in 0..60 {
                prop_assert!((lhs[i] - alpha * e[i] - x[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn conserved_block_fields_stay_in_domain(seed in 0u64..500) {
            let c = random_config(80, seed);
            let w = KernelWeights::new(&CosineKernel, 80, 9).unwrap();
            let eta = w.convolve(&site_values(&c, &LocalObservable::ETA), 0, 1);
            let xi = w.convolve(&site_values(&c, &LocalObservable::XI), 0, 1);
            let eps = (w.w0.iter().sum::<f64>() - 1.0).abs() + 1e-12;
            for i in 0..80 {
                prop_assert!(eta[i] >= -eps);
                prop_assert!(eta[i] + xi[i].abs() <= 1.0 + eps);
            }
        }
    }
}
