//! Deterministic test-function generators.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tha_core::grid::{GridSpec, SpatialField};
use tha_core::{Error, Result};

use crate::config::SuiteEntry;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Generator {
    /// Smooth, compactly supported bump.
    Bump,
    /// A single real Fourier mode `cos(k1·x1 + k2·x2 + φ)`.
    Mode,
    /// Product of square waves.
    Checkerboard,
    /// Tall, thin Gaussian.
    Spike,
    /// Sum of a few random low modes.
    RandomBandlimited,
}

impl Generator {
    pub fn parse(name: &str) -> Result<Generator> {
        Ok(match name {
            "bump" => Generator::Bump,
            "mode" => Generator::Mode,
            "checkerboard" => Generator::Checkerboard,
            "spike" => Generator::Spike,
            "random-bandlimited" => Generator::RandomBandlimited,
            _ => return Err(Error::InvalidArgument(format!("unknown generator {name}"))),
        })
    }
}

/// A generated function with a stable name.
pub struct TestFunction {
    pub name: String,
    pub field: SpatialField,
}

/// Minimal-image displacement on the torus of side `period`.
fn wrap(d: f64, period: f64) -> f64 {
    d - period * (d / period).round()
}

fn wave_vector(rng: &mut ChaCha8Rng, m: usize, kmax: i64) -> Vec<i64> {
    loop {
        let k: Vec<i64> = (0..m).map(|_| rng.random_range(-kmax..=kmax)).collect();
        if k.iter().any(|&x| x != 0) {
            return k;
        }
    }
}

/// Integer wave numbers `(k1, k2)`; admissible pairs avoid
/// `k1 = 0`, `k2 = 0` and `k1 + k2 = 0`.
fn mode_pair(rng: &mut ChaCha8Rng, m: usize, kmax: i64, admissible: bool) -> (Vec<i64>, Vec<i64>) {
    loop {
        let k1: Vec<i64> = (0..m).map(|_| rng.random_range(-kmax..=kmax)).collect();
        let k2: Vec<i64> = (0..m).map(|_| rng.random_range(-kmax..=kmax)).collect();
        let zero = |k: &[i64]| k.iter().all(|&x| x == 0);
        let sum: Vec<i64> = k1.iter().zip(&k2).map(|(a, b)| a + b).collect();
        if !admissible || !(zero(&k1) || zero(&k2) || zero(&sum)) {
            return (k1, k2);
        }
    }
}

fn phase(spec: &GridSpec, k1: &[i64], k2: &[i64], x: &[f64]) -> f64 {
    let m = spec.m();
    let step = spec.frequency_step();
    let mut t = 0.0;
    for i in 0..m {
        t += step * (k1[i] as f64 * x[i] + k2[i] as f64 * x[m + i]);
    }
    t
}

fn one(gen: Generator, entry: &SuiteEntry, spec: &GridSpec, rng: &mut ChaCha8Rng) -> SpatialField {
    let m = spec.m();
    let dim = 2 * m;
    let l = spec.period();
    let kmax = entry.kmax.unwrap_or(4).min(spec.n() as i64 / 2 - 1).max(1);
    let admissible = entry.admissible.unwrap_or(true);
    match gen {
        Generator::Bump => {
            let center: Vec<f64> = (0..dim).map(|_| rng.random_range(0.25 * l..0.75 * l)).collect();
            let w = entry.width.unwrap_or_else(|| rng.random_range(l / 8.0..l / 4.0));
            SpatialField::from_fn(*spec, |x| {
                let rho2 = x.iter().zip(&center).map(|(a, c)| wrap(a - c, l).powi(2)).sum::<f64>() / (w * w);
                if rho2 < 1.0 {
                    (1.0 - 1.0 / (1.0 - rho2)).exp()
                } else {
                    0.0
                }
            })
        }
        Generator::Mode => {
            let (k1, k2) = mode_pair(rng, m, kmax, admissible);
            let phi = rng.random_range(0.0..std::f64::consts::TAU);
            SpatialField::from_fn(*spec, |x| (phase(spec, &k1, &k2, x) + phi).cos())
        }
        Generator::Checkerboard => {
            let q = rng.random_range(1..=3);
            let size = l / 2f64.powi(q);
            SpatialField::from_fn(*spec, |x| {
                let cells: i64 = x.iter().map(|&c| (c / size).floor() as i64).sum();
                if cells.rem_euclid(2) == 0 {
                    1.0
                } else {
                    -1.0
                }
            })
        }
        Generator::Spike => {
            let center: Vec<f64> = (0..dim).map(|_| rng.random_range(0.0..l)).collect();
            let height = entry.height.unwrap_or_else(|| 10f64.powf(rng.random_range(1.0..3.0)));
            let w = entry.width.unwrap_or_else(|| l / 32.0 * rng.random_range(1.0..2.0));
            SpatialField::from_fn(*spec, |x| {
                let d2 = x.iter().zip(&center).map(|(a, c)| wrap(a - c, l).powi(2)).sum::<f64>();
                height * (-d2 / (w * w)).exp()
            })
        }
        Generator::RandomBandlimited => {
            let terms: Vec<(Vec<i64>, Vec<i64>, f64, f64)> = (0..6)
                .map(|_| {
                    let (k1, k2) = if admissible {
                        mode_pair(rng, m, kmax, true)
                    } else {
                        (wave_vector(rng, m, kmax), wave_vector(rng, m, kmax))
                    };
                    let amp = rng.random_range(-1.0..1.0);
                    let phi = rng.random_range(0.0..std::f64::consts::TAU);
                    (k1, k2, amp, phi)
                })
                .collect();
            SpatialField::from_fn(*spec, |x| {
                terms
                    .iter()
                    .map(|(k1, k2, a, phi)| a * (phase(spec, k1, k2, x) + phi).cos())
                    .sum()
            })
        }
    }
}

/// Expands one suite entry on `spec`. Names are `{generator}-{seed}-{i}`.
pub fn generate(entry: &SuiteEntry, spec: &GridSpec) -> Result<Vec<TestFunction>> {
    let gen = Generator::parse(&entry.generator)?;
    let mut rng = ChaCha8Rng::seed_from_u64(entry.seed);
    Ok((0..entry.count)
        .map(|i| TestFunction {
            name: format!("{}-{}-{}", entry.generator, entry.seed, i),
            field: one(gen, entry, spec, &mut rng),
        })
        .collect())
}

/// Expands a whole suite.
pub fn generate_all(entries: &[SuiteEntry], spec: &GridSpec) -> Result<Vec<TestFunction>> {
    let mut out = Vec::new();
    for e in entries {
        out.extend(generate(e, spec)?);
    }
    Ok(out)
}
