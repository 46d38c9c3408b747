//! Cached frequency-lattice tables shared by the spectral operators.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;

use crate::grid::{GridSpec, MAX_BLOCK_DIM};

/// One representative frequency `(ξ1, ξ2)` with its block magnitudes
/// `(|ξ1|, |ξ2|, |ξ1+ξ2|)`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Rep {
    pub xi1: [f64; MAX_BLOCK_DIM],
    pub xi2: [f64; MAX_BLOCK_DIM],
    pub a: [f64; 3],
}

/// Frequency representatives for every lattice point. Points on a Nyquist
/// plane carry a second representative; factors are averaged over both so
/// that real inputs stay real.
pub(crate) struct Lattice {
    pub spec: GridSpec,
    pub reps: Vec<Rep>,
    pub aliases: Vec<(usize, Rep)>,
}

fn make_rep(m: usize, xi1: &[f64], xi2: &[f64]) -> Rep {
    let mut rep = Rep {
        xi1: [0.0; MAX_BLOCK_DIM],
        xi2: [0.0; MAX_BLOCK_DIM],
        a: [0.0; 3],
    };
    let (mut s1, mut s2, mut s3) = (0.0, 0.0, 0.0);
    for k in 0..m {
        rep.xi1[k] = xi1[k];
        rep.xi2[k] = xi2[k];
        s1 += xi1[k] * xi1[k];
        s2 += xi2[k] * xi2[k];
        let t = xi1[k] + xi2[k];
        s3 += t * t;
    }
    rep.a = [s1.sqrt(), s2.sqrt(), s3.sqrt()];
    rep
}

impl Lattice {
    fn build(spec: GridSpec) -> Self {
        let m = spec.m();
        let mut reps = Vec::with_capacity(spec.len());
        let mut aliases = Vec::new();
        spec.for_each_frequency(|idx, xi1, xi2, alias| {
            reps.push(make_rep(m, xi1, xi2));
            if let Some((a1, a2)) = alias {
                aliases.push((idx, make_rep(m, a1, a2)));
            }
        });
        Self {
            spec,
            reps,
            aliases,
        }
    }

    pub fn get(spec: &GridSpec) -> Arc<Lattice> {
        type Key = (usize, usize, u64);
        static CACHE: OnceLock<Mutex<HashMap<Key, Arc<Lattice>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(|| Mutex::new(HashMap::new()));
        let key = (spec.m(), spec.n(), spec.period().to_bits());
        let mut guard = cache.lock().expect("lattice cache poisoned");
        guard
            .entry(key)
            .or_insert_with(|| Arc::new(Lattice::build(*spec)))
            .clone()
    }

    /// Evaluates `g` on every slot, in slot order.
    pub fn per_slot<T, G: Fn(&Rep) -> T>(&self, g: G) -> Vec<T> {
        self.reps
            .iter()
            .chain(self.aliases.iter().map(|(_, r)| r))
            .map(g)
            .collect()
    }

    /// Samples the factor `g(slot, rep)` on the lattice with alias averaging.
    pub fn factor<G: Fn(usize, &Rep) -> Complex64>(&self, g: G) -> Vec<Complex64> {
        let mut out: Vec<Complex64> = self
            .reps
            .iter()
            .enumerate()
            .map(|(i, r)| g(i, r))
            .collect();
        let base = self.reps.len();
        for (k, (idx, rep)) in self.aliases.iter().enumerate() {
            out[*idx] = 0.5 * (out[*idx] + g(base + k, rep));
        }
        out
    }

    /// Real-valued variant of [`Lattice::factor`].
    pub fn real_factor<G: Fn(usize, &Rep) -> f64>(&self, g: G) -> Vec<f64> {
        let mut out: Vec<f64> = self
            .reps
            .iter()
            .enumerate()
            .map(|(i, r)| g(i, r))
            .collect();
        let base = self.reps.len();
        for (k, (idx, rep)) in self.aliases.iter().enumerate() {
            out[*idx] = 0.5 * (out[*idx] + g(base + k, rep));
        }
        out
    }
}
