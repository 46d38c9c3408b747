//! Rasterized tube stencils and the periodic averaging / max filters over
//! them.
//!
//! A tube `T(x, r)` becomes the set of grid offsets `d` with `x + d h` in the
//! tube. Block balls `{s : |s| h < r}` are stored by the largest admissible
//! squared integer norm.

use num_complex::Complex64;

use crate::geometry::{classify_regime, Regime};
use crate::grid::{fft_nd, GridSpec};

/// Largest integer `q` with `q < (r/h)^2`, so that `|s|^2 <= q` is the ball
/// `|s| h < r` on the integer lattice. Zero radius gives `q = 0`.
pub fn ball_key(r: f64, h: f64) -> u64 {
    if r <= 0.0 {
        return 0;
    }
    let t = (r / h) * (r / h);
    ((t - 1e-9).ceil() as i64 - 1).max(0) as u64
}

/// Half-width of the one-dimensional stencil for radius `r`.
pub fn half_width(r: f64, h: f64) -> usize {
    (ball_key(r, h) as f64).sqrt().floor() as usize
}

/// A rasterized tube shape, identified by its regime and the two ball keys
/// of the regime's defining radii.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Stencil {
    pub regime: Regime,
    pub qa: u64,
    pub qb: u64,
}

impl Stencil {
    /// Stencil of `T(0, beta * r)` on `spec`. Zero radii are allowed and
    /// collapse that ball to a point.
    pub fn for_tube(spec: &GridSpec, radii: [f64; 3], beta: f64) -> Stencil {
        let scaled = radii.map(|r| r * beta);
        let regime = classify_regime(scaled);
        let (ra, rb) = regime.defining_pair(scaled);
        let h = spec.spacing();
        Stencil {
            regime,
            qa: ball_key(ra, h),
            qb: ball_key(rb, h),
        }
    }

    /// Explicit offsets `(d1, d2)` in cells, each block of length `m`.
    pub fn offsets(&self, m: usize) -> Vec<Vec<i64>> {
        let ba = ball_points(m, self.qa);
        let bb = ball_points(m, self.qb);
        let mut out = Vec::with_capacity(ba.len() * bb.len());
        for s in &ba {
            for t in &bb {
                let mut d = Vec::with_capacity(2 * m);
                match self.regime {
                    Regime::Rect => {
                        d.extend_from_slice(s);
                        d.extend_from_slice(t);
                    }
                    Regime::ParaFirst => {
                        d.extend(s.iter().zip(t).map(|(a, b)| a + b));
                        d.extend_from_slice(t);
                    }
                    Regime::ParaSecond => {
                        d.extend_from_slice(t);
                        d.extend(s.iter().zip(t).map(|(a, b)| a + b));
                    }
                }
                out.push(d);
            }
        }
        out
    }

    /// Offsets reduced modulo the grid, without repeats. Stencils longer
    /// than the period cover each cell once.
    pub fn wrapped_offsets(&self, spec: &GridSpec) -> Vec<Vec<usize>> {
        let n = spec.n();
        let set: std::collections::BTreeSet<Vec<usize>> = self
            .offsets(spec.m())
            .into_iter()
            .map(|d| d.into_iter().map(|c| wrap(c, n)).collect())
            .collect();
        set.into_iter().collect()
    }
}

/// Integer points `s` in `Z^m` with `|s|^2 <= q`.
pub fn ball_points(m: usize, q: u64) -> Vec<Vec<i64>> {
    let w = (q as f64).sqrt().floor() as i64;
    let side = (2 * w + 1) as usize;
    let mut out = Vec::new();
    let mut s = vec![0i64; m];
    for idx in 0..side.pow(m as u32) {
        let mut rest = idx;
        let mut norm = 0u64;
        for c in s.iter_mut() {
            *c = (rest % side) as i64 - w;
            rest /= side;
            norm += (*c * *c) as u64;
        }
        if norm <= q {
            out.push(s.clone());
        }
    }
    out
}

fn wrap(i: i64, n: usize) -> usize {
    i.rem_euclid(n as i64) as usize
}

/// The flat indices of one periodic line: axis 0 (`x1`), axis 1 (`x2`) or
/// the diagonal through `(i, j)`.
#[derive(Clone, Copy)]
enum Line {
    Axis0,
    Axis1,
    Diagonal,
}

fn for_each_line<F: FnMut(&[usize])>(n: usize, line: Line, mut visit: F) {
    let mut idx = vec![0usize; n];
    for start in 0..n {
        for (t, slot) in idx.iter_mut().enumerate() {
            *slot = match line {
                Line::Axis0 => t * n + start,
                Line::Axis1 => start * n + t,
                Line::Diagonal => t * n + (start + t) % n,
            };
        }
        visit(&idx);
    }
}

/// Periodic window sums `Σ_{|s| <= w} x[i + s]` along each line; a window at
/// least as long as the line sums the whole line.
fn line_sums(data: &[f64], n: usize, line: Line, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    let mut buf = vec![0.0; n];
    for_each_line(n, line, |idx| {
        for (b, &i) in buf.iter_mut().zip(idx) {
            *b = data[i];
        }
        if 2 * w + 1 >= n {
            let total: f64 = buf.iter().sum();
            for &i in idx {
                out[i] = total;
            }
            return;
        }
        let w = w as i64;
        let mut acc: f64 = (-w..=w).map(|s| buf[wrap(s, n)]).sum();
        for (t, &i) in idx.iter().enumerate() {
            out[i] = acc;
            let t = t as i64;
            acc += buf[wrap(t + w + 1, n)] - buf[wrap(t - w, n)];
        }
    });
    out
}

/// Periodic sliding maxima with a monotone deque.
fn line_maxima(data: &[f64], n: usize, line: Line, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    let mut buf = vec![0.0; n];
    let mut deque: std::collections::VecDeque<i64> = std::collections::VecDeque::new();
    for_each_line(n, line, |idx| {
        for (b, &i) in buf.iter_mut().zip(idx) {
            *b = data[i];
        }
        if 2 * w + 1 >= n {
            let top = buf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            for &i in idx {
                out[i] = top;
            }
            return;
        }
        let w = w as i64;
        deque.clear();
        let value = |k: i64| buf[wrap(k, n)];
        for k in -w..(n as i64 + w) {
            while let Some(&back) = deque.back() {
                if value(back) <= value(k) {
                    deque.pop_back();
                } else {
                    break;
                }
            }
            deque.push_back(k);
            let center = k - w;
            if center >= 0 {
                while let Some(&front) = deque.front() {
                    if front < center - w {
                        deque.pop_front();
                    } else {
                        break;
                    }
                }
                out[idx[center as usize]] = value(*deque.front().expect("nonempty"));
            }
        }
    });
    out
}

fn line_count(n: usize, w: usize) -> usize {
    (2 * w + 1).min(n)
}

/// Unit-mass average of `data` over the stencil centered at every grid
/// point. Uses sliding sums for `m = 1` and the transform otherwise.
pub fn stencil_average(spec: &GridSpec, data: &[f64], stencil: &Stencil) -> Vec<f64> {
    if spec.m() != 1 {
        return stencil_average_fft(spec, data, stencil);
    }
    let n = spec.n();
    let wa = (stencil.qa as f64).sqrt().floor() as usize;
    let wb = (stencil.qb as f64).sqrt().floor() as usize;
    let (first, second) = match stencil.regime {
        Regime::Rect => (line_sums(data, n, Line::Axis0, wa), Line::Axis1),
        Regime::ParaFirst => (line_sums(data, n, Line::Axis0, wa), Line::Diagonal),
        Regime::ParaSecond => (line_sums(data, n, Line::Axis1, wa), Line::Diagonal),
    };
    let sums = line_sums(&first, n, second, wb);
    let count = (line_count(n, wa) * line_count(n, wb)) as f64;
    sums.into_iter().map(|s| s / count).collect()
}

/// Stencil average by transform convolution with the normalized indicator.
pub fn stencil_average_fft(spec: &GridSpec, data: &[f64], stencil: &Stencil) -> Vec<f64> {
    let m = spec.m();
    let n = spec.n();
    let mut kernel = vec![Complex64::new(0.0, 0.0); spec.len()];
    let mut multi = vec![0usize; 2 * m];
    for d in stencil.wrapped_offsets(spec) {
        // correlation, i.e. convolution with the mirrored set
        for (slot, &c) in multi.iter_mut().zip(&d) {
            *slot = (n - c) % n;
        }
        kernel[spec.flat_index(&multi)] = Complex64::new(1.0, 0.0);
    }
    let mass: f64 = kernel.iter().map(|c| c.re).sum();
    let mut signal: Vec<Complex64> = data.iter().map(|&x| Complex64::new(x, 0.0)).collect();
    fft_nd(spec, &mut kernel, false);
    fft_nd(spec, &mut signal, false);
    for (s, k) in signal.iter_mut().zip(&kernel) {
        *s *= k;
    }
    fft_nd(spec, &mut signal, true);
    let scale = 1.0 / (spec.len() as f64 * mass);
    signal.iter().map(|c| c.re * scale).collect()
}

/// Maximum of `data` over the stencil centered at every grid point.
pub fn stencil_max(spec: &GridSpec, data: &[f64], stencil: &Stencil) -> Vec<f64> {
    if spec.m() != 1 {
        return stencil_max_direct(spec, data, stencil);
    }
    let n = spec.n();
    let wa = (stencil.qa as f64).sqrt().floor() as usize;
    let wb = (stencil.qb as f64).sqrt().floor() as usize;
    let (first, second) = match stencil.regime {
        Regime::Rect => (line_maxima(data, n, Line::Axis0, wa), Line::Axis1),
        Regime::ParaFirst => (line_maxima(data, n, Line::Axis0, wa), Line::Diagonal),
        Regime::ParaSecond => (line_maxima(data, n, Line::Axis1, wa), Line::Diagonal),
    };
    line_maxima(&first, n, second, wb)
}

/// Maximum over the explicit offset list.
pub fn stencil_max_direct(spec: &GridSpec, data: &[f64], stencil: &Stencil) -> Vec<f64> {
    let n = spec.n();
    let dim = spec.dim();
    let offsets = stencil.wrapped_offsets(spec);
    let mut multi = vec![0usize; dim];
    let mut shifted = vec![0usize; dim];
    (0..spec.len())
        .map(|idx| {
            spec.multi_index(idx, &mut multi);
            offsets
                .iter()
                .map(|d| {
                    for a in 0..dim {
                        shifted[a] = (multi[a] + d[a]) % n;
                    }
                    data[spec.flat_index(&shifted)]
                })
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .collect()
}
