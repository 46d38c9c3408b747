//! Periodic sampling grids on the torus `[0, L)^{2m}`, integral-convention
//! Fourier transforms, and the norms and level-set measures built on them.
//!
//! A point is written `x = (x1, x2)` with `x1, x2 ∈ R^m`. Samples are stored
//! row-major with the `m` axes of `x1` first, then the `m` axes of `x2`.
//!
//! The forward transform approximates `∫ f(x) e^{-i ξ·x} dx`, so the
//! coefficient at `ξ = 0` is the integral of `f` over the box. The inverse
//! divides by `L^{2m}`; the pair is an exact inverse on the lattice.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Largest block dimension supported by the fixed-size frequency buffers.
pub const MAX_BLOCK_DIM: usize = 4;

const MAGIC: &[u8; 4] = b"THA1";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    m: usize,
    n: usize,
    period: f64,
}

impl GridSpec {
    pub fn new(m: usize, n: usize, period: f64) -> Result<Self> {
        if m == 0 || m > MAX_BLOCK_DIM {
            return Err(Error::Config(format!(
                "block dimension m must be in 1..={MAX_BLOCK_DIM}, got {m}"
            )));
        }
        if n < 2 || !n.is_power_of_two() {
            return Err(Error::Config(format!(
                "points per axis must be a power of two >= 2, got {n}"
            )));
        }
        if !(period > 0.0) || !period.is_finite() {
            return Err(Error::Config(format!(
                "period must be positive and finite, got {period}"
            )));
        }
        if (n as f64).powi(2 * m as i32) > 1.0e9 {
            return Err(Error::Config(format!(
                "grid of {n}^{} points is too large",
                2 * m
            )));
        }
        Ok(Self { m, n, period })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn period(&self) -> f64 {
        self.period
    }

    /// Number of axes, `2m`.
    pub fn dim(&self) -> usize {
        2 * self.m
    }

    /// Total number of samples, `n^{2m}`.
    pub fn len(&self) -> usize {
        self.n.pow(self.dim() as u32)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Sample spacing `L / n`.
    pub fn spacing(&self) -> f64 {
        self.period / self.n as f64
    }

    /// Measure of one grid cell, `(L/n)^{2m}`.
    pub fn cell_measure(&self) -> f64 {
        self.spacing().powi(self.dim() as i32)
    }

    /// Measure of the whole box, `L^{2m}`.
    pub fn total_measure(&self) -> f64 {
        self.period.powi(self.dim() as i32)
    }

    /// Lattice step `2π / L`.
    pub fn frequency_step(&self) -> f64 {
        2.0 * std::f64::consts::PI / self.period
    }

    /// Signed frequency index of storage position `k` on one axis, in
    /// `{-n/2, …, n/2 - 1}`.
    pub fn signed_index(&self, k: usize) -> i64 {
        let n = self.n as i64;
        let k = k as i64;
        if k < n / 2 {
            k
        } else {
            k - n
        }
    }

    /// Angular frequency of storage position `k` on one axis.
    pub fn frequency(&self, k: usize) -> f64 {
        self.signed_index(k) as f64 * self.frequency_step()
    }

    /// Largest positive frequency component, `(2π/L)(n/2 - 1)`.
    pub fn max_frequency(&self) -> f64 {
        self.frequency_step() * (self.n as f64 / 2.0 - 1.0)
    }

    pub fn is_nyquist(&self, k: usize) -> bool {
        k == self.n / 2
    }

    /// Stride of axis `axis` in the flat layout.
    pub fn stride(&self, axis: usize) -> usize {
        self.n.pow((self.dim() - 1 - axis) as u32)
    }

    /// Per-axis storage indices of flat position `idx`.
    pub fn multi_index(&self, mut idx: usize, out: &mut [usize]) {
        for axis in (0..self.dim()).rev() {
            out[axis] = idx % self.n;
            idx /= self.n;
        }
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi.iter().fold(0, |acc, &k| acc * self.n + k)
    }

    /// Spatial coordinates of flat position `idx` (lower cell corner).
    pub fn coordinates(&self, idx: usize) -> Vec<f64> {
        let mut multi = [0usize; 2 * MAX_BLOCK_DIM];
        self.multi_index(idx, &mut multi[..self.dim()]);
        multi[..self.dim()]
            .iter()
            .map(|&k| k as f64 * self.spacing())
            .collect()
    }

    /// Visits every lattice point with its frequency vector split into the
    /// two blocks. When any component sits at the Nyquist index the visitor
    /// also receives the alias with those components flipped to `+πn/L`.
    pub fn for_each_frequency<F>(&self, mut visit: F)
    where
        F: FnMut(usize, &[f64], &[f64], Option<(&[f64], &[f64])>),
    {
        let dim = self.dim();
        let m = self.m;
        let mut multi = [0usize; 2 * MAX_BLOCK_DIM];
        let mut xi = [0.0f64; 2 * MAX_BLOCK_DIM];
        let mut alias = [0.0f64; 2 * MAX_BLOCK_DIM];
        let nyq = std::f64::consts::PI * self.n as f64 / self.period;
        for idx in 0..self.len() {
            self.multi_index(idx, &mut multi[..dim]);
            let mut has_nyquist = false;
            for axis in 0..dim {
                xi[axis] = self.frequency(multi[axis]);
                if self.is_nyquist(multi[axis]) {
                    has_nyquist = true;
                    alias[axis] = nyq;
                } else {
                    alias[axis] = xi[axis];
                }
            }
            if has_nyquist {
                visit(
                    idx,
                    &xi[..m],
                    &xi[m..dim],
                    Some((&alias[..m], &alias[m..dim])),
                );
            } else {
                visit(idx, &xi[..m], &xi[m..dim], None);
            }
        }
    }

    /// Samples a frequency-domain factor on the lattice, Hermitian
    /// symmetrized so that it maps real fields to real fields. Away from the
    /// Nyquist planes this is the factor itself; on them it is the mean over
    /// the two alias representatives.
    pub fn sample_factor<F>(&self, factor: F) -> Vec<Complex64>
    where
        F: Fn(&[f64], &[f64]) -> Complex64,
    {
        let mut out = vec![Complex64::new(0.0, 0.0); self.len()];
        self.for_each_frequency(|idx, xi1, xi2, alias| {
            out[idx] = match alias {
                None => factor(xi1, xi2),
                Some((a1, a2)) => 0.5 * (factor(xi1, xi2) + factor(a1, a2)),
            };
        });
        out
    }

    pub fn ensure_same(&self, other: &GridSpec) -> Result<()> {
        if self != other {
            return Err(Error::SpecMismatch(format!(
                "grid (m={}, n={}, L={}) vs (m={}, n={}, L={})",
                self.m, self.n, self.period, other.m, other.n, other.period
            )));
        }
        Ok(())
    }
}

/// Convenience constructor mirroring the CLI parameters.
pub fn make_grid(m: usize, n: usize, period: f64) -> Result<GridSpec> {
    GridSpec::new(m, n, period)
}

/// Samples on a grid. Fields tagged real keep zero imaginary parts.
#[derive(Debug, Clone)]
pub struct SpatialField {
    spec: GridSpec,
    values: Vec<Complex64>,
    real: bool,
}

impl SpatialField {
    pub fn zeros(spec: GridSpec) -> Self {
        Self {
            spec,
            values: vec![Complex64::new(0.0, 0.0); spec.len()],
            real: true,
        }
    }

    pub fn constant(spec: GridSpec, c: f64) -> Self {
        Self::from_real(spec, vec![c; spec.len()]).expect("length matches")
    }

    pub fn from_real(spec: GridSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.len() {
            return Err(Error::SpecMismatch(format!(
                "expected {} samples, got {}",
                spec.len(),
                values.len()
            )));
        }
        Ok(Self {
            spec,
            values: values.into_iter().map(|v| Complex64::new(v, 0.0)).collect(),
            real: true,
        })
    }

    pub fn from_complex(spec: GridSpec, values: Vec<Complex64>) -> Result<Self> {
        if values.len() != spec.len() {
            return Err(Error::SpecMismatch(format!(
                "expected {} samples, got {}",
                spec.len(),
                values.len()
            )));
        }
        Ok(Self {
            spec,
            values,
            real: false,
        })
    }

    /// Samples `g` at the lower corner of every cell.
    pub fn from_fn<G: Fn(&[f64]) -> f64>(spec: GridSpec, g: G) -> Self {
        let values = (0..spec.len())
            .map(|idx| Complex64::new(g(&spec.coordinates(idx)), 0.0))
            .collect();
        Self {
            spec,
            values,
            real: true,
        }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn is_real(&self) -> bool {
        self.real
    }

    pub fn values(&self) -> &[Complex64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<Complex64> {
        self.values
    }

    pub fn real_values(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.re).collect()
    }

    pub fn abs_values(&self) -> Vec<f64> {
        self.values.iter().map(|v| v.norm()).collect()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Pointwise modulus as a real field.
    pub fn abs(&self) -> SpatialField {
        SpatialField::from_real(self.spec, self.abs_values()).expect("same length")
    }

    pub fn sup_abs(&self) -> f64 {
        self.values.iter().map(|v| v.norm()).fold(0.0, f64::max)
    }

    pub fn mean(&self) -> Complex64 {
        self.values.iter().sum::<Complex64>() / self.values.len() as f64
    }

    /// Grid sum times cell measure.
    pub fn integral(&self) -> Complex64 {
        self.values.iter().sum::<Complex64>() * self.spec.cell_measure()
    }

    pub fn scaled(&self, c: f64) -> SpatialField {
        SpatialField {
            spec: self.spec,
            values: self.values.iter().map(|v| v * c).collect(),
            real: self.real,
        }
    }

    /// `self - other`; errors when the grids differ.
    pub fn sub(&self, other: &SpatialField) -> Result<SpatialField> {
        self.spec.ensure_same(&other.spec)?;
        Ok(SpatialField {
            spec: self.spec,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(a, b)| a - b)
                .collect(),
            real: self.real && other.real,
        })
    }

    /// Largest imaginary part relative to the largest modulus.
    pub fn relative_imaginary(&self) -> f64 {
        let sup = self.sup_abs();
        if sup == 0.0 {
            return 0.0;
        }
        self.values.iter().map(|v| v.im.abs()).fold(0.0, f64::max) / sup
    }

    /// Drops imaginary parts and tags the field real.
    pub fn into_real(mut self) -> SpatialField {
        for v in &mut self.values {
            v.im = 0.0;
        }
        self.real = true;
        self
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        write_header(&mut w, &self.spec, self.real)?;
        write_samples(&mut w, self)
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<SpatialField> {
        let (spec, real) = read_header(&mut r)?;
        read_samples(&mut r, spec, real)
    }

    /// One row per grid point: coordinates then value.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let m = self.spec.m;
        let mut header: Vec<String> = Vec::new();
        for block in 1..=2 {
            if m == 1 {
                header.push(format!("x{block}"));
            } else {
                header.extend((1..=m).map(|k| format!("x{block}_{k}")));
            }
        }
        if self.real {
            header.push("value".into());
        } else {
            header.push("value_re".into());
            header.push("value_im".into());
        }
        writeln!(w, "{}", header.join(","))?;
        for (idx, v) in self.values.iter().enumerate() {
            let coords = self.spec.coordinates(idx);
            let mut row: Vec<String> = coords.iter().map(|c| format!("{c}")).collect();
            row.push(format!("{:e}", v.re));
            if !self.real {
                row.push(format!("{:e}", v.im));
            }
            writeln!(w, "{}", row.join(","))?;
        }
        Ok(())
    }
}

pub(crate) fn write_header<W: Write>(w: &mut W, spec: &GridSpec, real: bool) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(spec.m as u32).to_le_bytes())?;
    w.write_all(&(spec.n as u32).to_le_bytes())?;
    w.write_all(&spec.period.to_le_bytes())?;
    w.write_all(&[if real { 0u8 } else { 1u8 }])?;
    Ok(())
}

pub(crate) fn write_samples<W: Write>(w: &mut W, f: &SpatialField) -> Result<()> {
    for v in &f.values {
        w.write_all(&v.re.to_le_bytes())?;
        if !f.real {
            w.write_all(&v.im.to_le_bytes())?;
        }
    }
    Ok(())
}

pub(crate) fn read_samples<R: Read>(r: &mut R, spec: GridSpec, real: bool) -> Result<SpatialField> {
    let mut values = Vec::with_capacity(spec.len());
    for _ in 0..spec.len() {
        let re = read_f64(r)?;
        let im = if real { 0.0 } else { read_f64(r)? };
        values.push(Complex64::new(re, im));
    }
    Ok(SpatialField { spec, values, real })
}

pub(crate) fn read_header<R: Read>(r: &mut R) -> Result<(GridSpec, bool)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic, expected THA1".into()));
    }
    let m = read_u32(r)? as usize;
    let n = read_u32(r)? as usize;
    let period = read_f64(r)?;
    let mut flag = [0u8; 1];
    r.read_exact(&mut flag)?;
    let real = match flag[0] {
        0 => true,
        1 => false,
        other => return Err(Error::Format(format!("bad real/complex flag {other}"))),
    };
    let spec = GridSpec::new(m, n, period).map_err(|e| Error::Format(e.to_string()))?;
    Ok((spec, real))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

/// Transform coefficients on the frequency lattice.
#[derive(Debug, Clone)]
pub struct FrequencyField {
    spec: GridSpec,
    coeffs: Vec<Complex64>,
}

impl FrequencyField {
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn coeffs(&self) -> &[Complex64] {
        &self.coeffs
    }

    pub fn from_coeffs(spec: GridSpec, coeffs: Vec<Complex64>) -> Result<Self> {
        if coeffs.len() != spec.len() {
            return Err(Error::SpecMismatch(format!(
                "expected {} coefficients, got {}",
                spec.len(),
                coeffs.len()
            )));
        }
        Ok(Self { spec, coeffs })
    }

    /// Multiplies pointwise by sampled factor values.
    pub fn multiplied(&self, factor: &[Complex64]) -> FrequencyField {
        FrequencyField {
            spec: self.spec,
            coeffs: self
                .coeffs
                .iter()
                .zip(factor)
                .map(|(c, f)| c * f)
                .collect(),
        }
    }

    /// Parseval side: `L^{-2m} Σ |c|²`, equal to `‖f‖₂²` on the torus.
    pub fn l2_norm_sq(&self) -> f64 {
        self.coeffs.iter().map(|c| c.norm_sqr()).sum::<f64>() / self.spec.total_measure()
    }
}

struct Plan {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

fn plan(n: usize) -> Arc<Plan> {
    static PLANS: OnceLock<Mutex<HashMap<usize, Arc<Plan>>>> = OnceLock::new();
    let plans = PLANS.get_or_init(|| Mutex::new(HashMap::new()));
    let mut guard = plans.lock().expect("fft plan cache poisoned");
    guard
        .entry(n)
        .or_insert_with(|| {
            let mut planner = FftPlanner::new();
            Arc::new(Plan {
                forward: planner.plan_fft_forward(n),
                inverse: planner.plan_fft_inverse(n),
            })
        })
        .clone()
}

/// Unnormalized in-place DFT along every axis.
pub(crate) fn fft_nd(spec: &GridSpec, data: &mut [Complex64], inverse: bool) {
    fft_cube(spec.n, spec.dim(), data, inverse);
}

/// Unnormalized in-place DFT of an `n^dim` row-major array.
pub(crate) fn fft_cube(n: usize, dim: usize, data: &mut [Complex64], inverse: bool) {
    let p = plan(n);
    let fft = if inverse { &p.inverse } else { &p.forward };
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut buf: Vec<Complex64> = Vec::new();
    for axis in 0..dim {
        let stride = n.pow((dim - 1 - axis) as u32);
        if stride == 1 {
            fft.process_with_scratch(data, &mut scratch);
            continue;
        }
        let block = n * stride;
        buf.resize(block, Complex64::new(0.0, 0.0));
        for chunk in data.chunks_mut(block) {
            // chunk is an n x stride matrix; transpose so lines are contiguous
            for i in 0..n {
                for s in 0..stride {
                    buf[s * n + i] = chunk[i * stride + s];
                }
            }
            fft.process_with_scratch(&mut buf, &mut scratch);
            for i in 0..n {
                for s in 0..stride {
                    chunk[i * stride + s] = buf[s * n + i];
                }
            }
        }
    }
}

/// Integral-convention forward transform.
pub fn forward_transform(f: &SpatialField) -> FrequencyField {
    let mut data = f.values.clone();
    fft_nd(&f.spec, &mut data, false);
    let scale = f.spec.cell_measure();
    for c in &mut data {
        *c *= scale;
    }
    FrequencyField {
        spec: f.spec,
        coeffs: data,
    }
}

/// Inverse of [`forward_transform`]. `real` tags the result and drops the
/// imaginary round-off.
pub fn inverse_transform(f: &FrequencyField, real: bool) -> SpatialField {
    let mut data = f.coeffs.clone();
    fft_nd(&f.spec, &mut data, true);
    let scale = 1.0 / f.spec.total_measure();
    for c in &mut data {
        *c *= scale;
        if real {
            c.im = 0.0;
        }
    }
    SpatialField {
        spec: f.spec,
        values: data,
        real,
    }
}

/// Inverse transform of two Hermitian spectra at once, returning the two
/// real fields.
pub(crate) fn inverse_transform_pair(
    spec: &GridSpec,
    a: &[Complex64],
    b: Option<&[Complex64]>,
) -> (Vec<f64>, Option<Vec<f64>>) {
    let i = Complex64::new(0.0, 1.0);
    let mut data: Vec<Complex64> = match b {
        Some(b) => a.iter().zip(b).map(|(x, y)| x + i * y).collect(),
        None => a.to_vec(),
    };
    fft_nd(spec, &mut data, true);
    let scale = 1.0 / spec.total_measure();
    let first = data.iter().map(|c| c.re * scale).collect();
    let second = b.map(|_| data.iter().map(|c| c.im * scale).collect());
    (first, second)
}

/// Riemann-sum `L^p` norm; `p = f64::INFINITY` gives the sup norm.
pub fn lp_norm(f: &SpatialField, p: f64) -> Result<f64> {
    if p.is_nan() || p < 1.0 {
        return Err(Error::InvalidArgument(format!("p must be >= 1, got {p}")));
    }
    if p.is_infinite() {
        return Ok(f.sup_abs());
    }
    let sum: f64 = f.values.iter().map(|v| v.norm().powf(p)).sum();
    Ok((sum * f.spec.cell_measure()).powf(1.0 / p))
}

/// Measure of `{|f| > λ}`.
pub fn distribution_measure(f: &SpatialField, lambda: f64) -> f64 {
    level_set_measure(&f.abs_values(), f.spec.cell_measure(), lambda)
}

pub(crate) fn level_set_measure(abs_values: &[f64], cell: f64, lambda: f64) -> f64 {
    abs_values.iter().filter(|&&v| v > lambda).count() as f64 * cell
}

/// Riemann sum of `(|f|/λ) log(e + |f|/λ)`.
pub fn llogl_functional(f: &SpatialField, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "lambda must be positive, got {lambda}"
        )));
    }
    let e = std::f64::consts::E;
    let sum: f64 = f
        .values
        .iter()
        .map(|v| {
            let t = v.norm() / lambda;
            t * (e + t).ln()
        })
        .sum();
    Ok(sum * f.spec.cell_measure())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(spec: GridSpec, seed: u64) -> SpatialField {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals = (0..spec.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        SpatialField::from_real(spec, vals).unwrap()
    }

    #[test]
    fn grid_sizes_and_spacing() {
        let g = make_grid(1, 8, 1.0).unwrap();
        assert_eq!(g.len(), 64);
        assert_eq!(g.spacing(), 0.125);

        let g = make_grid(1, 256, 16.0).unwrap();
        assert_eq!(g.len(), 65536);
        let pi = std::f64::consts::PI;
        let expected = pi * 256.0 / 16.0 - 2.0 * pi / 16.0;
        assert!((g.max_frequency() - expected).abs() < 1e-12);

        let g = make_grid(2, 16, 8.0).unwrap();
        assert_eq!(g.len(), 16usize.pow(4));
    }

    #[test]
    fn grid_rejects_bad_parameters() {
        assert!(matches!(make_grid(1, 12, 1.0), Err(Error::Config(_))));
        assert!(matches!(make_grid(1, 8, 0.0), Err(Error::Config(_))));
        assert!(matches!(make_grid(1, 8, -2.0), Err(Error::Config(_))));
        assert!(matches!(make_grid(0, 8, 1.0), Err(Error::Config(_))));
    }

    #[test]
    fn frequency_lattice_ordering() {
        let g = make_grid(1, 8, 2.0 * std::f64::consts::PI).unwrap();
        let idx: Vec<i64> = (0..8).map(|k| g.signed_index(k)).collect();
        assert_eq!(idx, vec![0, 1, 2, 3, -4, -3, -2, -1]);
        assert!((g.frequency(5) + 3.0).abs() < 1e-12);
    }

    #[test]
    fn constant_field_transforms_to_total_measure() {
        let g = make_grid(1, 16, 3.0).unwrap();
        let f = SpatialField::constant(g, 1.0);
        let fh = forward_transform(&f);
        assert!((fh.coeffs()[0].re - 9.0).abs() < 1e-12);
        for c in &fh.coeffs()[1..] {
            assert!(c.norm() < 1e-12);
        }
    }

    #[test]
    fn impulse_has_flat_spectrum() {
        let g = make_grid(1, 16, 4.0).unwrap();
        let mut vals = vec![0.0; g.len()];
        vals[37] = 1.0;
        let fh = forward_transform(&SpatialField::from_real(g, vals).unwrap());
        let expect = g.cell_measure();
        for c in fh.coeffs() {
            assert!((c.norm() - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn round_trip_and_parseval_on_random_fields() {
        for (seed, (m, n)) in (0..100u64).zip([(1usize, 16usize), (1, 32), (2, 8)].iter().cycle()) {
            let g = make_grid(*m, *n, 5.0).unwrap();
            let f = random_field(g, seed);
            let fh = forward_transform(&f);
            let back = inverse_transform(&fh, true);
            let err = back
                .values()
                .iter()
                .zip(f.values())
                .map(|(a, b)| (a - b).norm())
                .fold(0.0, f64::max);
            assert!(err < 1e-10 * f.sup_abs());
            let l2 = lp_norm(&f, 2.0).unwrap().powi(2);
            assert!((fh.l2_norm_sq() - l2).abs() < 1e-10 * l2);
        }
    }

    #[test]
    fn norms_on_simple_fields() {
        let g = make_grid(1, 8, 1.0).unwrap();
        let one = SpatialField::constant(g, 1.0);
        assert!((lp_norm(&one, 2.0).unwrap() - 1.0).abs() < 1e-14);
        let half = SpatialField::from_fn(g, |x| if x[0] < 0.5 { 1.0 } else { 0.0 });
        assert!((lp_norm(&half, 1.0).unwrap() - 0.5).abs() < 1e-14);
        assert_eq!(lp_norm(&half, f64::INFINITY).unwrap(), 1.0);
        assert!(lp_norm(&half, 0.5).is_err());
    }

    #[test]
    fn distribution_measure_counts_cells() {
        let g = make_grid(1, 8, 2.0).unwrap();
        let mut vals = vec![0.0; g.len()];
        for v in vals.iter_mut().take(11) {
            *v = 1.0;
        }
        let f = SpatialField::from_real(g, vals).unwrap();
        assert!((distribution_measure(&f, 0.5) - 11.0 * g.cell_measure()).abs() < 1e-14);
        assert_eq!(distribution_measure(&f, 1.0), 0.0);
        assert!((distribution_measure(&f, -1.0) - g.total_measure()).abs() < 1e-12);
    }

    #[test]
    fn distribution_measure_of_ramp_matches_count() {
        let g = make_grid(1, 32, 4.0).unwrap();
        let f = SpatialField::from_fn(g, |x| x[0] + 0.3 * x[1]);
        for &lambda in &[0.0, 0.7, 1.5, 2.2, 3.9, 5.0] {
            let mut count = 0usize;
            for i in 0..32 {
                for j in 0..32 {
                    let v = i as f64 * 0.125 + 0.3 * j as f64 * 0.125;
                    if v > lambda {
                        count += 1;
                    }
                }
            }
            let expect = count as f64 * g.cell_measure();
            assert_eq!(distribution_measure(&f, lambda), expect);
        }
    }

    #[test]
    fn llogl_values() {
        let g = make_grid(1, 8, 1.0).unwrap();
        let zero = SpatialField::zeros(g);
        assert_eq!(llogl_functional(&zero, 1.0).unwrap(), 0.0);
        let c = SpatialField::constant(g, 2.5);
        let v = llogl_functional(&c, 2.5).unwrap();
        assert!((v - (std::f64::consts::E + 1.0).ln()).abs() < 1e-12);
        assert!(llogl_functional(&c, 0.0).is_err());
    }

    #[test]
    fn llogl_matches_independent_summation() {
        let g = make_grid(1, 32, 3.0).unwrap();
        let f = random_field(g, 9);
        let lambda = 0.37;
        let mut acc = 0.0f64;
        let mut comp = 0.0f64;
        for v in f.values() {
            let t = v.re.abs() / lambda;
            let term = t * (t + std::f64::consts::E).ln() - comp;
            let next = acc + term;
            comp = (next - acc) - term;
            acc = next;
        }
        let oracle = acc * g.cell_measure();
        let got = llogl_functional(&f, lambda).unwrap();
        assert!((got - oracle).abs() < 1e-12 * oracle);
    }

    #[test]
    fn binary_round_trip_preserves_bits() {
        let g = make_grid(1, 8, 1.5).unwrap();
        let f = random_field(g, 3);
        let mut buf = Vec::new();
        f.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"THA1");
        assert_eq!(buf.len(), 4 + 4 + 4 + 8 + 1 + 8 * g.len());
        let back = SpatialField::read_binary(&buf[..]).unwrap();
        assert!(back.is_real());
        assert_eq!(back.values(), f.values());
        buf[0] = b'X';
        assert!(SpatialField::read_binary(&buf[..]).is_err());
    }

    #[test]
    fn csv_export_has_one_row_per_point() {
        let g = make_grid(1, 4, 1.0).unwrap();
        let f = SpatialField::constant(g, 2.0);
        let mut buf = Vec::new();
        f.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "x1,x2,value");
        assert_eq!(lines.len(), 17);
        assert_eq!(lines[6], "0.25,0.25,2e0");
    }
}
