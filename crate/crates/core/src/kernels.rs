//! Twisted Poisson kernel, the extension `U_f(x, r)` and its block
//! derivatives, all evaluated spectrally.

use std::f64::consts::PI;
use std::io::{Read, Write};

use num_complex::Complex64;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::grid::{
    fft_cube, forward_transform, inverse_transform_pair, lp_norm, read_f64, read_header,
    read_samples, write_header, write_samples, FrequencyField, GridSpec, SpatialField,
};
use crate::numerics::{gamma_half, integrate_with_breaks};
use crate::spectral::{Lattice, Rep};

/// One of the three parameter blocks: `x1`, `x2` and the twisted block
/// `x1 + x2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum Block {
    One,
    Two,
    Three,
}

impl Block {
    pub const ALL: [Block; 3] = [Block::One, Block::Two, Block::Three];

    pub fn index(self) -> usize {
        match self {
            Block::One => 0,
            Block::Two => 1,
            Block::Three => 2,
        }
    }

    /// Block from its 1-based number.
    pub fn from_number(j: usize) -> Result<Block> {
        match j {
            1 => Ok(Block::One),
            2 => Ok(Block::Two),
            3 => Ok(Block::Three),
            _ => Err(Error::InvalidArgument(format!("no block {j}"))),
        }
    }

    pub fn number(self) -> usize {
        self.index() + 1
    }
}

/// Scales `(r1, r2, r3)`. A block may be marked boundary, which stands for
/// the limit `r_j -> 0` and contributes the identity in that block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleTriple {
    radii: [f64; 3],
    boundary: [bool; 3],
}

fn check_radius(r: f64) -> Result<()> {
    if !(r.is_finite() && r > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "scale must be positive and finite, got {r}"
        )));
    }
    Ok(())
}

impl ScaleTriple {
    pub fn new(r1: f64, r2: f64, r3: f64) -> Result<Self> {
        Self::from_radii([r1, r2, r3])
    }

    pub fn from_radii(radii: [f64; 3]) -> Result<Self> {
        for &r in &radii {
            check_radius(r)?;
        }
        Ok(Self {
            radii,
            boundary: [false; 3],
        })
    }

    /// `None` entries are boundary blocks.
    pub fn partial(radii: [Option<f64>; 3]) -> Result<Self> {
        let mut out = Self::all_boundary();
        for (j, r) in radii.iter().enumerate() {
            if let Some(r) = *r {
                check_radius(r)?;
                out.radii[j] = r;
                out.boundary[j] = false;
            }
        }
        Ok(out)
    }

    pub fn all_boundary() -> Self {
        Self {
            radii: [0.0; 3],
            boundary: [true; 3],
        }
    }

    pub fn with_boundary(mut self, block: Block) -> Self {
        self.radii[block.index()] = 0.0;
        self.boundary[block.index()] = true;
        self
    }

    pub fn is_boundary(&self, block: Block) -> bool {
        self.boundary[block.index()]
    }

    /// Radius of `block`; zero for a boundary block.
    pub fn radius(&self, block: Block) -> f64 {
        self.radii[block.index()]
    }

    /// Effective radii with zeros in boundary blocks.
    pub fn radii(&self) -> [f64; 3] {
        self.radii
    }

    pub fn boundary_flags(&self) -> [bool; 3] {
        self.boundary
    }

    /// Same triple with `block` moved to radius `r`.
    pub fn with_radius(mut self, block: Block, r: f64) -> Result<Self> {
        check_radius(r)?;
        self.radii[block.index()] = r;
        self.boundary[block.index()] = false;
        Ok(self)
    }
}

/// Normalization of the `m`-dimensional Poisson kernel.
pub fn poisson_constant(m: usize) -> f64 {
    gamma_half(m + 1) / PI.powf((m as f64 + 1.0) / 2.0)
}

/// Poisson kernel `c_m a / (a^2 + |v|^2)^{(m+1)/2}` on `R^m`.
pub fn poisson_kernel_1d(m: usize, a: f64, v: &[f64]) -> Result<f64> {
    if !(a > 0.0 && a.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "Poisson scale must be positive, got {a}"
        )));
    }
    if m == 0 || v.len() != m {
        return Err(Error::InvalidArgument(format!(
            "point has {} components, expected m = {m}",
            v.len()
        )));
    }
    let v2: f64 = v.iter().map(|x| x * x).sum();
    Ok(poisson_constant(m) * a / (a * a + v2).powf((m as f64 + 1.0) / 2.0))
}

/// Poisson kernel on the circle of length `period`, i.e. the line kernel
/// summed over all translates.
pub fn periodized_poisson(a: f64, v: f64, period: f64) -> f64 {
    let s = PI * a / period;
    let t = PI * v / period;
    // cosh(2s) - cos(2t) without cancellation
    let denom = 2.0 * (s.sinh().powi(2) + t.sin().powi(2));
    (2.0 * s).sinh() / (period * denom)
}

/// `exp(-r1|ξ1| - r2|ξ2| - r3|ξ1+ξ2|)`; boundary blocks contribute 1.
pub fn twisted_multiplier(xi1: &[f64], xi2: &[f64], r: &ScaleTriple) -> f64 {
    let a1 = xi1.iter().map(|x| x * x).sum::<f64>().sqrt();
    let a2 = xi2.iter().map(|x| x * x).sum::<f64>().sqrt();
    let a3 = xi1
        .iter()
        .zip(xi2)
        .map(|(x, y)| (x + y) * (x + y))
        .sum::<f64>()
        .sqrt();
    multiplier_from(&r.radii(), &[a1, a2, a3])
}

#[inline]
pub(crate) fn multiplier_from(radii: &[f64; 3], a: &[f64; 3]) -> f64 {
    (-(radii[0] * a[0] + radii[1] * a[1] + radii[2] * a[2])).exp()
}

/// Samples of the twisted Poisson kernel on the grid, computed in physical
/// space as a fiber integral of periodized block kernels.
pub fn twisted_kernel_physical(spec: &GridSpec, r: &ScaleTriple) -> Result<SpatialField> {
    if r.boundary.iter().any(|&b| b) {
        return Err(Error::InvalidArgument(
            "physical kernel needs all three scales positive".into(),
        ));
    }
    let period = spec.period();
    let radii = r.radii();
    if let Some(&big) = radii.iter().find(|&&x| x > period / 4.0) {
        return Err(Error::DomainSize(format!(
            "scale {big} exceeds a quarter of the period {period}"
        )));
    }
    let aliased = aliased_mass(spec, &radii);
    if (aliased - 1.0).abs() > 0.01 {
        return Err(Error::DomainSize(format!(
            "grid spacing {} does not resolve scales {radii:?} (sampled mass {aliased:.4})",
            spec.spacing()
        )));
    }
    let values = if spec.m() == 1 {
        kernel_fiber_1d(spec, radii)
    } else {
        kernel_fiber_tensor(spec, radii)?
    };
    let field = SpatialField::from_real(*spec, values)?;
    let mass = field.integral().re;
    if (mass - 1.0).abs() > 0.01 {
        return Err(Error::DomainSize(format!(
            "discrete kernel mass {mass} is off by more than 1%; the grid does not resolve r"
        )));
    }
    Ok(field)
}

/// Riemann-sum mass of the sampled kernel, computed by Poisson summation as
/// the sum of the multiplier over the sampling lattice `(2πn/L) Z^{2m}`.
fn aliased_mass(spec: &GridSpec, radii: &[f64; 3]) -> f64 {
    const REACH: i64 = 3;
    let m = spec.m();
    let dim = 2 * m;
    let step = 2.0 * PI * spec.n() as f64 / spec.period();
    let side = (2 * REACH + 1) as usize;
    let mut total = 0.0;
    let mut k = vec![0i64; dim];
    for idx in 0..side.pow(dim as u32) {
        let mut rest = idx;
        for kk in k.iter_mut() {
            *kk = (rest % side) as i64 - REACH;
            rest /= side;
        }
        let norm = |v: &mut dyn Iterator<Item = i64>| {
            v.map(|x| (x as f64 * step).powi(2)).sum::<f64>().sqrt()
        };
        let a = [
            norm(&mut k[..m].iter().copied()),
            norm(&mut k[m..].iter().copied()),
            norm(&mut (0..m).map(|i| k[i] + k[m + i])),
        ];
        total += multiplier_from(radii, &a);
    }
    total
}

fn kernel_fiber_1d(spec: &GridSpec, radii: [f64; 3]) -> Vec<f64> {
    let n = spec.n();
    let period = spec.period();
    let h = spec.spacing();
    let [r1, r2, r3] = radii;
    let peak = periodized_poisson(r1, 0.0, period) * periodized_poisson(r2, 0.0, period);
    let tol = 1e-12 * peak.max(1.0);
    (0..n * n)
        .into_par_iter()
        .map(|idx| {
            let x1 = (idx / n) as f64 * h;
            let x2 = (idx % n) as f64 * h;
            let g = |w: f64| {
                periodized_poisson(r1, x1 - w, period)
                    * periodized_poisson(r2, x2 - w, period)
                    * periodized_poisson(r3, w, period)
            };
            integrate_with_breaks(&g, 0.0, period, &[x1, x2], tol)
        })
        .collect()
}

/// Periodized Poisson kernel on `[0, L)^m`, sampled on an `nf^m` grid from
/// its Fourier series.
fn periodized_poisson_cube(m: usize, nf: usize, period: f64, a: f64) -> Vec<f64> {
    let len = nf.pow(m as u32);
    let step = 2.0 * PI / period;
    let mut data = vec![Complex64::new(0.0, 0.0); len];
    for (idx, c) in data.iter_mut().enumerate() {
        let mut rest = idx;
        let mut s2 = 0.0;
        for _ in 0..m {
            let k = rest % nf;
            rest /= nf;
            let signed = if k < nf / 2 { k as f64 } else { k as f64 - nf as f64 };
            s2 += (signed * step).powi(2);
        }
        *c = Complex64::new((-a * s2.sqrt()).exp(), 0.0);
    }
    fft_cube(nf, m, &mut data, true);
    let scale = 1.0 / period.powi(m as i32);
    data.iter().map(|c| c.re * scale).collect()
}

fn kernel_fiber_tensor(spec: &GridSpec, radii: [f64; 3]) -> Result<Vec<f64>> {
    const REFINE: usize = 2;
    let m = spec.m();
    let n = spec.n();
    let nf = REFINE * n;
    let fine_len = nf.pow(m as u32);
    let work = spec.len() as f64 * fine_len as f64;
    if work > 2e9 {
        return Err(Error::InvalidArgument(format!(
            "tensor quadrature needs {work:.1e} kernel products; use a smaller grid"
        )));
    }
    let period = spec.period();
    let cubes: Vec<Vec<f64>> = radii
        .iter()
        .map(|&a| periodized_poisson_cube(m, nf, period, a))
        .collect();
    let weight = (period / nf as f64).powi(m as i32);
    let block_len = n.pow(m as u32);
    let fine_index = |coarse: usize, u: usize| -> usize {
        // index of (REFINE * coarse - u) mod nf, componentwise
        let (mut c, mut uu) = (coarse, u);
        let mut out = 0;
        let mut mult = 1;
        for _ in 0..m {
            let ck = c % n;
            let uk = uu % nf;
            c /= n;
            uu /= nf;
            out += ((REFINE * ck + nf - uk) % nf) * mult;
            mult *= nf;
        }
        out
    };
    Ok((0..spec.len())
        .into_par_iter()
        .map(|idx| {
            let i1 = idx / block_len;
            let i2 = idx % block_len;
            let mut acc = 0.0;
            for u in 0..fine_len {
                acc += cubes[0][fine_index(i1, u)] * cubes[1][fine_index(i2, u)] * cubes[2][u];
            }
            acc * weight
        })
        .collect())
}

/// `U_f(·, r)` together with the scale it was evaluated at.
#[derive(Debug, Clone)]
pub struct ExtensionField {
    scale: ScaleTriple,
    field: SpatialField,
}

impl ExtensionField {
    pub fn scale(&self) -> &ScaleTriple {
        &self.scale
    }

    pub fn field(&self) -> &SpatialField {
        &self.field
    }

    pub fn into_field(self) -> SpatialField {
        self.field
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        write_header(&mut w, self.field.spec(), self.field.is_real())?;
        for r in self.scale.radii {
            w.write_all(&r.to_le_bytes())?;
        }
        for b in self.scale.boundary {
            w.write_all(&[b as u8])?;
        }
        write_samples(&mut w, &self.field)?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<ExtensionField> {
        let (spec, real) = read_header(&mut r)?;
        let mut radii = [0.0; 3];
        for x in &mut radii {
            *x = read_f64(&mut r)?;
        }
        let mut flags = [0u8; 3];
        r.read_exact(&mut flags)?;
        let mut scale = ScaleTriple::all_boundary();
        for j in 0..3 {
            match flags[j] {
                0 => {
                    check_radius(radii[j]).map_err(|e| Error::Format(e.to_string()))?;
                    scale.radii[j] = radii[j];
                    scale.boundary[j] = false;
                }
                1 => {}
                other => return Err(Error::Format(format!("bad boundary flag {other}"))),
            }
        }
        let field = read_samples(&mut r, spec, real)?;
        Ok(ExtensionField { scale, field })
    }
}

/// Inverse transform of `factor * fh`, as a real field when `real`.
pub(crate) fn apply_factor(
    spec: &GridSpec,
    fh: &[Complex64],
    factor: &[Complex64],
    real: bool,
) -> SpatialField {
    let coeffs: Vec<Complex64> = fh.iter().zip(factor).map(|(a, b)| a * b).collect();
    let freq = FrequencyField::from_coeffs(*spec, coeffs).expect("matching lengths");
    crate::grid::inverse_transform(&freq, real)
}

pub(crate) fn multiplier_factor(lat: &Lattice, radii: &[f64; 3]) -> Vec<Complex64> {
    lat.factor(|_, rep| Complex64::new(multiplier_from(radii, &rep.a), 0.0))
}

/// `Poi_twist` at scale `r` as the inverse transform of the multiplier.
pub fn twisted_kernel_spectral(spec: &GridSpec, r: &ScaleTriple) -> SpatialField {
    let lat = Lattice::get(spec);
    let ones = vec![Complex64::new(1.0, 0.0); spec.len()];
    apply_factor(spec, &ones, &multiplier_factor(&lat, &r.radii()), true)
}

/// Twisted Poisson extension of `f` at scale `r`.
pub fn extend(f: &SpatialField, r: &ScaleTriple) -> ExtensionField {
    let spec = f.spec();
    let lat = Lattice::get(spec);
    let fh = forward_transform(f);
    let factor = multiplier_factor(&lat, &r.radii());
    ExtensionField {
        scale: *r,
        field: apply_factor(spec, fh.coeffs(), &factor, f.is_real()),
    }
}

/// Action of a derivative within one block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BlockAction {
    #[default]
    None,
    /// Spatial component `k` (0-based, `k < m`). In block 3 this is the
    /// twisted direction `∂_{x1^k} + ∂_{x2^k}`.
    Spatial(usize),
    /// Derivative in the block's scale `r_j`.
    Scale,
}

/// One action per block. A scale derivative on a boundary block is the
/// analytic `r_j -> 0` limit and must be requested with
/// [`BlockDerivativeSpec::allow_boundary_limit`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BlockDerivativeSpec {
    pub actions: [BlockAction; 3],
    pub boundary_limit: bool,
}

impl BlockDerivativeSpec {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, block: Block, action: BlockAction) -> Self {
        self.actions[block.index()] = action;
        self
    }

    pub fn allow_boundary_limit(mut self) -> Self {
        self.boundary_limit = true;
        self
    }
}

#[inline]
fn action_factor(block: usize, action: BlockAction, rep: &Rep) -> Complex64 {
    match action {
        BlockAction::None => Complex64::new(1.0, 0.0),
        BlockAction::Spatial(k) => {
            let xi = match block {
                0 => rep.xi1[k],
                1 => rep.xi2[k],
                _ => rep.xi1[k] + rep.xi2[k],
            };
            Complex64::new(0.0, xi)
        }
        BlockAction::Scale => Complex64::new(-rep.a[block], 0.0),
    }
}

fn check_actions(m: usize, r: &ScaleTriple, d: &BlockDerivativeSpec) -> Result<()> {
    for (j, action) in d.actions.iter().enumerate() {
        match *action {
            BlockAction::Spatial(k) if k >= m => {
                return Err(Error::InvalidArgument(format!(
                    "spatial component {k} out of range for m = {m}"
                )))
            }
            BlockAction::Scale if r.boundary[j] && !d.boundary_limit => {
                return Err(Error::InvalidArgument(format!(
                    "scale derivative on boundary block {} needs the boundary-limit flag",
                    j + 1
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Spectral evaluation of a mixed block derivative of `U_f(·, r)`.
pub fn block_derivative_field(
    f: &SpatialField,
    r: &ScaleTriple,
    d: &BlockDerivativeSpec,
) -> Result<SpatialField> {
    let spec = f.spec();
    check_actions(spec.m(), r, d)?;
    let lat = Lattice::get(spec);
    let fh = forward_transform(f);
    let radii = r.radii();
    let factor = lat.factor(|_, rep| {
        let mut c = Complex64::new(multiplier_from(&radii, &rep.a), 0.0);
        for (j, &action) in d.actions.iter().enumerate() {
            c *= action_factor(j, action, rep);
        }
        c
    });
    Ok(apply_factor(spec, fh.coeffs(), &factor, f.is_real()))
}

/// `Σ |D U_f|^2` over every combination of one action per listed block;
/// works on a precomputed spectrum. `radii` has zeros in boundary blocks.
pub(crate) fn gradient_sq_spectral(
    lat: &Lattice,
    fh: &[Complex64],
    real: bool,
    radii: &[f64; 3],
    blocks: &[Block],
) -> Vec<f64> {
    let spec = &lat.spec;
    let m = spec.m();
    let mult = lat.per_slot(|rep| multiplier_from(radii, &rep.a));
    let options = m + 1;
    let combos = options.pow(blocks.len() as u32);
    let spectrum = |combo: usize| -> Vec<Complex64> {
        let mut actions = [BlockAction::None; 3];
        let mut rest = combo;
        for b in blocks {
            let o = rest % options;
            rest /= options;
            actions[b.index()] = if o < m {
                BlockAction::Spatial(o)
            } else {
                BlockAction::Scale
            };
        }
        let factor = lat.factor(|slot, rep| {
            let mut c = Complex64::new(mult[slot], 0.0);
            for b in blocks {
                c *= action_factor(b.index(), actions[b.index()], rep);
            }
            c
        });
        fh.iter().zip(&factor).map(|(a, b)| a * b).collect()
    };
    let mut acc = vec![0.0; spec.len()];
    if real {
        let mut combo = 0;
        while combo < combos {
            let first = spectrum(combo);
            let second = (combo + 1 < combos).then(|| spectrum(combo + 1));
            let (u, v) = inverse_transform_pair(spec, &first, second.as_deref());
            for (a, x) in acc.iter_mut().zip(&u) {
                *a += x * x;
            }
            if let Some(v) = v {
                for (a, x) in acc.iter_mut().zip(&v) {
                    *a += x * x;
                }
            }
            combo += 2;
        }
    } else {
        for combo in 0..combos {
            let freq = FrequencyField::from_coeffs(*spec, spectrum(combo)).expect("lengths");
            let u = crate::grid::inverse_transform(&freq, false);
            for (a, x) in acc.iter_mut().zip(u.values()) {
                *a += x.norm_sqr();
            }
        }
    }
    acc
}

fn check_blocks(r: &ScaleTriple, blocks: &[Block]) -> Result<Vec<Block>> {
    if blocks.is_empty() {
        return Err(Error::InvalidArgument("block set must be nonempty".into()));
    }
    let mut sorted = blocks.to_vec();
    sorted.sort();
    sorted.dedup();
    if sorted.len() != blocks.len() {
        return Err(Error::InvalidArgument("repeated block in block set".into()));
    }
    if let Some(b) = sorted.iter().find(|b| r.is_boundary(**b)) {
        return Err(Error::InvalidArgument(format!(
            "gradient in boundary block {} is not defined",
            b.number()
        )));
    }
    Ok(sorted)
}

/// Pointwise sum of squared block gradients of `U_f(·, r)` over `blocks`.
pub fn mixed_gradient_sq(
    f: &SpatialField,
    r: &ScaleTriple,
    blocks: &[Block],
) -> Result<SpatialField> {
    let blocks = check_blocks(r, blocks)?;
    let spec = f.spec();
    let lat = Lattice::get(spec);
    let fh = forward_transform(f);
    let values = gradient_sq_spectral(&lat, fh.coeffs(), f.is_real(), &r.radii(), &blocks);
    SpatialField::from_real(*spec, values)
}

fn check_step(r: &ScaleTriple, block: Block, dr: f64) -> Result<()> {
    if r.is_boundary(block) {
        return Err(Error::InvalidArgument(format!(
            "block {} is a boundary block",
            block.number()
        )));
    }
    let rj = r.radius(block);
    if !(dr > 0.0 && dr < rj / 4.0) {
        return Err(Error::InvalidArgument(format!(
            "step {dr} must lie in (0, r_j/4) with r_j = {rj}"
        )));
    }
    Ok(())
}

fn spatial_laplacian_factor(lat: &Lattice, block: Block) -> Vec<Complex64> {
    let j = block.index();
    lat.factor(|_, rep| Complex64::new(-rep.a[j] * rep.a[j], 0.0))
}

fn shifted(r: &ScaleTriple, block: Block, delta: f64) -> [f64; 3] {
    let mut radii = r.radii();
    radii[block.index()] += delta;
    radii
}

/// `‖Δ_{x_j} U_f + D²_{r_j} U_f‖_2` with the spatial part spectral and the
/// scale part a centered second difference of step `dr`.
pub fn harmonicity_residual(
    f: &SpatialField,
    r: &ScaleTriple,
    block: Block,
    dr: f64,
) -> Result<f64> {
    check_step(r, block, dr)?;
    let spec = f.spec();
    let lat = Lattice::get(spec);
    let fh = forward_transform(f);
    let real = f.is_real();
    let u_at = |radii: [f64; 3]| apply_factor(spec, fh.coeffs(), &multiplier_factor(&lat, &radii), real);
    let u0 = u_at(r.radii());
    let up = u_at(shifted(r, block, dr));
    let um = u_at(shifted(r, block, -dr));
    let lap_factor = spatial_laplacian_factor(&lat, block);
    let u0h = forward_transform(&u0);
    let lap = apply_factor(spec, u0h.coeffs(), &lap_factor, real);
    let inv = 1.0 / (dr * dr);
    let values: Vec<Complex64> = (0..spec.len())
        .map(|i| {
            lap.values()[i] + (up.values()[i] - 2.0 * u0.values()[i] + um.values()[i]) * inv
        })
        .collect();
    lp_norm(&SpatialField::from_complex(*spec, values)?, 2.0)
}

/// `‖Δ_j (U_f²) - 2 |∇_j U_f|²‖_2` for real `f`, with the same discretization
/// as [`harmonicity_residual`].
pub fn square_identity_residual(
    f: &SpatialField,
    r: &ScaleTriple,
    block: Block,
    dr: f64,
) -> Result<f64> {
    check_step(r, block, dr)?;
    if !f.is_real() {
        return Err(Error::InvalidArgument(
            "square identity needs a real field".into(),
        ));
    }
    let spec = f.spec();
    let lat = Lattice::get(spec);
    let fh = forward_transform(f);
    let u_at = |radii: [f64; 3]| {
        apply_factor(spec, fh.coeffs(), &multiplier_factor(&lat, &radii), true).real_values()
    };
    let u0 = u_at(r.radii());
    let up = u_at(shifted(r, block, dr));
    let um = u_at(shifted(r, block, -dr));
    let sq = |u: &[f64]| u.iter().map(|x| x * x).collect::<Vec<f64>>();
    let (s0, sp, sm) = (sq(&u0), sq(&up), sq(&um));
    let s0h = forward_transform(&SpatialField::from_real(*spec, s0.clone())?);
    let lap = apply_factor(spec, s0h.coeffs(), &spatial_laplacian_factor(&lat, block), true);
    let grad = gradient_sq_spectral(&lat, fh.coeffs(), true, &r.radii(), &[block]);
    let inv = 1.0 / (dr * dr);
    let values: Vec<f64> = (0..spec.len())
        .map(|i| lap.values()[i].re + (sp[i] - 2.0 * s0[i] + sm[i]) * inv - 2.0 * grad[i])
        .collect();
    lp_norm(&SpatialField::from_real(*spec, values)?, 2.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::make_grid;
    use crate::numerics::integrate;
    use proptest::prelude::*;

    fn bump(spec: GridSpec) -> SpatialField {
        let l = spec.period();
        SpatialField::from_fn(spec, |x| {
            let d1 = x[0] - 0.4 * l;
            let d2 = x[1] - 0.55 * l;
            (-(d1 * d1 + 0.5 * d2 * d2 + 0.3 * d1 * d2) / 2.0).exp()
        })
    }

    fn mode(spec: GridSpec, k1: f64, k2: f64) -> SpatialField {
        let step = spec.frequency_step();
        SpatialField::from_fn(spec, |x| (step * (k1 * x[0] + k2 * x[1])).cos())
    }

    #[test]
    fn poisson_values() {
        assert!((poisson_kernel_1d(1, 1.0, &[0.0]).unwrap() - 1.0 / PI).abs() < 1e-15);
        assert!((poisson_kernel_1d(1, 2.0, &[0.0]).unwrap() - 0.5 / PI).abs() < 1e-15);
        assert!(poisson_kernel_1d(1, 0.0, &[0.0]).is_err());
        assert!(poisson_kernel_1d(1, -1.0, &[0.0]).is_err());
        let mass = integrate(
            &|v: f64| poisson_kernel_1d(1, 1.0, &[v]).unwrap(),
            -1e4,
            1e4,
            1e-10,
        );
        assert!((mass - 1.0).abs() < 1e-3);
    }

    #[test]
    fn poisson_constant_gives_unit_mass_in_2d() {
        // radial integral 2π ∫ c a ρ / (a² + ρ²)^{3/2} dρ = 2π c
        assert!((2.0 * PI * poisson_constant(2) - 1.0).abs() < 1e-14);
    }

    #[test]
    fn periodized_matches_image_sum() {
        let (a, l) = (0.7, 5.0);
        for &v in &[0.0, 0.3, 2.4, 4.9] {
            let images: f64 = (-20000..=20000)
                .map(|k| poisson_kernel_1d(1, a, &[v + k as f64 * l]).unwrap())
                .sum();
            assert!((periodized_poisson(a, v, l) - images).abs() < 1e-5);
        }
    }

    #[test]
    fn multiplier_examples() {
        let r = ScaleTriple::new(1.0, 1.0, 5.0).unwrap();
        assert!((twisted_multiplier(&[1.0], &[-1.0], &r) - (-2.0f64).exp()).abs() < 1e-15);
        let r = ScaleTriple::new(1.0, 1.0, 1.0).unwrap();
        assert!((twisted_multiplier(&[3.0], &[4.0], &r) - (-14.0f64).exp()).abs() < 1e-18);
        assert_eq!(twisted_multiplier(&[0.0], &[0.0], &r), 1.0);
    }

    #[test]
    fn scale_triple_validation() {
        assert!(ScaleTriple::new(0.0, 1.0, 1.0).is_err());
        assert!(ScaleTriple::new(1.0, f64::NAN, 1.0).is_err());
        let r = ScaleTriple::partial([Some(0.5), None, Some(1.0)]).unwrap();
        assert!(r.is_boundary(Block::Two));
        assert_eq!(r.radii(), [0.5, 0.0, 1.0]);
    }

    #[test]
    fn physical_kernel_mass_and_symmetry() {
        let spec = make_grid(1, 64, 8.0).unwrap();
        let k = twisted_kernel_physical(&spec, &ScaleTriple::new(0.3, 0.5, 0.4).unwrap()).unwrap();
        assert!(k.real_values().iter().all(|&v| v >= 0.0));
        assert!((k.integral().re - 1.0).abs() < 1e-3);
        let swapped =
            twisted_kernel_physical(&spec, &ScaleTriple::new(0.5, 0.3, 0.4).unwrap()).unwrap();
        let n = spec.n();
        for i in 0..n {
            for j in 0..n {
                let a = k.values()[i * n + j].re;
                let b = swapped.values()[j * n + i].re;
                assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn physical_kernel_matches_multiplier() {
        let spec = make_grid(1, 64, 8.0).unwrap();
        let r = ScaleTriple::new(0.3, 0.4, 0.5).unwrap();
        let k = twisted_kernel_physical(&spec, &r).unwrap();
        let spectral = twisted_kernel_spectral(&spec, &r);
        let diff = k.sub(&spectral).unwrap().sup_abs();
        assert!(diff / k.sup_abs() < 1e-6, "relative error {}", diff / k.sup_abs());
    }

    #[test]
    fn physical_kernel_errors() {
        let spec = make_grid(1, 32, 8.0).unwrap();
        let big = ScaleTriple::new(3.0, 0.5, 0.5).unwrap();
        assert!(matches!(
            twisted_kernel_physical(&spec, &big),
            Err(Error::DomainSize(_))
        ));
        let tiny = ScaleTriple::new(0.005, 0.005, 0.005).unwrap();
        assert!(matches!(
            twisted_kernel_physical(&spec, &tiny),
            Err(Error::DomainSize(_))
        ));
        let partial = ScaleTriple::new(0.5, 0.5, 0.5).unwrap().with_boundary(Block::One);
        assert!(twisted_kernel_physical(&spec, &partial).is_err());
    }

    #[test]
    fn tensor_kernel_for_m2() {
        let spec = make_grid(2, 8, 8.0).unwrap();
        let r = ScaleTriple::new(2.0, 1.5, 1.8).unwrap();
        let k = twisted_kernel_physical(&spec, &r).unwrap();
        assert!((k.integral().re - 1.0).abs() < 1e-3);
        assert!(k.real_values().iter().all(|&v| v >= 0.0));
        let spectral = twisted_kernel_spectral(&spec, &r);
        let diff = k.sub(&spectral).unwrap().sup_abs();
        assert!(diff / k.sup_abs() < 1e-3);
    }

    #[test]
    fn extension_basics() {
        let spec = make_grid(1, 32, 6.0).unwrap();
        let f = bump(spec);
        let id = extend(&f, &ScaleTriple::all_boundary());
        assert!(id.field().sub(&f).unwrap().sup_abs() < 1e-12);
        let r = ScaleTriple::new(0.4, 0.3, 0.6).unwrap();
        let u = extend(&f, &r);
        assert!(u.field().is_real());
        assert!((u.field().mean() - f.mean()).norm() < 1e-12);
        assert!(u.field().sup_abs() <= f.sup_abs() + 1e-8);
    }

    #[test]
    fn extension_of_a_mode() {
        let spec = make_grid(1, 32, 6.0).unwrap();
        let f = mode(spec, 2.0, -5.0);
        let r = ScaleTriple::new(0.4, 0.3, 0.6).unwrap();
        let step = spec.frequency_step();
        let factor = twisted_multiplier(&[2.0 * step], &[-5.0 * step], &r);
        let u = extend(&f, &r);
        assert!(u.field().sub(&f.scaled(factor)).unwrap().sup_abs() < 1e-12);
    }

    #[test]
    fn semigroup_in_one_block() {
        let spec = make_grid(1, 32, 6.0).unwrap();
        let f = bump(spec);
        let s = ScaleTriple::partial([Some(0.3), None, None]).unwrap();
        let t = ScaleTriple::partial([Some(0.5), None, None]).unwrap();
        let st = ScaleTriple::partial([Some(0.8), None, None]).unwrap();
        let twice = extend(extend(&f, &s).field(), &t);
        let once = extend(&f, &st);
        assert!(twice.field().sub(once.field()).unwrap().sup_abs() < 1e-10);
    }

    #[test]
    fn extension_binary_round_trip() {
        let spec = make_grid(1, 8, 2.0).unwrap();
        let f = bump(spec);
        let r = ScaleTriple::partial([Some(0.25), None, Some(0.5)]).unwrap();
        let u = extend(&f, &r);
        let mut buf = Vec::new();
        u.write_binary(&mut buf).unwrap();
        let back = ExtensionField::read_binary(buf.as_slice()).unwrap();
        assert_eq!(back.scale(), u.scale());
        assert_eq!(back.field().values(), u.field().values());
        let flag_pos = buf.len() - 8 * 64 - 1;
        buf[flag_pos] = 7;
        assert!(ExtensionField::read_binary(buf.as_slice()).is_err());
    }

    #[test]
    fn derivative_of_constant_vanishes() {
        let spec = make_grid(1, 16, 4.0).unwrap();
        let f = SpatialField::constant(spec, 3.0);
        let r = ScaleTriple::new(0.5, 0.5, 0.5).unwrap();
        for action in [BlockAction::Spatial(0), BlockAction::Scale] {
            for b in Block::ALL {
                let d = BlockDerivativeSpec::new().with(b, action);
                let g = block_derivative_field(&f, &r, &d).unwrap();
                assert!(g.sup_abs() < 1e-14);
            }
        }
        let g = mixed_gradient_sq(&f, &r, &[Block::One, Block::Three]).unwrap();
        assert!(g.sup_abs() < 1e-20);
    }

    #[test]
    fn scale_derivative_of_twisted_mode() {
        let spec = make_grid(1, 32, 2.0 * PI).unwrap();
        let f = mode(spec, 1.0, 0.0);
        let r = ScaleTriple::new(0.3, 0.4, 0.5).unwrap();
        let d = BlockDerivativeSpec::new().with(Block::Three, BlockAction::Scale);
        let g = block_derivative_field(&f, &r, &d).unwrap();
        let m = twisted_multiplier(&[1.0], &[0.0], &r);
        assert!(g.sub(&f.scaled(-m)).unwrap().sup_abs() < 1e-12);
    }

    #[test]
    fn scale_derivative_matches_finite_difference() {
        let spec = make_grid(1, 64, 8.0).unwrap();
        let f = bump(spec);
        let r = ScaleTriple::new(0.5, 0.5, 0.5).unwrap();
        let d = BlockDerivativeSpec::new().with(Block::Three, BlockAction::Scale);
        let exact = block_derivative_field(&f, &r, &d).unwrap();
        let norm = lp_norm(&exact, 2.0).unwrap();
        let err = |h: f64| {
            let up = extend(&f, &r.with_radius(Block::Three, 0.5 + h).unwrap());
            let um = extend(&f, &r.with_radius(Block::Three, 0.5 - h).unwrap());
            let fd = up.field().sub(um.field()).unwrap().scaled(0.5 / h);
            lp_norm(&fd.sub(&exact).unwrap(), 2.0).unwrap() / norm
        };
        let (e1, e2) = (err(0.1), err(0.05));
        assert!(e1 < 1e-2);
        assert!((e1 / e2 - 4.0).abs() < 0.2, "ratio {}", e1 / e2);
    }

    #[test]
    fn boundary_scale_derivative_needs_flag() {
        let spec = make_grid(1, 16, 4.0).unwrap();
        let f = bump(spec);
        let r = ScaleTriple::new(0.5, 0.5, 0.5).unwrap().with_boundary(Block::Two);
        let d = BlockDerivativeSpec::new().with(Block::Two, BlockAction::Scale);
        assert!(block_derivative_field(&f, &r, &d).is_err());
        assert!(block_derivative_field(&f, &r, &d.allow_boundary_limit()).is_ok());
        let d = BlockDerivativeSpec::new().with(Block::One, BlockAction::Spatial(1));
        assert!(block_derivative_field(&f, &r, &d).is_err());
    }

    #[test]
    fn gradient_sq_of_single_modes() {
        let spec = make_grid(1, 32, 2.0 * PI).unwrap();
        let (k1, k2) = (2.0, 3.0);
        // a complex exponential has constant |.|²
        let f = SpatialField::from_complex(
            spec,
            (0..spec.len())
                .map(|i| {
                    let x = spec.coordinates(i);
                    Complex64::from_polar(1.0, k1 * x[0] + k2 * x[1])
                })
                .collect(),
        )
        .unwrap();
        let r = ScaleTriple::new(0.2, 0.3, 0.1).unwrap();
        let mult = twisted_multiplier(&[k1], &[k2], &r);
        let a3 = k1 + k2;
        let g = mixed_gradient_sq(&f, &r, &[Block::Three]).unwrap();
        let want = 2.0 * a3 * a3 * mult * mult;
        assert!(g.real_values().iter().all(|v| (v - want).abs() < 1e-10 * want));
        let g = mixed_gradient_sq(&f, &r, &[Block::One, Block::Two, Block::Three]).unwrap();
        let want = 8.0 * (k1 * k2 * a3).powi(2) * mult * mult;
        assert!(g.real_values().iter().all(|v| (v - want).abs() < 1e-10 * want));
    }

    #[test]
    fn gradient_sq_brute_force_over_combinations() {
        let spec = make_grid(1, 16, 4.0).unwrap();
        let f = bump(spec);
        let r = ScaleTriple::new(0.3, 0.4, 0.2).unwrap();
        let blocks = [Block::One, Block::Three];
        let fast = mixed_gradient_sq(&f, &r, &blocks).unwrap();
        let mut brute = vec![0.0; spec.len()];
        for a in [BlockAction::Spatial(0), BlockAction::Scale] {
            for b in [BlockAction::Spatial(0), BlockAction::Scale] {
                let d = BlockDerivativeSpec::new()
                    .with(Block::One, a)
                    .with(Block::Three, b);
                let g = block_derivative_field(&f, &r, &d).unwrap();
                for (acc, v) in brute.iter_mut().zip(g.values()) {
                    *acc += v.norm_sqr();
                }
            }
        }
        for (x, y) in fast.real_values().iter().zip(&brute) {
            assert!((x - y).abs() < 1e-12 * y.abs().max(1e-3));
        }
        assert!(mixed_gradient_sq(&f, &r, &[]).is_err());
        assert!(mixed_gradient_sq(&f, &r, &[Block::One, Block::One]).is_err());
    }

    #[test]
    fn harmonicity_of_constant_and_mode() {
        let spec = make_grid(1, 32, 8.0).unwrap();
        let r = ScaleTriple::new(0.5, 0.6, 0.7).unwrap();
        let c = SpatialField::constant(spec, 2.0);
        assert_eq!(harmonicity_residual(&c, &r, Block::Two, 0.05).unwrap(), 0.0);
        assert_eq!(square_identity_residual(&c, &r, Block::Two, 0.05).unwrap(), 0.0);

        let (k1, k2) = (3.0, 1.0);
        let f = mode(spec, k1, k2);
        let step = spec.frequency_step();
        let a1 = k1 * step;
        let dr = 0.1;
        let mult = twisted_multiplier(&[k1 * step], &[k2 * step], &r);
        let fd = 2.0 * ((a1 * dr).cosh() - 1.0) / (dr * dr);
        let l = spec.period();
        let want = mult * (fd - a1 * a1).abs() * (l * l / 2.0).sqrt();
        let got = harmonicity_residual(&f, &r, Block::One, dr).unwrap();
        assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        assert!(harmonicity_residual(&f, &r, Block::One, 0.2).is_err());
    }

    #[test]
    fn square_identity_single_mode() {
        let spec = make_grid(1, 32, 8.0).unwrap();
        let r = ScaleTriple::new(0.5, 0.6, 0.7).unwrap();
        let (k1, k2) = (2.0, 1.0);
        let f = mode(spec, k1, k2);
        let step = spec.frequency_step();
        let a3 = (k1 + k2) * step;
        let dr = 0.1;
        let mult = twisted_multiplier(&[k1 * step], &[k2 * step], &r);
        let d = 2.0 * ((2.0 * a3 * dr).cosh() - 1.0) / (dr * dr);
        let l = spec.period();
        let want = mult * mult * (d / 2.0 - 2.0 * a3 * a3).abs() * (1.5 * l * l).sqrt();
        let got = square_identity_residual(&f, &r, Block::Three, dr).unwrap();
        assert!((got - want).abs() < 1e-8, "{got} vs {want}");
    }

    #[test]
    fn residuals_are_second_order() {
        let spec = make_grid(1, 64, 8.0).unwrap();
        let f = bump(spec);
        let r = ScaleTriple::new(0.5, 0.5, 0.5).unwrap();
        for b in Block::ALL {
            let e: Vec<f64> = [0.1, 0.05, 0.025]
                .iter()
                .map(|&dr| harmonicity_residual(&f, &r, b, dr).unwrap())
                .collect();
            for w in e.windows(2) {
                assert!((w[0] / w[1] - 4.0).abs() < 0.3, "block {b:?}: {e:?}");
            }
            let e: Vec<f64> = [0.1, 0.05, 0.025]
                .iter()
                .map(|&dr| square_identity_residual(&f, &r, b, dr).unwrap())
                .collect();
            for w in e.windows(2) {
                assert!((w[0] / w[1] - 4.0).abs() < 0.3, "block {b:?}: {e:?}");
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn multiplier_bounded_and_monotone(
            x1 in -20.0f64..20.0, x2 in -20.0f64..20.0,
            r in prop::array::uniform3(0.01f64..3.0), j in 0usize..3, dr in 0.01f64..1.0,
        ) {
            let t = ScaleTriple::from_radii(r).unwrap();
            let v = twisted_multiplier(&[x1], &[x2], &t);
            prop_assert!(v > 0.0 && v <= 1.0);
            let mut bigger = r;
            bigger[j] += dr;
            let w = twisted_multiplier(&[x1], &[x2], &ScaleTriple::from_radii(bigger).unwrap());
            prop_assert!(w <= v);
        }

        #[test]
        fn maximum_principle(seed in any::<u64>(), r in prop::array::uniform3(0.05f64..2.0)) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let spec = make_grid(1, 16, 4.0).unwrap();
            let f = SpatialField::from_real(
                spec,
                (0..spec.len()).map(|_| rng.random_range(-1.0..1.0)).collect(),
            ).unwrap();
            let u = extend(&f, &ScaleTriple::from_radii(r).unwrap());
            prop_assert!(u.field().sup_abs() <= f.sup_abs() + 1e-8);
        }

        #[test]
        fn semigroup_exact_at_multiplier_level(
            s in 0.01f64..2.0, t in 0.01f64..2.0, x1 in -10.0f64..10.0, x2 in -10.0f64..10.0,
        ) {
            let one = |r: f64| ScaleTriple::partial([None, None, Some(r)]).unwrap();
            let a = twisted_multiplier(&[x1], &[x2], &one(s)) * twisted_multiplier(&[x1], &[x2], &one(t));
            let b = twisted_multiplier(&[x1], &[x2], &one(s + t));
            prop_assert!((a - b).abs() <= 1e-12 * b.max(1e-300));
        }
    }
}
