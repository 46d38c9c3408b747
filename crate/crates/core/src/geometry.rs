//! Twisted tubes and their dyadic counterparts.
//!
//! Continuous tubes `T(x, r)` are rectangles or sheared parallelograms
//! depending on which two radii dominate. Dyadic tubes of types I–V live on
//! rasterized masks; every slant family is a standard dyadic rectangle in
//! sheared cell coordinates.

use std::collections::{BTreeSet, HashMap};
use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{GridSpec, SpatialField, MAX_BLOCK_DIM};
use crate::numerics::unit_ball_volume;

/// Shape of `T(0, r)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Regime {
    /// `B_{r1} x B_{r2}`.
    Rect,
    /// `{|x1 - x2| < r1, |x2| < r3}`.
    ParaFirst,
    /// `{|x2 - x1| < r2, |x1| < r3}`.
    ParaSecond,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::Rect, Regime::ParaFirst, Regime::ParaSecond];

    /// The two radii that define the shape: `(r1, r2)`, `(r1, r3)` or
    /// `(r2, r3)`.
    pub fn defining_pair(self, r: [f64; 3]) -> (f64, f64) {
        match self {
            Regime::Rect => (r[0], r[1]),
            Regime::ParaFirst => (r[0], r[2]),
            Regime::ParaSecond => (r[1], r[2]),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Regime::Rect => "rect",
            Regime::ParaFirst => "para-first",
            Regime::ParaSecond => "para-second",
        }
    }
}

/// Regime of a radius triple. Overlapping cases resolve in the order
/// Rect, ParaFirst, ParaSecond.
pub fn classify_regime(r: [f64; 3]) -> Regime {
    if r[0] >= r[2] && r[1] >= r[2] {
        Regime::Rect
    } else if r[0] >= r[1] && r[2] >= r[1] {
        Regime::ParaFirst
    } else {
        Regime::ParaSecond
    }
}

fn norm(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|x| x * x).sum::<f64>().sqrt()
}

/// A tube `T(center, r)` in `R^{2m}`.
#[derive(Debug, Clone, PartialEq)]
pub struct TubeSpec {
    center: Vec<f64>,
    radii: [f64; 3],
}

impl TubeSpec {
    pub fn new(center: Vec<f64>, radii: [f64; 3]) -> Result<Self> {
        if center.is_empty() || center.len() % 2 != 0 {
            return Err(Error::InvalidArgument(format!(
                "tube center needs 2m coordinates, got {}",
                center.len()
            )));
        }
        if radii.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "tube radii must be positive, got {radii:?}"
            )));
        }
        Ok(Self { center, radii })
    }

    pub fn m(&self) -> usize {
        self.center.len() / 2
    }

    pub fn center(&self) -> &[f64] {
        &self.center
    }

    pub fn radii(&self) -> [f64; 3] {
        self.radii
    }

    pub fn regime(&self) -> Regime {
        classify_regime(self.radii)
    }

    /// Same center, radii multiplied by `c`.
    pub fn scaled(&self, c: f64) -> Result<TubeSpec> {
        TubeSpec::new(self.center.clone(), self.radii.map(|r| r * c))
    }
}

/// Membership of `p` in the open tube.
pub fn tube_contains(t: &TubeSpec, p: &[f64]) -> bool {
    let m = t.m();
    if p.len() != 2 * m {
        return false;
    }
    let d1 = (0..m).map(|k| p[k] - t.center[k]);
    let d2 = (0..m).map(|k| p[m + k] - t.center[m + k]);
    let diff = (0..m).map(|k| (p[k] - t.center[k]) - (p[m + k] - t.center[m + k]));
    let [r1, r2, r3] = t.radii;
    match t.regime() {
        Regime::Rect => norm(d1) < r1 && norm(d2) < r2,
        Regime::ParaFirst => norm(diff) < r1 && norm(d2) < r3,
        Regime::ParaSecond => norm(diff) < r2 && norm(d1) < r3,
    }
}

/// Lebesgue volume `v_m^2 (r_a r_b)^m` of the tube.
pub fn tube_volume(t: &TubeSpec) -> f64 {
    let m = t.m();
    let (ra, rb) = t.regime().defining_pair(t.radii);
    let v = unit_ball_volume(m);
    v * v * (ra * rb).powi(m as i32)
}

/// `π(x1, x2, x3) = (x1 + x3, x2 + x3)`.
pub fn pi_project(q: &[f64]) -> Result<Vec<f64>> {
    if q.is_empty() || q.len() % 3 != 0 {
        return Err(Error::InvalidArgument(format!(
            "projection needs 3m coordinates, got {}",
            q.len()
        )));
    }
    let m = q.len() / 3;
    Ok((0..2 * m).map(|i| q[i] + q[2 * m + i % m]).collect())
}

/// Whether `p - x` lies in `π(B1(r1) x B2(r2) x B3(r3))`, i.e. whether some
/// fiber point `u` has `|u| < r3`, `|d1 - u| < r1`, `|d2 - u| < r2`.
pub fn in_projected_ball(x: &[f64], r: [f64; 3], p: &[f64]) -> bool {
    let m = x.len() / 2;
    let d1: Vec<f64> = (0..m).map(|k| p[k] - x[k]).collect();
    let d2: Vec<f64> = (0..m).map(|k| p[m + k] - x[m + k]).collect();
    let origin = vec![0.0; m];
    balls_intersect([&d1, &d2, &origin], r)
}

/// Whether three open balls in `R^m` have a common point.
fn balls_intersect(centers: [&[f64]; 3], radii: [f64; 3]) -> bool {
    let m = centers[0].len();
    if m == 1 {
        let lo = (0..3)
            .map(|i| centers[i][0] - radii[i])
            .fold(f64::NEG_INFINITY, f64::max);
        let hi = (0..3)
            .map(|i| centers[i][0] + radii[i])
            .fold(f64::INFINITY, f64::min);
        return lo < hi;
    }
    // g(u) = max_i |u - c_i| - r_i is convex and attains its minimum in the
    // plane through the centers; minimize it there by nested golden search.
    let sub = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<f64>>();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let mut e1 = sub(centers[1], centers[0]);
    let l1 = dot(&e1, &e1).sqrt();
    if l1 > 0.0 {
        e1.iter_mut().for_each(|v| *v /= l1);
    }
    let mut e2 = sub(centers[2], centers[0]);
    let proj = dot(&e2, &e1);
    e2.iter_mut().zip(&e1).for_each(|(v, w)| *v -= proj * w);
    let l2 = dot(&e2, &e2).sqrt();
    if l2 > 1e-14 * (l1 + 1.0) {
        e2.iter_mut().for_each(|v| *v /= l2);
    } else {
        e2.iter_mut().for_each(|v| *v = 0.0);
    }
    let g = |s: f64, t: f64| {
        (0..3)
            .map(|i| {
                let d = norm((0..m).map(|k| centers[0][k] + s * e1[k] + t * e2[k] - centers[i][k]));
                d - radii[i]
            })
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let coords: Vec<(f64, f64)> = (0..3)
        .map(|i| {
            let d = sub(centers[i], centers[0]);
            (dot(&d, &e1), dot(&d, &e2))
        })
        .collect();
    let (s_lo, s_hi) = bounds(coords.iter().map(|c| c.0));
    let (t_lo, t_hi) = bounds(coords.iter().map(|c| c.1));
    let inner = |s: f64| golden_min(|t| g(s, t), t_lo, t_hi);
    golden_min(inner, s_lo, s_hi) < 0.0
}

fn bounds(it: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let lo = it.clone().fold(f64::INFINITY, f64::min);
    let hi = it.fold(f64::NEG_INFINITY, f64::max);
    (lo, hi)
}

fn golden_min<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64) -> f64 {
    let ratio = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..80 {
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d);
        }
    }
    f(a).min(f(b)).min(fc).min(fd)
}

/// Outcome of a two-sided containment sampling check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContainmentReport {
    pub samples: usize,
    pub inner_violations: usize,
    pub outer_violations: usize,
}

impl ContainmentReport {
    pub fn violations(&self) -> usize {
        self.inner_violations + self.outer_violations
    }
}

fn uniform_ball(rng: &mut ChaCha8Rng, m: usize, r: f64) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..m).map(|_| rng.random_range(-1.0..1.0)).collect();
        if norm(v.iter().copied()) < 1.0 {
            return v.into_iter().map(|x| x * r).collect();
        }
    }
}

/// Uniform sample from `T(x, r)`.
pub fn sample_tube(t: &TubeSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let m = t.m();
    let regime = t.regime();
    let (ra, rb) = regime.defining_pair(t.radii);
    let s = uniform_ball(rng, m, ra);
    let u = uniform_ball(rng, m, rb);
    let c = &t.center;
    (0..2 * m)
        .map(|i| {
            let k = i % m;
            let first = i < m;
            let offset = match (regime, first) {
                (Regime::Rect, true) => s[k],
                (Regime::Rect, false) => u[k],
                (Regime::ParaFirst, true) => s[k] + u[k],
                (Regime::ParaFirst, false) => u[k],
                (Regime::ParaSecond, true) => u[k],
                (Regime::ParaSecond, false) => s[k] + u[k],
            };
            c[i] + offset
        })
        .collect()
}

/// Samples both inclusions `T(x, r/2) ⊂ π(B̃(x, r)) ⊂ T(x, 2r)`.
pub fn containment_check(x: &[f64], r: [f64; 3], samples: usize, seed: u64) -> Result<ContainmentReport> {
    containment_check_with(x, r, samples, seed, 0.5, 2.0)
}

/// Containment sampling with the inner and outer tube factors as
/// parameters.
pub fn containment_check_with(
    x: &[f64],
    r: [f64; 3],
    samples: usize,
    seed: u64,
    inner_factor: f64,
    outer_factor: f64,
) -> Result<ContainmentReport> {
    if samples == 0 {
        return Err(Error::InvalidArgument("samples must be at least 1".into()));
    }
    let tube = TubeSpec::new(x.to_vec(), r)?;
    let inner = tube.scaled(inner_factor)?;
    let outer = tube.scaled(outer_factor)?;
    let m = tube.m();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = ContainmentReport {
        samples,
        inner_violations: 0,
        outer_violations: 0,
    };
    for _ in 0..samples {
        let p = sample_tube(&inner, &mut rng);
        if !in_projected_ball(x, r, &p) {
            report.inner_violations += 1;
        }
        let mut q = Vec::with_capacity(3 * m);
        for j in 0..3 {
            q.extend(uniform_ball(&mut rng, m, r[j]));
        }
        let mut p = pi_project(&q)?;
        for (pi, xi) in p.iter_mut().zip(x) {
            *pi += xi;
        }
        if !tube_contains(&outer, &p) {
            report.outer_violations += 1;
        }
    }
    Ok(report)
}

/// The five dyadic tube types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TubeKind {
    I,
    II,
    III,
    IV,
    V,
}

/// Coordinate system in which a tube family is a standard dyadic rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Shear {
    /// `(u, v) = (x1, x2)`.
    None,
    /// `(u, v) = (x1 - x2, x2)`, types II and III.
    First,
    /// `(u, v) = (x1, x2 - x1)`, types IV and V.
    Second,
}

impl TubeKind {
    pub const ALL: [TubeKind; 5] = [TubeKind::I, TubeKind::II, TubeKind::III, TubeKind::IV, TubeKind::V];

    pub fn shear(self) -> Shear {
        match self {
            TubeKind::I => Shear::None,
            TubeKind::II | TubeKind::III => Shear::First,
            TubeKind::IV | TubeKind::V => Shear::Second,
        }
    }

    /// Whether scales `(ja, jb)` satisfy this type's order constraint.
    pub fn admits(self, ja: i32, jb: i32) -> bool {
        match self {
            TubeKind::I => true,
            TubeKind::II | TubeKind::IV => ja <= jb,
            TubeKind::III | TubeKind::V => ja > jb,
        }
    }

    /// The type of a tube of this shear family at scales `(ja, jb)`.
    pub fn in_family(self, ja: i32, jb: i32) -> TubeKind {
        match (self.shear(), ja <= jb) {
            (Shear::None, _) => TubeKind::I,
            (Shear::First, true) => TubeKind::II,
            (Shear::First, false) => TubeKind::III,
            (Shear::Second, true) => TubeKind::IV,
            (Shear::Second, false) => TubeKind::V,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TubeKind::I => "I",
            TubeKind::II => "II",
            TubeKind::III => "III",
            TubeKind::IV => "IV",
            TubeKind::V => "V",
        }
    }

    pub fn parse(s: &str) -> Result<TubeKind> {
        TubeKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown tube type {s}")))
    }
}

/// Type and defining scales of the dyadic rectangles of scale `j`.
pub fn classify_scale(j: [i32; 3]) -> (TubeKind, (i32, i32)) {
    let [j1, j2, j3] = j;
    if j1 >= j3 && j2 >= j3 {
        (TubeKind::I, (j1, j2))
    } else if j1 >= j2 && j3 >= j2 {
        (TubeKind::II.in_family(j1, j3), (j1, j3))
    } else {
        (TubeKind::IV.in_family(j2, j3), (j2, j3))
    }
}

/// Which defining interval a maximality condition refers to: the first
/// interval `I` or the second interval `J` (the slant direction for types
/// II–V).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    First,
    Second,
}

impl Axis {
    pub fn other(self) -> Axis {
        match self {
            Axis::First => Axis::Second,
            Axis::Second => Axis::First,
        }
    }
}

/// A dyadic tube: in its sheared coordinates `(u, v)` it is
/// `prod_k [a_k 2^{ja}, (a_k + 1) 2^{ja}) x prod_k [b_k 2^{jb}, (b_k + 1) 2^{jb})`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DyadicTube {
    pub kind: TubeKind,
    pub scales: (i32, i32),
    /// Lattice indices `(a, b)`, `m` each.
    pub index: Vec<i64>,
}

fn pow2(j: i32) -> f64 {
    2f64.powi(j)
}

impl DyadicTube {
    pub fn m(&self) -> usize {
        self.index.len() / 2
    }

    /// Translation vector in `R^{2m}`: a shear image of `(a 2^{ja}, b 2^{jb})`.
    pub fn offset(&self) -> Vec<f64> {
        let m = self.m();
        let n1: Vec<f64> = self.index[..m].iter().map(|&a| a as f64 * pow2(self.scales.0)).collect();
        let n2: Vec<f64> = self.index[m..].iter().map(|&b| b as f64 * pow2(self.scales.1)).collect();
        let mut out = Vec::with_capacity(2 * m);
        match self.kind.shear() {
            Shear::None => {
                out.extend(&n1);
                out.extend(&n2);
            }
            Shear::First => {
                out.extend(n1.iter().zip(&n2).map(|(a, b)| a + b));
                out.extend(&n2);
            }
            Shear::Second => {
                out.extend(&n1);
                out.extend(n1.iter().zip(&n2).map(|(a, b)| a + b));
            }
        }
        out
    }

    /// Membership of a point, by inverse shear and a box test.
    pub fn contains_point(&self, x: &[f64]) -> bool {
        let m = self.m();
        if x.len() != 2 * m {
            return false;
        }
        let (la, lb) = (pow2(self.scales.0), pow2(self.scales.1));
        (0..m).all(|k| {
            let (x1, x2) = (x[k], x[m + k]);
            let (u, v) = match self.kind.shear() {
                Shear::None => (x1, x2),
                Shear::First => (x1 - x2, x2),
                Shear::Second => (x1, x2 - x1),
            };
            let a = self.index[k] as f64 * la;
            let b = self.index[m + k] as f64 * lb;
            u >= a && u < a + la && v >= b && v < b + lb
        })
    }

    pub fn measure(&self) -> f64 {
        pow2(self.scales.0 + self.scales.1).powi(self.m() as i32)
    }
}

/// A rasterized open set on the window `[0, L)^{2m}`: a union of grid cells
/// of side `h = L/n`, which must be a power of two.
#[derive(Debug, Clone, PartialEq)]
pub struct OpenSetMask {
    spec: GridSpec,
    level: i32,
    bits: Vec<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
struct MaskSidecar {
    m: usize,
    n: usize,
    period: f64,
}

fn cell_level(spec: &GridSpec) -> Result<i32> {
    let l = spec.spacing().log2();
    let level = l.round();
    if (l - level).abs() > 1e-12 {
        return Err(Error::InvalidArgument(format!(
            "mask cell size {} is not a power of two",
            spec.spacing()
        )));
    }
    Ok(level as i32)
}

impl OpenSetMask {
    pub fn empty(spec: GridSpec) -> Result<Self> {
        let level = cell_level(&spec)?;
        Ok(Self {
            spec,
            level,
            bits: vec![false; spec.len()],
        })
    }

    pub fn from_bits(spec: GridSpec, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != spec.len() {
            return Err(Error::SpecMismatch(format!(
                "mask has {} cells, grid has {}",
                bits.len(),
                spec.len()
            )));
        }
        let level = cell_level(&spec)?;
        Ok(Self { spec, level, bits })
    }

    /// Cells whose centers satisfy `inside`.
    pub fn from_fn<F: Fn(&[f64]) -> bool>(spec: GridSpec, inside: F) -> Result<Self> {
        let h = spec.spacing();
        let bits = (0..spec.len())
            .map(|idx| {
                let c: Vec<f64> = spec.coordinates(idx).iter().map(|x| x + 0.5 * h).collect();
                inside(&c)
            })
            .collect();
        Self::from_bits(spec, bits)
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    /// `log2` of the cell side.
    pub fn level(&self) -> i32 {
        self.level
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, idx: usize) -> bool {
        self.bits[idx]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    pub fn measure(&self) -> f64 {
        self.count() as f64 * self.spec.cell_measure()
    }

    pub fn is_subset_of(&self, other: &OpenSetMask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn to_field(&self) -> SpatialField {
        SpatialField::from_real(self.spec, self.bits.iter().map(|&b| b as u8 as f64).collect())
            .expect("mask matches its grid")
    }

    /// Plain PBM (`P1`): one row per value of the first block's flat index.
    pub fn write_pbm<W: Write>(&self, mut w: W) -> Result<()> {
        let side = self.spec.n().pow(self.spec.m() as u32);
        writeln!(w, "P1")?;
        writeln!(w, "{side} {side}")?;
        for row in self.bits.chunks(side) {
            let line: Vec<&str> = row.iter().map(|&b| if b { "1" } else { "0" }).collect();
            writeln!(w, "{}", line.join(" "))?;
        }
        Ok(())
    }

    pub fn sidecar_json(&self) -> String {
        serde_json::to_string_pretty(&MaskSidecar {
            m: self.spec.m(),
            n: self.spec.n(),
            period: self.spec.period(),
        })
        .expect("plain struct serializes")
    }

    pub fn read_pbm<R: BufRead>(pbm: R, sidecar_json: &str) -> Result<Self> {
        let meta: MaskSidecar = serde_json::from_str(sidecar_json)
            .map_err(|e| Error::Format(format!("mask sidecar: {e}")))?;
        let spec = GridSpec::new(meta.m, meta.n, meta.period)
            .map_err(|e| Error::Format(e.to_string()))?;
        let mut tokens = Vec::new();
        for line in pbm.lines() {
            let line = line?;
            let body = line.split('#').next().unwrap_or("");
            tokens.extend(body.split_whitespace().map(str::to_owned));
        }
        let side = spec.n().pow(spec.m() as u32);
        if tokens.len() < 3 || tokens[0] != "P1" {
            return Err(Error::Format("expected a plain PBM (P1) bitmap".into()));
        }
        let dims: Vec<usize> = tokens[1..3]
            .iter()
            .map(|t| t.parse().map_err(|_| Error::Format(format!("bad PBM size {t}"))))
            .collect::<Result<_>>()?;
        if dims != [side, side] {
            return Err(Error::Format(format!(
                "PBM is {}x{}, sidecar implies {side}x{side}",
                dims[0], dims[1]
            )));
        }
        // plain PBM may also pack pixels without separators
        let pixels: Vec<bool> = tokens[3..]
            .iter()
            .flat_map(|t| t.chars())
            .map(|c| match c {
                '0' => Ok(false),
                '1' => Ok(true),
                other => Err(Error::Format(format!("bad PBM pixel {other:?}"))),
            })
            .collect::<Result<_>>()?;
        if pixels.len() != spec.len() {
            return Err(Error::Format(format!(
                "PBM has {} pixels, expected {}",
                pixels.len(),
                spec.len()
            )));
        }
        Self::from_bits(spec, pixels)
    }
}

type Key = [i64; 2 * MAX_BLOCK_DIM];

/// Integer cell coordinates of flat index `idx`.
fn cell_coords(spec: &GridSpec, idx: usize) -> Key {
    let mut multi = [0usize; 2 * MAX_BLOCK_DIM];
    spec.multi_index(idx, &mut multi[..spec.dim()]);
    let mut out = [0i64; 2 * MAX_BLOCK_DIM];
    for (o, &c) in out.iter_mut().zip(&multi[..spec.dim()]) {
        *o = c as i64;
    }
    out
}

fn sheared(shear: Shear, m: usize, c: &Key) -> Key {
    let mut out = *c;
    for k in 0..m {
        match shear {
            Shear::None => {}
            Shear::First => out[k] = c[k] - c[m + k],
            Shear::Second => out[m + k] = c[m + k] - c[k],
        }
    }
    out
}

/// Index of the tube at relative scales `(sa, sb)` holding sheared cell `s`.
fn tube_key(m: usize, s: &Key, sa: u32, sb: u32) -> Key {
    let mut out = [0i64; 2 * MAX_BLOCK_DIM];
    for k in 0..m {
        out[k] = s[k] >> sa;
        out[m + k] = s[m + k] >> sb;
    }
    out
}

fn check_scales(spec: &GridSpec, level: i32, scales: (i32, i32)) -> Result<()> {
    let top = level + spec.n().trailing_zeros() as i32;
    for j in [scales.0, scales.1] {
        if j < level || j > top {
            return Err(Error::UnresolvableScale(format!(
                "scale 2^{j} is outside [2^{level}, 2^{top}] for this window"
            )));
        }
    }
    Ok(())
}

/// All dyadic tubes of scale `j` meeting the window.
pub fn enumerate_scale(j: [i32; 3], window: &GridSpec) -> Result<Vec<DyadicTube>> {
    let level = cell_level(window)?;
    let (kind, scales) = classify_scale(j);
    check_scales(window, level, scales)?;
    let m = window.m();
    let (sa, sb) = ((scales.0 - level) as u32, (scales.1 - level) as u32);
    let mut keys = BTreeSet::new();
    for idx in 0..window.len() {
        let s = sheared(kind.shear(), m, &cell_coords(window, idx));
        keys.insert(tube_key(m, &s, sa, sb));
    }
    Ok(keys
        .into_iter()
        .map(|k| DyadicTube {
            kind,
            scales,
            index: k[..2 * m].to_vec(),
        })
        .collect())
}

/// Flat indices of the window cells belonging to `tube` (by lower corner).
pub fn tube_cells(tube: &DyadicTube, window: &GridSpec) -> Result<Vec<usize>> {
    let level = cell_level(window)?;
    let m = window.m();
    if tube.m() != m {
        return Err(Error::SpecMismatch("tube and window dimensions differ".into()));
    }
    let (sa, sb) = (tube.scales.0 - level, tube.scales.1 - level);
    if sa < 0 || sb < 0 {
        return Err(Error::UnresolvableScale("tube finer than the mask cells".into()));
    }
    let n = window.n() as i64;
    let mut out = Vec::new();
    for idx in 0..window.len() {
        let s = sheared(tube.kind.shear(), m, &cell_coords(window, idx));
        let k = tube_key(m, &s, sa as u32, sb as u32);
        if k[..2 * m] == tube.index[..] {
            out.push(idx);
        }
    }
    debug_assert!(out.iter().all(|&i| (i as i64) < n.pow(2 * m as u32)));
    Ok(out)
}

/// Per-scale counts of the cells of `set` inside each tube of one shear
/// family, for relative scales `0..=top+1` on both intervals.
struct ContainmentTable {
    m: usize,
    top: u32,
    counts: HashMap<(u32, u32), HashMap<Key, u64>>,
}

impl ContainmentTable {
    fn build(mask: &OpenSetMask, shear: Shear) -> Self {
        let spec = mask.spec;
        let m = spec.m();
        let top = spec.n().trailing_zeros();
        let cells: Vec<Key> = (0..spec.len())
            .filter(|&i| mask.bits[i])
            .map(|i| sheared(shear, m, &cell_coords(&spec, i)))
            .collect();
        let mut counts = HashMap::new();
        for sa in 0..=top + 1 {
            for sb in 0..=top + 1 {
                let mut map: HashMap<Key, u64> = HashMap::new();
                for s in &cells {
                    *map.entry(tube_key(m, s, sa, sb)).or_insert(0) += 1;
                }
                counts.insert((sa, sb), map);
            }
        }
        Self { m, top, counts }
    }

    /// Whether every cell of the tube lies in the set.
    fn contains(&self, sa: u32, sb: u32, key: &Key) -> bool {
        if sa > self.top + 1 || sb > self.top + 1 {
            return false;
        }
        let full = 1u64 << (self.m as u32 * (sa + sb));
        self.counts[&(sa, sb)].get(key).copied().unwrap_or(0) == full
    }
}

fn parent(m: usize, key: &Key, axis: Axis) -> Key {
    let mut out = *key;
    let range = match axis {
        Axis::First => 0..m,
        Axis::Second => m..2 * m,
    };
    for k in range {
        out[k] = key[k] >> 1;
    }
    out
}

fn bump_scale(sa: u32, sb: u32, axis: Axis) -> (u32, u32) {
    match axis {
        Axis::First => (sa + 1, sb),
        Axis::Second => (sa, sb + 1),
    }
}

fn to_tube(kind: TubeKind, level: i32, m: usize, sa: u32, sb: u32, key: &Key) -> DyadicTube {
    let scales = (level + sa as i32, level + sb as i32);
    DyadicTube {
        kind: kind.in_family(scales.0, scales.1),
        scales,
        index: key[..2 * m].to_vec(),
    }
}

fn maximal_from_table(
    mask: &OpenSetMask,
    table: &ContainmentTable,
    kind: TubeKind,
    axis: Axis,
) -> Vec<(u32, u32, Key)> {
    let m = table.m;
    let level = mask.level;
    let mut out = Vec::new();
    for sa in 0..=table.top {
        for sb in 0..=table.top {
            if !kind.admits(level + sa as i32, level + sb as i32) {
                continue;
            }
            let mut keys: Vec<&Key> = table.counts[&(sa, sb)]
                .keys()
                .filter(|k| table.contains(sa, sb, k))
                .collect();
            keys.sort();
            for key in keys {
                let (pa, pb) = bump_scale(sa, sb, axis);
                if !table.contains(pa, pb, &parent(m, key, axis)) {
                    out.push((sa, sb, *key));
                }
            }
        }
    }
    out
}

/// Dyadic tubes of type `kind` contained in `omega` and maximal under
/// doubling the interval named by `axis`.
pub fn maximal_tubes(omega: &OpenSetMask, kind: TubeKind, axis: Axis) -> Vec<DyadicTube> {
    let table = ContainmentTable::build(omega, kind.shear());
    let m = omega.spec.m();
    maximal_from_table(omega, &table, kind, axis)
        .into_iter()
        .map(|(sa, sb, key)| to_tube(kind, omega.level, m, sa, sb, &key))
        .collect()
}

/// `Ω̃ = {M_tube(χ_Ω) > 1/2}`, computed on a zero-padded grid of twice the
/// period so that averages do not wrap, with dyadic radii from `h/2` to `L`.
pub fn enlarged_set(omega: &OpenSetMask) -> Result<OpenSetMask> {
    let spec = omega.spec;
    let m = spec.m();
    let n = spec.n();
    let padded = GridSpec::new(m, 2 * n, 2.0 * spec.period())?;
    let mut values = vec![0.0; padded.len()];
    let mut multi = vec![0usize; spec.dim()];
    for idx in 0..spec.len() {
        if omega.bits[idx] {
            spec.multi_index(idx, &mut multi);
            values[padded.flat_index(&multi)] = 1.0;
        }
    }
    let field = SpatialField::from_real(padded, values)?;
    let h = spec.spacing();
    let count = (spec.period() / h).log2().round() as usize + 2;
    let ladder = crate::operators::ScaleGrid::geometric(h / 2.0, 2.0, count)?;
    let maximal = crate::operators::tube_maximal(&field, &ladder)?;
    let big = maximal.field.real_values();
    let bits = (0..spec.len())
        .map(|idx| {
            spec.multi_index(idx, &mut multi);
            big[padded.flat_index(&multi)] > 0.5
        })
        .collect();
    OpenSetMask::from_bits(spec, bits)
}

/// Enlarges the interval of `tube` opposite to `axis` by dyadic doubling
/// while the enlarged tube stays inside `omega_tilde`.
pub fn journe_enlarge_in(tube: &DyadicTube, omega_tilde: &OpenSetMask, axis: Axis) -> Result<DyadicTube> {
    let table = ContainmentTable::build(omega_tilde, tube.kind.shear());
    enlarge_with(tube, omega_tilde, &table, axis)
}

fn enlarge_with(
    tube: &DyadicTube,
    omega_tilde: &OpenSetMask,
    table: &ContainmentTable,
    axis: Axis,
) -> Result<DyadicTube> {
    let m = table.m;
    let level = omega_tilde.level;
    let mut sa = (tube.scales.0 - level) as u32;
    let mut sb = (tube.scales.1 - level) as u32;
    let mut key = [0i64; 2 * MAX_BLOCK_DIM];
    key[..2 * m].copy_from_slice(&tube.index);
    let grow = axis.other();
    loop {
        let (pa, pb) = bump_scale(sa, sb, grow);
        let pk = parent(m, &key, grow);
        if !table.contains(pa, pb, &pk) {
            break;
        }
        sa = pa;
        sb = pb;
        key = pk;
    }
    Ok(to_tube(tube.kind, level, m, sa, sb, &key))
}

/// Journé enlargement of a tube maximal along the second interval: the first
/// interval grows while the tube stays in `{M_tube(χ_Ω) > 1/2}`.
pub fn journe_enlarge(tube: &DyadicTube, omega: &OpenSetMask) -> Result<DyadicTube> {
    let tilde = enlarged_set(omega)?;
    journe_enlarge_in(tube, &tilde, Axis::Second)
}

/// `Σ_R |R| (ℓ/ℓ̂)^κ` over the maximal tubes.
#[derive(Debug, Clone, Serialize)]
pub struct CoveringReport {
    pub kind: TubeKind,
    pub axis: Axis,
    pub kappa: f64,
    pub tubes: usize,
    pub sum: f64,
    pub measure: f64,
    pub ratio: f64,
}

/// Covering sum over `maximal_tubes(omega, kind, axis)`, each tube enlarged
/// along its other interval.
pub fn covering_sum(omega: &OpenSetMask, kind: TubeKind, kappa: f64, axis: Axis) -> Result<CoveringReport> {
    let tilde = enlarged_set(omega)?;
    covering_sum_in(omega, &tilde, kind, &[kappa], axis).map(|mut v| v.remove(0))
}

/// Covering sums for several exponents with a precomputed `Ω̃`.
pub fn covering_sum_in(
    omega: &OpenSetMask,
    omega_tilde: &OpenSetMask,
    kind: TubeKind,
    kappas: &[f64],
    axis: Axis,
) -> Result<Vec<CoveringReport>> {
    if omega.is_empty() {
        return Err(Error::InvalidArgument("covering sum of an empty set".into()));
    }
    if let Some(k) = kappas.iter().find(|k| !(**k > 0.0)) {
        return Err(Error::InvalidArgument(format!("kappa must be positive, got {k}")));
    }
    omega.spec.ensure_same(&omega_tilde.spec)?;
    let tubes = maximal_tubes(omega, kind, axis);
    let table = ContainmentTable::build(omega_tilde, kind.shear());
    let grow = axis.other();
    let mut sums = vec![0.0; kappas.len()];
    for tube in &tubes {
        let big = enlarge_with(tube, omega_tilde, &table, axis)?;
        let steps = match grow {
            Axis::First => big.scales.0 - tube.scales.0,
            Axis::Second => big.scales.1 - tube.scales.1,
        };
        let size = tube.measure();
        for (s, k) in sums.iter_mut().zip(kappas) {
            *s += size * pow2(-steps).powf(*k);
        }
    }
    let measure = omega.measure();
    Ok(kappas
        .iter()
        .zip(sums)
        .map(|(&kappa, sum)| CoveringReport {
            kind,
            axis,
            kappa,
            tubes: tubes.len(),
            sum,
            measure,
            ratio: sum / measure,
        })
        .collect())
}

/// CSV with one row per tube: type, scales, lattice indices.
pub fn write_tubes_csv<W: Write>(tubes: &[DyadicTube], mut w: W) -> Result<()> {
    let m = tubes.first().map(|t| t.m()).unwrap_or(1);
    let mut header = vec!["type".to_string(), "j1".into(), "j2".into()];
    header.extend((1..=m).map(|k| format!("a{k}")));
    header.extend((1..=m).map(|k| format!("b{k}")));
    writeln!(w, "{}", header.join(","))?;
    for t in tubes {
        let mut row = vec![t.kind.name().to_string(), t.scales.0.to_string(), t.scales.1.to_string()];
        row.extend(t.index.iter().map(|i| i.to_string()));
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}
