//! Tube maximal function, non-tangential maximal function, twisted area
//! functions and the empirical inequality checks built on them.
//!
//! Cone integrals are Riemann sums over a geometric scale ladder with
//! weight `Δlog` per active block. Tube averages use unit-mass rasterized
//! stencils, so every average of a constant is that constant.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::LN_10;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::Regime;
use crate::grid::{
    forward_transform, inverse_transform, inverse_transform_pair, level_set_measure,
    llogl_functional, lp_norm, FrequencyField, GridSpec, SpatialField,
};
use crate::kernels::{apply_factor, gradient_sq_spectral, multiplier_factor, poisson_kernel_1d, Block};
use crate::numerics::unit_ball_volume;
use crate::spectral::Lattice;
use crate::stencil::{stencil_average, stencil_max, Stencil};

/// Ladders coarser than this many points per decade trigger a warning.
pub const MIN_POINTS_PER_DECADE: f64 = 4.0;

/// Geometric ladder `r_min ρ^k`, `k = 0..count`, shared by every block.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScaleGrid {
    radii: Vec<f64>,
    ratio: f64,
}

impl ScaleGrid {
    /// `points_per_decade` points per factor of ten over `decades` decades,
    /// both ends included.
    pub fn new(r_min: f64, decades: f64, points_per_decade: usize) -> Result<Self> {
        if points_per_decade == 0 || !(decades >= 0.0 && decades.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "ladder needs decades >= 0 and at least one point per decade, got {decades}, {points_per_decade}"
            )));
        }
        let count = (decades * points_per_decade as f64).round() as usize + 1;
        Self::geometric(r_min, 10f64.powf(1.0 / points_per_decade as f64), count)
    }

    pub fn geometric(r_min: f64, ratio: f64, count: usize) -> Result<Self> {
        if !(r_min > 0.0 && r_min.is_finite()) {
            return Err(Error::InvalidArgument(format!("r_min must be positive, got {r_min}")));
        }
        if !(ratio > 1.0 && ratio.is_finite()) {
            return Err(Error::InvalidArgument(format!("ladder ratio must exceed 1, got {ratio}")));
        }
        if count == 0 {
            return Err(Error::InvalidArgument("empty scale ladder".into()));
        }
        let radii = (0..count).map(|k| r_min * ratio.powi(k as i32)).collect();
        Ok(Self { radii, ratio })
    }

    /// Dyadic ladder from `h/2` up to the first radius reaching `L`.
    pub fn dyadic(spec: &GridSpec) -> ScaleGrid {
        let count = spec.n().trailing_zeros() as usize + 2;
        Self::geometric(spec.spacing() / 2.0, 2.0, count).expect("valid dyadic ladder")
    }

    pub fn radii(&self) -> &[f64] {
        &self.radii
    }

    pub fn len(&self) -> usize {
        self.radii.len()
    }

    pub fn is_empty(&self) -> bool {
        self.radii.is_empty()
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    /// `ln ρ`, the quadrature weight of `dr/r`.
    pub fn delta_log(&self) -> f64 {
        self.ratio.ln()
    }

    pub fn points_per_decade(&self) -> f64 {
        LN_10 / self.ratio.ln()
    }

    /// Same span with twice the density.
    pub fn densified(&self) -> ScaleGrid {
        Self::geometric(self.radii[0], self.ratio.sqrt(), 2 * self.len() - 1).expect("valid ladder")
    }
}

/// Cone `Γ^β` over the active blocks; inactive blocks sit at radius 0.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConeSpec {
    beta: f64,
    scales: ScaleGrid,
    blocks: Vec<Block>,
}

impl ConeSpec {
    pub fn new(beta: f64, scales: ScaleGrid, blocks: &[Block]) -> Result<Self> {
        if !(beta >= 1.0 && beta.is_finite()) {
            return Err(Error::InvalidArgument(format!("aperture must be >= 1, got {beta}")));
        }
        let mut blocks = blocks.to_vec();
        blocks.sort();
        blocks.dedup();
        if blocks.is_empty() {
            return Err(Error::InvalidArgument("cone needs at least one active block".into()));
        }
        Ok(Self { beta, scales, blocks })
    }

    /// All three blocks active.
    pub fn full(beta: f64, scales: ScaleGrid) -> Result<Self> {
        Self::new(beta, scales, &Block::ALL)
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn scales(&self) -> &ScaleGrid {
        &self.scales
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn is_full(&self) -> bool {
        self.blocks.len() == 3
    }

    /// Every radius triple of the cone's ladder.
    pub fn triples(&self) -> Vec<[f64; 3]> {
        ladder_triples(&self.scales, &self.blocks)
    }
}

fn ladder_triples(scales: &ScaleGrid, blocks: &[Block]) -> Vec<[f64; 3]> {
    let mut out = vec![[0.0; 3]];
    for b in blocks {
        out = out
            .into_iter()
            .flat_map(|t| {
                scales.radii().iter().map(move |&r| {
                    let mut t = t;
                    t[b.index()] = r;
                    t
                })
            })
            .collect();
    }
    out
}

/// A nonnegative operator output with its provenance.
#[derive(Debug, Clone)]
pub struct OperatorOutput {
    pub field: SpatialField,
    pub operator: &'static str,
    pub cone: Option<ConeSpec>,
    pub warnings: Vec<String>,
}

fn ladder_warnings(scales: &ScaleGrid) -> Vec<String> {
    let ppd = scales.points_per_decade();
    if ppd < MIN_POINTS_PER_DECADE {
        vec![format!(
            "scale ladder has {ppd:.2} points per decade; quadrature needs at least {MIN_POINTS_PER_DECADE}"
        )]
    } else {
        Vec::new()
    }
}

fn pointwise_max(mut a: Vec<f64>, b: Vec<f64>) -> Vec<f64> {
    for (x, y) in a.iter_mut().zip(b) {
        *x = x.max(y);
    }
    a
}

fn max_over_stencils<F>(len: usize, stencils: &[Stencil], per: F) -> Vec<f64>
where
    F: Fn(&Stencil) -> Vec<f64> + Sync + Send,
{
    stencils
        .par_iter()
        .map(per)
        .reduce(|| vec![f64::NEG_INFINITY; len], pointwise_max)
}

/// `M_tube f`: pointwise maximum over the ladder triples of the tube
/// averages of `|f|`.
pub fn tube_maximal(f: &SpatialField, scales: &ScaleGrid) -> Result<OperatorOutput> {
    tube_maximal_restricted(f, scales, &Regime::ALL)
}

/// `M_tube` with the supremum restricted to tubes of the given shapes.
pub fn tube_maximal_restricted(
    f: &SpatialField,
    scales: &ScaleGrid,
    regimes: &[Regime],
) -> Result<OperatorOutput> {
    if scales.is_empty() {
        return Err(Error::InvalidArgument("empty scale ladder".into()));
    }
    let spec = *f.spec();
    let stencils: Vec<Stencil> = ladder_triples(scales, &Block::ALL)
        .into_iter()
        .map(|r| Stencil::for_tube(&spec, r, 1.0))
        .filter(|s| regimes.contains(&s.regime))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if stencils.is_empty() {
        return Err(Error::InvalidArgument(
            "no ladder triple has one of the requested shapes".into(),
        ));
    }
    let data = f.abs_values();
    let out = max_over_stencils(spec.len(), &stencils, |s| stencil_average(&spec, &data, s));
    Ok(OperatorOutput {
        field: SpatialField::from_real(spec, out)?,
        operator: "tube_maximal",
        cone: None,
        warnings: Vec::new(),
    })
}

/// `|U_f(·, r)|` for each triple, pairing real inverse transforms.
fn abs_extensions(lat: &Lattice, fh: &[Complex64], real: bool, radii: &[[f64; 3]]) -> Vec<Vec<f64>> {
    let spec = &lat.spec;
    let spectrum = |r: &[f64; 3]| -> Vec<Complex64> {
        let factor = multiplier_factor(lat, r);
        fh.iter().zip(&factor).map(|(a, b)| a * b).collect()
    };
    if real {
        let pairs: Vec<Vec<Vec<f64>>> = radii
            .par_chunks(2)
            .map(|pair| {
                let first = spectrum(&pair[0]);
                let second = pair.get(1).map(spectrum);
                let (u, v) = inverse_transform_pair(spec, &first, second.as_deref());
                std::iter::once(u)
                    .chain(v)
                    .map(|x| x.into_iter().map(f64::abs).collect())
                    .collect()
            })
            .collect();
        pairs.into_iter().flatten().collect()
    } else {
        radii
            .par_iter()
            .map(|r| {
                let freq = FrequencyField::from_coeffs(*spec, spectrum(r)).expect("matching lengths");
                inverse_transform(&freq, false).abs_values()
            })
            .collect()
    }
}

const BATCH: usize = 16;

/// `U_f^*(x) = max |U_f(y, r)|` over ladder triples and `y ∈ T(x, βr)`.
pub fn nontangential_max(f: &SpatialField, cone: &ConeSpec) -> Result<OperatorOutput> {
    let spec = *f.spec();
    let lat = Lattice::get(&spec);
    let fh = forward_transform(f);
    let triples = cone.triples();
    let mut acc = vec![f64::NEG_INFINITY; spec.len()];
    for batch in triples.chunks(BATCH) {
        let fields = abs_extensions(&lat, fh.coeffs(), f.is_real(), batch);
        let maxed = batch
            .par_iter()
            .zip(fields.par_iter())
            .map(|(r, u)| stencil_max(&spec, u, &Stencil::for_tube(&spec, *r, cone.beta)))
            .reduce(|| vec![f64::NEG_INFINITY; spec.len()], pointwise_max);
        acc = pointwise_max(acc, maxed);
    }
    Ok(OperatorOutput {
        field: SpatialField::from_real(spec, acc)?,
        operator: "nontangential_max",
        cone: Some(cone.clone()),
        warnings: Vec::new(),
    })
}

fn cone_weight(scales: &ScaleGrid, r: &[f64; 3], blocks: &[Block]) -> f64 {
    let dl = scales.delta_log();
    blocks.iter().map(|b| dl * r[b.index()] * r[b.index()]).product()
}

fn area_impl(f: &SpatialField, cone: &ConeSpec, operator: &'static str) -> Result<OperatorOutput> {
    let spec = *f.spec();
    let lat = Lattice::get(&spec);
    let fh = forward_transform(f);
    let blocks = cone.blocks();
    let mut groups: BTreeMap<Stencil, Vec<[f64; 3]>> = BTreeMap::new();
    for r in cone.triples() {
        groups
            .entry(Stencil::for_tube(&spec, r, cone.beta))
            .or_default()
            .push(r);
    }
    let groups: Vec<(Stencil, Vec<[f64; 3]>)> = groups.into_iter().collect();
    let mut acc = vec![0.0; spec.len()];
    // fixed summation order keeps the output independent of the thread count
    for chunk in groups.chunks(BATCH) {
        let parts: Vec<Vec<f64>> = chunk
            .par_iter()
            .map(|(stencil, triples)| {
                let mut sum = vec![0.0; spec.len()];
                for r in triples {
                    let w = cone_weight(&cone.scales, r, blocks);
                    let g = gradient_sq_spectral(&lat, fh.coeffs(), f.is_real(), r, blocks);
                    for (s, x) in sum.iter_mut().zip(g) {
                        *s += w * x;
                    }
                }
                stencil_average(&spec, &sum, stencil)
            })
            .collect();
        for part in parts {
            for (a, x) in acc.iter_mut().zip(part) {
                *a += x;
            }
        }
    }
    let values = acc.into_iter().map(|s| s.max(0.0).sqrt()).collect();
    Ok(OperatorOutput {
        field: SpatialField::from_real(spec, values)?,
        operator,
        cone: Some(cone.clone()),
        warnings: ladder_warnings(&cone.scales),
    })
}

/// `S_twist f`: the cone integral of `|r1∇1 r2∇2 r3∇3 U_f|^2` over
/// `T(x, βr)` with the normalized tube indicator, square-rooted.
pub fn area_function(f: &SpatialField, cone: &ConeSpec) -> Result<OperatorOutput> {
    if !cone.is_full() {
        return Err(Error::InvalidArgument(
            "area_function needs all three blocks; use partial_area".into(),
        ));
    }
    area_impl(f, cone, "area_function")
}

/// `S^{(J)} f` for a proper nonempty block subset `J`, with the other
/// blocks at the boundary.
pub fn partial_area(f: &SpatialField, cone: &ConeSpec) -> Result<OperatorOutput> {
    if cone.is_full() {
        return Err(Error::InvalidArgument(
            "partial_area needs a proper block subset; use area_function".into(),
        ));
    }
    area_impl(f, cone, "partial_area")
}

/// Exact `‖S^{(J)} f‖_2^2` for the ladder quadrature. Tube averaging
/// preserves integrals, so by Parseval the square-function norm factors
/// into `Σ |f̂|^2 Π_j Δlog Σ_k 2 a_j^2 r_k^2 e^{-2 r_k a_j}` over `j ∈ J`.
/// Agrees with the pointwise route for fields without Nyquist content.
pub fn area_norm_sq(f: &SpatialField, blocks: &[Block], scales: &ScaleGrid) -> Result<f64> {
    let mut blocks = blocks.to_vec();
    blocks.sort();
    blocks.dedup();
    if blocks.is_empty() {
        return Err(Error::InvalidArgument("block set must be nonempty".into()));
    }
    let spec = f.spec();
    let lat = Lattice::get(spec);
    let fh = forward_transform(f);
    let dl = scales.delta_log();
    let profile = |a: f64| -> f64 {
        dl * scales
            .radii()
            .iter()
            .map(|&r| 2.0 * (a * r).powi(2) * (-2.0 * r * a).exp())
            .sum::<f64>()
    };
    let sum: f64 = lat
        .reps
        .iter()
        .zip(fh.coeffs())
        .map(|(rep, c)| {
            let factor: f64 = blocks.iter().map(|b| profile(rep.a[b.index()])).product();
            c.norm_sqr() * factor
        })
        .sum();
    Ok(sum / spec.total_measure())
}

/// `‖S^{(J)} f‖_2^2 / ‖f‖_2^2` via [`area_norm_sq`].
pub fn area_constant(f: &SpatialField, blocks: &[Block], scales: &ScaleGrid) -> Result<f64> {
    let norm = lp_norm(f, 2.0)?;
    if norm == 0.0 {
        return Err(Error::InvalidArgument("zero field has no area constant".into()));
    }
    Ok(area_norm_sq(f, blocks, scales)? / (norm * norm))
}

/// `max_x U*(x) / M(x)` over points where the maximal function is not
/// negligible.
pub fn domination_ratio(u_star: &SpatialField, maximal: &SpatialField) -> Result<f64> {
    u_star.spec().ensure_same(maximal.spec())?;
    let floor = 1e-12 * maximal.sup_abs().max(u_star.sup_abs());
    Ok(u_star
        .real_values()
        .iter()
        .zip(maximal.real_values())
        .filter(|(u, m)| **u > floor || *m > floor)
        .map(|(u, m)| u / m)
        .fold(0.0, f64::max))
}

/// `C_0` for one field: `max U_f^* / M_tube f` with `U^*` over the cone and
/// `M_tube` over `maximal_scales`.
pub fn domination_constant(f: &SpatialField, cone: &ConeSpec, maximal_scales: &ScaleGrid) -> Result<f64> {
    let u = nontangential_max(f, cone)?;
    let m = tube_maximal(f, maximal_scales)?;
    domination_ratio(&u.field, &m.field)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GoodLambdaRow {
    pub lambda: f64,
    pub lhs: f64,
    pub term1: f64,
    pub term2: f64,
    pub c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GoodLambdaReport {
    pub rows: Vec<GoodLambdaRow>,
    pub max_c: f64,
}

fn check_lambdas(lambdas: &[f64]) -> Result<()> {
    if lambdas.is_empty() {
        return Err(Error::InvalidArgument("empty lambda grid".into()));
    }
    if let Some(l) = lambdas.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {l}")));
    }
    if lambdas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidArgument("lambda grid must be increasing".into()));
    }
    Ok(())
}

/// Good-λ rows from precomputed `S_twist f` and `U_f^*`.
pub fn good_lambda_rows(s: &SpatialField, u_star: &SpatialField, lambdas: &[f64]) -> Result<GoodLambdaReport> {
    check_lambdas(lambdas)?;
    s.spec().ensure_same(u_star.spec())?;
    let cell = s.spec().cell_measure();
    let sv = s.abs_values();
    let uv = u_star.abs_values();
    let rows: Vec<GoodLambdaRow> = lambdas
        .iter()
        .map(|&lambda| {
            let lhs = level_set_measure(&sv, cell, lambda);
            let term1 = level_set_measure(&uv, cell, lambda);
            let low: f64 = uv.iter().filter(|&&u| u <= lambda).map(|u| u * u).sum();
            let term2 = low * cell / (lambda * lambda);
            let denom = term1 + term2;
            let c = if lhs == 0.0 { 0.0 } else { lhs / denom };
            GoodLambdaRow { lambda, lhs, term1, term2, c }
        })
        .collect();
    let max_c = rows.iter().map(|r| r.c).fold(0.0, f64::max);
    Ok(GoodLambdaReport { rows, max_c })
}

/// Good-λ sweep: `S_twist` on the aperture-1 cone against `U^*` on the
/// aperture-`β` cone.
pub fn good_lambda_sweep(
    f: &SpatialField,
    beta: f64,
    lambdas: &[f64],
    scales: &ScaleGrid,
) -> Result<GoodLambdaReport> {
    if !(beta > 1.0) {
        return Err(Error::InvalidArgument(format!("good-lambda needs beta > 1, got {beta}")));
    }
    check_lambdas(lambdas)?;
    let s = area_function(f, &ConeSpec::full(1.0, scales.clone())?)?;
    let u = nontangential_max(f, &ConeSpec::full(beta, scales.clone())?)?;
    good_lambda_rows(&s.field, &u.field, lambdas)
}

/// Threshold on `U_g` inside the tents.
pub const SEPARATION_THRESHOLD: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeparationReport {
    pub lambda: f64,
    pub beta: f64,
    /// Domination constant supplied by the caller.
    pub c0: f64,
    /// Domination constant measured for `χ_{E^c}`.
    pub c0_complement: f64,
    /// Measure of the good set `E = {U_f^* ≤ λ}`.
    pub good_measure: f64,
    /// Lattice points `(y, r)` in `W_β`.
    pub tent_points: usize,
    pub inner_min: f64,
    pub inner_violations: usize,
    /// Lattice points off `W̃_β`.
    pub exterior_points: usize,
    /// `max U_g` off `W̃_β`.
    pub c1: f64,
    pub outer_violations: usize,
}

/// Separation of `U_g`, `g = χ_E`, between the tent over
/// `A = {M_tube χ_{E^c} ≤ 1/(10 C_0)}` and the exterior of the tent over
/// `E`. The threshold uses the larger of `c0` and the constant measured for
/// `χ_{E^c}` itself.
pub fn separation_check(
    f: &SpatialField,
    lambda: f64,
    beta: f64,
    c0: f64,
    scales: &ScaleGrid,
) -> Result<SeparationReport> {
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument(format!("lambda must be positive, got {lambda}")));
    }
    if !(c0 > 0.0) {
        return Err(Error::InvalidArgument(format!("c0 must be positive, got {c0}")));
    }
    let spec = *f.spec();
    let cone = ConeSpec::full(beta, scales.clone())?;
    let u_star = nontangential_max(f, &cone)?.field.real_values();
    let good: Vec<bool> = u_star.iter().map(|&u| u <= lambda).collect();
    let good_count = good.iter().filter(|&&b| b).count();
    if good_count == 0 {
        return Err(Error::Precondition(format!("good set {{U* <= {lambda}}} is empty")));
    }
    let indicator = |set: &[bool], value: bool| -> SpatialField {
        SpatialField::from_real(spec, set.iter().map(|&b| (b == value) as u8 as f64).collect())
            .expect("grid-sized")
    };
    let g = indicator(&good, true);
    let h = indicator(&good, false);
    let m_h = tube_maximal(&h, &ScaleGrid::dyadic(&spec))?.field;
    let c0_complement = domination_ratio(&nontangential_max(&h, &cone)?.field, &m_h)?;
    let c0_eff = c0.max(c0_complement);
    let a_set: Vec<f64> = m_h
        .real_values()
        .iter()
        .map(|&m| (m <= 1.0 / (10.0 * c0_eff)) as u8 as f64)
        .collect();
    let e_set = g.real_values();
    let lat = Lattice::get(&spec);
    let gh = forward_transform(&g);
    let triples = cone.triples();
    let mut report = SeparationReport {
        lambda,
        beta,
        c0,
        c0_complement,
        good_measure: good_count as f64 * spec.cell_measure(),
        tent_points: 0,
        inner_min: f64::INFINITY,
        inner_violations: 0,
        exterior_points: 0,
        c1: 0.0,
        outer_violations: 0,
    };
    // U_g >= 0 and every value is checked, so abs_extensions is exact here
    for batch in triples.chunks(BATCH) {
        let fields = abs_extensions(&lat, gh.coeffs(), true, batch);
        let parts: Vec<(usize, f64, usize, usize, f64, usize)> = batch
            .par_iter()
            .zip(fields.par_iter())
            .map(|(r, ug)| {
                let stencil = Stencil::for_tube(&spec, *r, beta);
                let tent = stencil_max(&spec, &a_set, &stencil);
                let wide = stencil_max(&spec, &e_set, &stencil);
                let mut p = (0, f64::INFINITY, 0, 0, 0.0f64, 0);
                for i in 0..spec.len() {
                    if tent[i] > 0.5 {
                        p.0 += 1;
                        p.1 = p.1.min(ug[i]);
                        if ug[i] <= SEPARATION_THRESHOLD {
                            p.2 += 1;
                        }
                    }
                    if wide[i] < 0.5 {
                        p.3 += 1;
                        p.4 = p.4.max(ug[i]);
                        if ug[i] >= SEPARATION_THRESHOLD {
                            p.5 += 1;
                        }
                    }
                }
                p
            })
            .collect();
        for p in parts {
            report.tent_points += p.0;
            report.inner_min = report.inner_min.min(p.1);
            report.inner_violations += p.2;
            report.exterior_points += p.3;
            report.c1 = report.c1.max(p.4);
            report.outer_violations += p.5;
        }
    }
    Ok(report)
}

/// `Poi_a(v)` over the dyadic majorant `Σ_ν 2^{-ν} χ_{B(0, 2^ν a)}(v) / |B(0, 2^ν a)|`.
pub fn dyadic_domination_ratio(m: usize, a: f64, v: &[f64]) -> Result<f64> {
    let poi = poisson_kernel_1d(m, a, v)?;
    let dist = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut nu0 = 0i32;
    while 2f64.powi(nu0) * a <= dist {
        nu0 += 1;
    }
    let tail = 1.0 - 2f64.powi(-(m as i32 + 1));
    let majorant = 2f64.powi(-nu0 * (m as i32 + 1)) / (tail * unit_ball_volume(m) * a.powi(m as i32));
    Ok(poi / majorant)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DominationReport {
    pub m: usize,
    pub samples: usize,
    pub max_ratio: f64,
    /// `|v|/a` where the maximum occurs.
    pub argmax: f64,
    pub ratio_at_zero: f64,
}

/// Sweeps `|v|/a` over `{0} ∪ [2^-8, 2^16]` (log-spaced).
pub fn dyadic_domination_check(m: usize, a: f64, samples: usize) -> Result<DominationReport> {
    if !(a > 0.0) {
        return Err(Error::InvalidArgument(format!("a must be positive, got {a}")));
    }
    if samples < 2 {
        return Err(Error::InvalidArgument("need at least two samples".into()));
    }
    let point = |t: f64| {
        let mut v = vec![0.0; m];
        v[0] = t * a;
        v
    };
    let ratio_at_zero = dyadic_domination_ratio(m, a, &point(0.0))?;
    let mut report = DominationReport {
        m,
        samples,
        max_ratio: ratio_at_zero,
        argmax: 0.0,
        ratio_at_zero,
    };
    for k in 0..samples - 1 {
        let t = 2f64.powf(-8.0 + 24.0 * k as f64 / (samples - 2).max(1) as f64);
        let ratio = dyadic_domination_ratio(m, a, &point(t))?;
        if ratio > report.max_ratio {
            report.max_ratio = ratio;
            report.argmax = t;
        }
    }
    Ok(report)
}

/// Operators whose `L^p` ratios can be measured.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum LpOperator {
    TubeMaximal,
    Nontangential { beta: f64 },
}

/// `‖op f‖_p / ‖f‖_p` for each suite member (zero fields skipped).
pub fn lp_ratios(op: LpOperator, p: f64, suite: &[SpatialField], scales: &ScaleGrid) -> Result<Vec<f64>> {
    if !(p > 1.0) {
        return Err(Error::InvalidArgument(format!("p must exceed 1, got {p}")));
    }
    let mut out = Vec::new();
    for f in suite {
        let norm = lp_norm(f, p)?;
        if norm == 0.0 {
            continue;
        }
        let image = match op {
            LpOperator::TubeMaximal => tube_maximal(f, scales)?,
            LpOperator::Nontangential { beta } => nontangential_max(f, &ConeSpec::full(beta, scales.clone())?)?,
        };
        out.push(lp_norm(&image.field, p)? / norm);
    }
    Ok(out)
}

/// Largest `L^p` ratio over the suite: an empirical lower bound on the
/// operator norm.
pub fn lp_operator_norm(op: LpOperator, p: f64, suite: &[SpatialField], scales: &ScaleGrid) -> Result<f64> {
    let ratios = lp_ratios(op, p, suite, scales)?;
    if ratios.is_empty() {
        return Err(Error::InvalidArgument("suite has no nonzero field".into()));
    }
    Ok(ratios.into_iter().fold(0.0, f64::max))
}

/// Multiplier of the discretized reproducing formula:
/// `64 Π_j Δlog Σ_k (r_k a_j)^2 e^{-2 r_k a_j}`.
fn reproducing_factor(lat: &Lattice, scales: &ScaleGrid) -> Vec<Complex64> {
    let dl = scales.delta_log();
    let block = |a: f64| -> f64 {
        dl * scales
            .radii()
            .iter()
            .map(|&r| (r * a).powi(2) * (-2.0 * r * a).exp())
            .sum::<f64>()
    };
    lat.real_factor(|_, rep| 64.0 * rep.a.iter().map(|&a| block(a)).product::<f64>())
        .into_iter()
        .map(|x| Complex64::new(x, 0.0))
        .collect()
}

/// `64 Σ_r Δlog^3 f * Q_r * Q_r` with `Q̂_r = Π_j r_j a_j e^{-r_j a_j}`.
/// The ladder sum factors per block and is evaluated in closed form.
pub fn reproduce(f: &SpatialField, scales: &ScaleGrid) -> SpatialField {
    let spec = f.spec();
    let lat = Lattice::get(spec);
    let fh = forward_transform(f);
    apply_factor(spec, fh.coeffs(), &reproducing_factor(&lat, scales), f.is_real())
}

/// Fraction of `‖f‖_2^2` carried by `{ξ1 = 0} ∪ {ξ2 = 0} ∪ {ξ1 + ξ2 = 0}`.
pub fn degenerate_mass(f: &SpatialField) -> f64 {
    let lat = Lattice::get(f.spec());
    let fh = forward_transform(f);
    let (mut bad, mut total) = (0.0, 0.0);
    for (rep, c) in lat.reps.iter().zip(fh.coeffs()) {
        let w = c.norm_sqr();
        total += w;
        if rep.a.iter().any(|&a| a == 0.0) {
            bad += w;
        }
    }
    if total == 0.0 {
        0.0
    } else {
        bad / total
    }
}

/// Relative mass on the degenerate set above which reconstruction refuses.
pub const DEGENERATE_TOLERANCE: f64 = 1e-20;

/// `‖reproduce(f) - f‖_2 / ‖f‖_2`.
pub fn reproducing_residual(f: &SpatialField, scales: &ScaleGrid) -> Result<f64> {
    let norm = lp_norm(f, 2.0)?;
    if norm == 0.0 {
        return Err(Error::InvalidArgument("zero field".into()));
    }
    let bad = degenerate_mass(f);
    if bad > DEGENERATE_TOLERANCE {
        return Err(Error::Precondition(format!(
            "field carries {bad:.3e} of its energy on the degenerate frequency set"
        )));
    }
    let diff = reproduce(f, scales).sub(f)?;
    Ok(lp_norm(&diff, 2.0)? / norm)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LloglRow {
    pub lambda: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LloglReport {
    pub rows: Vec<LloglRow>,
    pub max_ratio: f64,
}

/// `|{S > λ}|` against `∫ |f|/λ log(e + |f|/λ)` per λ, from a precomputed
/// area function.
pub fn llogl_rows(s: &SpatialField, f: &SpatialField, lambdas: &[f64]) -> Result<LloglReport> {
    check_lambdas(lambdas)?;
    s.spec().ensure_same(f.spec())?;
    let sv = s.abs_values();
    let cell = s.spec().cell_measure();
    let rows = lambdas
        .iter()
        .map(|&lambda| {
            let lhs = level_set_measure(&sv, cell, lambda);
            let rhs = llogl_functional(f, lambda)?;
            let ratio = if lhs == 0.0 { 0.0 } else { lhs / rhs };
            Ok(LloglRow { lambda, lhs, rhs, ratio })
        })
        .collect::<Result<Vec<_>>>()?;
    let max_ratio = rows.iter().map(|r| r.ratio).fold(0.0, f64::max);
    Ok(LloglReport { rows, max_ratio })
}

pub fn llogl_endpoint_sweep(f: &SpatialField, lambdas: &[f64], scales: &ScaleGrid) -> Result<LloglReport> {
    check_lambdas(lambdas)?;
    let s = area_function(f, &ConeSpec::full(1.0, scales.clone())?)?;
    llogl_rows(&s.field, f, lambdas)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{tube_contains, TubeSpec};
    use crate::grid::make_grid;
    use crate::kernels::{extend, ScaleTriple};
    use std::f64::consts::PI;

    fn bump(spec: GridSpec, c: [f64; 2], w: f64) -> SpatialField {
        SpatialField::from_fn(spec, |x| {
            let d2 = (x[0] - c[0]).powi(2) + (x[1] - c[1]).powi(2);
            (-d2 / (w * w)).exp()
        })
    }

    fn mode(spec: GridSpec, k1: f64, k2: f64) -> SpatialField {
        let step = spec.frequency_step();
        SpatialField::from_fn(spec, |x| (step * (k1 * x[0] + k2 * x[1])).cos())
    }

    #[test]
    fn ladders() {
        let s = ScaleGrid::new(0.01, 2.0, 4).unwrap();
        assert_eq!(s.len(), 9);
        assert!((s.radii()[8] - 1.0).abs() < 1e-12);
        assert!((s.points_per_decade() - 4.0).abs() < 1e-12);
        assert_eq!(s.densified().len(), 17);
        assert!((s.densified().radii()[16] - 1.0).abs() < 1e-12);
        assert!(ScaleGrid::new(0.0, 2.0, 4).is_err());
        assert!(ScaleGrid::geometric(1.0, 1.0, 3).is_err());
        let d = ScaleGrid::dyadic(&make_grid(1, 16, 4.0).unwrap());
        assert_eq!(d.radii()[0], 0.125);
        assert!(*d.radii().last().unwrap() >= 4.0);
    }

    #[test]
    fn cones_validate() {
        let s = ScaleGrid::new(0.1, 1.0, 2).unwrap();
        assert!(ConeSpec::full(0.5, s.clone()).is_err());
        assert!(ConeSpec::new(1.0, s.clone(), &[]).is_err());
        let c = ConeSpec::new(2.0, s, &[Block::Three, Block::One]).unwrap();
        assert_eq!(c.triples().len(), 9);
        assert!(c.triples().iter().all(|t| t[1] == 0.0));
    }

    #[test]
    fn maximal_of_constant() {
        let spec = make_grid(1, 32, 8.0).unwrap();
        let f = SpatialField::constant(spec, 2.5);
        let scales = ScaleGrid::new(0.1, 1.5, 2).unwrap();
        let m = tube_maximal(&f, &scales).unwrap();
        assert!(m.field.real_values().iter().all(|v| (v - 2.5).abs() < 1e-12));
        let u = nontangential_max(&f, &ConeSpec::full(2.0, scales).unwrap()).unwrap();
        assert!(u.field.real_values().iter().all(|v| (v - 2.5).abs() < 1e-12));
    }

    /// Average of `|f|` over `T(x, r)` by direct membership tests on the
    /// minimal-image displacement.
    fn brute_average(f: &SpatialField, x: usize, r: [f64; 3]) -> f64 {
        let spec = f.spec();
        let l = spec.period();
        let cx = spec.coordinates(x);
        let tube = TubeSpec::new(vec![0.0, 0.0], r).unwrap();
        let vals = f.abs_values();
        let (mut sum, mut count) = (0.0, 0usize);
        for y in 0..spec.len() {
            let cy = spec.coordinates(y);
            let d: Vec<f64> = (0..2)
                .map(|k| {
                    let mut v = cy[k] - cx[k];
                    v -= l * (v / l).round();
                    v
                })
                .collect();
            if tube_contains(&tube, &d) {
                sum += vals[y];
                count += 1;
            }
        }
        sum / count as f64
    }

    #[test]
    fn maximal_matches_direct_averaging() {
        let spec = make_grid(1, 64, 16.0).unwrap();
        let f = SpatialField::from_fn(spec, |x| {
            ((x[0] >= 6.0 && x[0] < 8.0 && x[1] >= 6.0 && x[1] < 8.0) as u8) as f64
        });
        let scales = ScaleGrid::geometric(0.3, 2.5, 3).unwrap();
        let triples = ladder_triples(&scales, &Block::ALL);
        assert_eq!(triples.len(), 27);
        let m = tube_maximal(&f, &scales).unwrap().field.real_values();
        for x in (0..spec.len()).step_by(97) {
            let expect = triples
                .iter()
                .map(|r| brute_average(&f, x, *r))
                .fold(0.0, f64::max);
            assert!((m[x] - expect).abs() < 1e-12, "{x}: {} vs {expect}", m[x]);
        }
        let center = spec.flat_index(&[28, 28]);
        assert!(m[center] >= 1.0 - 1e-12);
    }

    #[test]
    fn restricted_maximal_is_dominated() {
        let spec = make_grid(1, 32, 8.0).unwrap();
        let f = bump(spec, [3.0, 5.0], 0.7);
        let scales = ScaleGrid::new(0.2, 1.0, 3).unwrap();
        let full = tube_maximal(&f, &scales).unwrap().field.real_values();
        let para = tube_maximal_restricted(&f, &scales, &[Regime::ParaFirst]).unwrap();
        assert!(para.field.real_values().iter().zip(&full).all(|(a, b)| a <= &(b + 1e-15)));
        let fine = ScaleGrid::geometric(0.1, 2.0, 3).unwrap();
        let m = tube_maximal(&f, &fine).unwrap().field.real_values();
        assert!(m.iter().zip(f.abs_values()).all(|(a, b)| *a >= b - 1e-15));
    }

    #[test]
    fn nontangential_monotone_in_aperture() {
        let spec = make_grid(1, 32, 8.0).unwrap();
        let f = bump(spec, [4.0, 2.0], 0.8);
        let scales = ScaleGrid::new(0.2, 1.0, 2).unwrap();
        let narrow = nontangential_max(&f, &ConeSpec::full(1.0, scales.clone()).unwrap()).unwrap();
        let wide = nontangential_max(&f, &ConeSpec::full(2.0, scales.clone()).unwrap()).unwrap();
        let (a, b) = (narrow.field.real_values(), wide.field.real_values());
        assert!(a.iter().zip(&b).all(|(x, y)| x <= y));
        for &r in scales.radii() {
            let u = extend(&f, &ScaleTriple::new(r, r, r).unwrap()).into_field().abs_values();
            assert!(u.iter().zip(&a).all(|(x, y)| *x <= y + 1e-14));
        }
        let scaled = nontangential_max(&f.scaled(-3.0), &ConeSpec::full(1.0, scales).unwrap()).unwrap();
        assert!(scaled.field.real_values().iter().zip(&a).all(|(x, y)| (x - 3.0 * y).abs() < 1e-12));
    }

    #[test]
    fn area_of_constant_vanishes() {
        let spec = make_grid(1, 16, 8.0).unwrap();
        let f = SpatialField::constant(spec, 1.0);
        let scales = ScaleGrid::new(0.1, 1.0, 4).unwrap();
        let s = area_function(&f, &ConeSpec::full(1.0, scales.clone()).unwrap()).unwrap();
        assert!(s.field.sup_abs() < 1e-12);
        let cone3 = ConeSpec::new(1.0, scales.clone(), &[Block::Three]).unwrap();
        assert!(partial_area(&f, &cone3).unwrap().field.sup_abs() < 1e-12);
        assert!(partial_area(&f, &ConeSpec::full(1.0, scales.clone()).unwrap()).is_err());
        assert!(area_function(&f, &cone3).is_err());
        let coarse = ScaleGrid::new(0.1, 1.0, 2).unwrap();
        assert_eq!(
            area_function(&f, &ConeSpec::full(1.0, coarse).unwrap()).unwrap().warnings.len(),
            1
        );
    }

    #[test]
    fn area_of_single_mode_is_the_ladder_sum() {
        let spec = make_grid(1, 16, 8.0).unwrap();
        let step = spec.frequency_step();
        let (k1, k2) = (2.0, 1.0);
        let f = SpatialField::from_complex(
            spec,
            (0..spec.len())
                .map(|i| {
                    let x = spec.coordinates(i);
                    Complex64::from_polar(1.0, step * (k1 * x[0] + k2 * x[1]))
                })
                .collect(),
        )
        .unwrap();
        let scales = ScaleGrid::new(0.05, 2.0, 4).unwrap();
        let s = area_function(&f, &ConeSpec::full(1.0, scales.clone()).unwrap()).unwrap();
        let a = [k1 * step, k2 * step, (k1 + k2) * step];
        let dl = scales.delta_log();
        let mut expect = 0.0;
        for r in ladder_triples(&scales, &Block::ALL) {
            let p: f64 = (0..3).map(|j| r[j] * a[j]).product();
            let decay: f64 = (0..3).map(|j| r[j] * a[j]).sum();
            expect += dl.powi(3) * 8.0 * p * p * (-2.0 * decay).exp();
        }
        for v in s.field.real_values() {
            assert!((v * v / expect - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn exact_norm_matches_pointwise() {
        let spec = make_grid(1, 16, 8.0).unwrap();
        let f = SpatialField::from_fn(spec, |x| {
            let s = spec.frequency_step();
            (s * (x[0] + 2.0 * x[1])).cos() + 0.5 * (s * (3.0 * x[0] - x[1])).sin()
        });
        let scales = ScaleGrid::new(0.1, 1.5, 4).unwrap();
        let blocks_sets: [&[Block]; 3] = [&[Block::Three], &[Block::One, Block::Two], &Block::ALL];
        for blocks in blocks_sets {
            let cone = ConeSpec::new(1.0, scales.clone(), blocks).unwrap();
            let s = if cone.is_full() { area_function(&f, &cone) } else { partial_area(&f, &cone) }.unwrap();
            let pointwise = lp_norm(&s.field, 2.0).unwrap().powi(2);
            let exact = area_norm_sq(&f, blocks, &scales).unwrap();
            assert!((pointwise / exact - 1.0).abs() < 1e-10, "{blocks:?}");
        }
    }

    #[test]
    fn area_is_homogeneous() {
        let spec = make_grid(1, 16, 8.0).unwrap();
        let f = bump(spec, [4.0, 4.0], 1.0);
        let scales = ScaleGrid::new(0.1, 1.0, 4).unwrap();
        let cone = ConeSpec::full(1.0, scales).unwrap();
        let s = area_function(&f, &cone).unwrap().field.real_values();
        let s3 = area_function(&f.scaled(-2.0), &cone).unwrap().field.real_values();
        assert!(s.iter().zip(&s3).all(|(a, b)| (2.0 * a - b).abs() < 1e-12 * (1.0 + b)));
    }

    #[test]
    fn good_lambda_edges() {
        let spec = make_grid(1, 16, 8.0).unwrap();
        let f = bump(spec, [4.0, 4.0], 1.0);
        let scales = ScaleGrid::new(0.2, 1.0, 4).unwrap();
        let rep = good_lambda_sweep(&f, 2.0, &[0.01, 0.1, 1.0, 1e3], &scales).unwrap();
        let last = rep.rows.last().unwrap();
        assert_eq!((last.lhs, last.c), (0.0, 0.0));
        assert!(rep.rows.windows(2).all(|w| w[1].lhs <= w[0].lhs && w[1].term1 <= w[0].term1));
        assert!(rep.max_c.is_finite());
        let scaled = good_lambda_sweep(&f.scaled(3.0), 2.0, &[0.03, 0.3, 3.0, 3e3], &scales).unwrap();
        for (a, b) in rep.rows.iter().zip(&scaled.rows) {
            assert_eq!(a.lhs, b.lhs);
            assert!((a.c - b.c).abs() < 1e-9 * (1.0 + a.c));
        }
        assert!(good_lambda_sweep(&f, 1.0, &[1.0], &scales).is_err());
        assert!(good_lambda_sweep(&f, 2.0, &[0.0, 1.0], &scales).is_err());
    }

    #[test]
    fn dyadic_domination_closed_form() {
        let r = dyadic_domination_ratio(1, 0.7, &[0.0]).unwrap();
        assert!((r - 3.0 / (2.0 * PI)).abs() < 1e-14);
        for (a, v) in [(1.0, 0.3), (0.5, 7.0), (2.0, 100.0)] {
            let base = dyadic_domination_ratio(2, a, &[v, 0.5 * v]).unwrap();
            let scaled = dyadic_domination_ratio(2, 3.0 * a, &[3.0 * v, 1.5 * v]).unwrap();
            assert!((base / scaled - 1.0).abs() < 1e-12);
        }
        let rep = dyadic_domination_check(1, 1.0, 400).unwrap();
        assert!(rep.max_ratio.is_finite() && rep.max_ratio >= rep.ratio_at_zero);
    }

    #[test]
    fn reproducing_single_mode() {
        let spec = make_grid(1, 16, 8.0).unwrap();
        let f = mode(spec, 2.0, 1.0);
        let scales = ScaleGrid::new(1e-3, 6.0, 64).unwrap();
        assert!(reproducing_residual(&f, &scales).unwrap() < 1e-3);
        let bad = mode(spec, 1.0, -1.0);
        assert!((degenerate_mass(&bad) - 1.0).abs() < 1e-12);
        assert!(matches!(reproducing_residual(&bad, &scales), Err(Error::Precondition(_))));
        let mixed = f.sub(&bad.scaled(-1.0)).unwrap();
        let rebuilt = reproduce(&mixed, &scales).sub(&mixed).unwrap();
        let lost = lp_norm(&rebuilt, 2.0).unwrap() / lp_norm(&mixed, 2.0).unwrap();
        assert!((lost - degenerate_mass(&mixed).sqrt()).abs() < 1e-3);
    }

    #[test]
    fn lp_norms() {
        let spec = make_grid(1, 16, 8.0).unwrap();
        let suite = vec![bump(spec, [4.0, 4.0], 1.0), SpatialField::zeros(spec)];
        let scales = ScaleGrid::geometric(0.25, 2.0, 4).unwrap();
        assert!(lp_operator_norm(LpOperator::TubeMaximal, 1.0, &suite, &scales).is_err());
        let r = lp_operator_norm(LpOperator::TubeMaximal, 2.0, &suite, &scales).unwrap();
        assert!(r >= 1.0);
        let r = lp_operator_norm(LpOperator::Nontangential { beta: 2.0 }, 2.0, &suite, &scales).unwrap();
        assert!(r.is_finite());
    }

    #[test]
    fn separation_with_everything_good() {
        let spec = make_grid(1, 16, 8.0).unwrap();
        let f = bump(spec, [4.0, 4.0], 1.0);
        let scales = ScaleGrid::new(0.25, 1.0, 2).unwrap();
        let rep = separation_check(&f, 10.0, 4.0, 1.0, &scales).unwrap();
        assert_eq!(rep.good_measure, spec.total_measure());
        assert_eq!(rep.exterior_points, 0);
        assert_eq!(rep.inner_violations, 0);
        assert!((rep.inner_min - 1.0).abs() < 1e-12);
        assert!(matches!(
            separation_check(&f, 1e-9, 4.0, 1.0, &scales),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn llogl_edges() {
        let spec = make_grid(1, 16, 8.0).unwrap();
        let f = bump(spec, [4.0, 4.0], 0.5);
        let scales = ScaleGrid::new(0.2, 1.0, 4).unwrap();
        let rep = llogl_endpoint_sweep(&f, &[0.01, 0.1, 1e6], &scales).unwrap();
        assert_eq!(rep.rows[2].ratio, 0.0);
        assert!(rep.max_ratio.is_finite());
    }
}
