//! Grazing geometry: the angle sets `Gamma_p(x)`, their suprema `h_p(x)`, the
//! uniform time `t_eps` and depth `l_eps`, and an empirical velocity-drift check
//! for trajectories that stay close to the boundary.
//!
//! `U_l` is the set of points at distance at least `l` from the boundary.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, TAU};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::characteristics::{rebound_sequence, CharacteristicError, DEFAULT_MAX_REBOUNDS};
use crate::geometry::{golden_min, random_unit, Domain, GeometryError, Shape};
use crate::vector::{self, axpy, dist, dot, norm, scale, sub, Vec3};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GrazingError {
    #[error("point is not on the boundary (signed distance {0:e})")]
    NotOnBoundary(f64),
    #[error("boundary sampling too coarse: {0}")]
    SamplingTooCoarse(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Characteristic(#[from] CharacteristicError),
}

/// Resolution of the boundary discretisation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GrazingOptions {
    pub boundary_samples: usize,
    /// Tangent directions scanned per boundary point in 3-D.
    pub azimuths: usize,
    /// Largest shell index tried by the `p` search.
    pub p_max: u64,
}

impl GrazingOptions {
    pub fn for_dim(dim: usize) -> Self {
        if dim == 2 {
            GrazingOptions { boundary_samples: 4096, azimuths: 2, p_max: 1 << 40 }
        } else {
            GrazingOptions { boundary_samples: 128, azimuths: 8, p_max: 1 << 40 }
        }
    }
}

/// `sup_x h_p(x)` over the boundary samples for one `p`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HpRow {
    pub p: u64,
    pub sup_h: f64,
    pub argmax: Vec3,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GrazingConstants {
    pub eps: f64,
    pub v_min: f64,
    pub v_max: f64,
    /// Smallest `p` with `sup_x h_p(x) <= eps / 2`.
    pub p_eps: u64,
    pub alpha_x: f64,
    pub t_eps: f64,
    /// The requested `tau2`, clamped to `t_eps`.
    pub tau2: f64,
    pub l_eps: f64,
    pub boundary_samples: usize,
    /// Every `p` visited by the search, in increasing order.
    pub table: Vec<HpRow>,
}

fn check_domain(domain: &Domain) -> Result<(), GrazingError> {
    if domain.is_torus() {
        return Err(GrazingError::InvalidParameter("the torus has no boundary".into()));
    }
    Ok(())
}

fn inradius(domain: &Domain) -> f64 {
    // every bounded shape here is centrally symmetric
    -domain.signed_distance(&domain.center())
}

/// Smallest radius of curvature of a planar boundary.
pub fn min_curvature_radius(domain: &Domain) -> f64 {
    let (c, a, b, p) = match &domain.shape {
        Shape::Ball { radius, .. } => return *radius,
        Shape::Ellipsoid { dim: 2, center, axes } => (*center, axes[0], axes[1], 2),
        Shape::Superellipse { center, axes, exponent } => (*center, axes[0], axes[1], *exponent as i32),
        _ => return f64::NAN,
    };
    let pf = p as f64;
    let mut kmax: f64 = 0.0;
    let n = 8192;
    for i in 0..n {
        let (x, _) = domain.boundary_point(TAU * i as f64 / n as f64);
        let (u, w) = ((x[0] - c[0]) / a, (x[1] - c[1]) / b);
        let fx = pf / a * u.abs().powi(p - 1) * u.signum();
        let fy = pf / b * w.abs().powi(p - 1) * w.signum();
        let fxx = pf * (pf - 1.0) / (a * a) * u.abs().powi(p - 2);
        let fyy = pf * (pf - 1.0) / (b * b) * w.abs().powi(p - 2);
        let g = (fx * fx + fy * fy).sqrt();
        kmax = kmax.max((fxx * fy * fy + fyy * fx * fx) / (g * g * g));
    }
    1.0 / kmax
}

/// Deepest point of the segment `a + s w`, `s in [0, dur]`, as a distance to the
/// boundary; returns as soon as the depth is known to reach `cap`.
fn segment_depth_capped(domain: &Domain, a: &Vec3, w: &Vec3, dur: f64, cap: f64) -> f64 {
    let sd = |s: f64| domain.signed_distance(&axpy(a, s, w));
    let mut deepest = sd(0.0).min(sd(dur));
    if dur > 0.0 && -deepest < cap {
        // signed distance to a convex set is convex along lines
        let r = 0.5 * (5f64.sqrt() - 1.0);
        let (mut lo, mut hi) = (0.0, dur);
        let mut c = hi - r * (hi - lo);
        let mut d = lo + r * (hi - lo);
        let (mut fc, mut fd) = (sd(c), sd(d));
        deepest = deepest.min(fc).min(fd);
        while hi - lo > 1e-10 * (1.0 + dur) && -deepest < cap {
            if fc < fd {
                hi = d;
                d = c;
                fd = fc;
                c = hi - r * (hi - lo);
                fc = sd(c);
                deepest = deepest.min(fc);
            } else {
                lo = c;
                c = d;
                fc = fd;
                d = lo + r * (hi - lo);
                fd = sd(d);
                deepest = deepest.min(fd);
            }
        }
    }
    (-deepest).max(0.0)
}

/// Whether the chord leaving boundary point `x` along unit inward `v` reaches depth `l`.
fn chord_reaches(domain: &Domain, x: &Vec3, v: &Vec3, l: f64) -> Result<bool, GrazingError> {
    let len = domain.first_contact(x, v)?;
    Ok(segment_depth_capped(domain, x, v, len, l) >= l)
}

enum Method {
    /// `U_l` is empty.
    Empty,
    /// Tangents to the inner parallel curve, valid when `l` is below every
    /// radius of curvature.
    Offset { coarse: Vec<(f64, Vec3)> },
    /// Bisection on the depth reached by chords.
    Depth,
}

/// Evaluator of `h_p` for a fixed shell width `l = 1/p`.
struct HpEval<'a> {
    domain: &'a Domain,
    l: f64,
    azimuths: usize,
    method: Method,
}

const OFFSET_COARSE: usize = 256;

impl<'a> HpEval<'a> {
    fn new(domain: &'a Domain, p: u64, azimuths: usize, rho_min: f64, r_in: f64) -> Self {
        let l = 1.0 / p as f64;
        let method = if l >= r_in {
            Method::Empty
        } else if domain.dim() == 2 && l < 0.98 * rho_min {
            let coarse = (0..OFFSET_COARSE)
                .map(|i| {
                    let s = TAU * i as f64 / OFFSET_COARSE as f64;
                    (s, offset_point(domain, s, l))
                })
                .collect();
            Method::Offset { coarse }
        } else {
            Method::Depth
        };
        HpEval { domain, l, azimuths, method }
    }

    fn eval(&self, x: &Vec3, n: &Vec3) -> Result<f64, GrazingError> {
        match &self.method {
            Method::Empty => Ok(1.0),
            Method::Offset { coarse } => Ok(self.offset(x, n, coarse)),
            Method::Depth => self.depth(x, n),
        }
    }

    fn offset(&self, x: &Vec3, n: &Vec3, coarse: &[(f64, Vec3)]) -> f64 {
        let t = [-n[1], n[0], 0.0];
        let angle = |y: &Vec3| {
            let d = sub(y, x);
            (-dot(&d, n)).atan2(dot(&d, &t))
        };
        let (mut imin, mut imax) = (0, 0);
        let (mut amin, mut amax) = (f64::INFINITY, f64::NEG_INFINITY);
        for (i, (_, y)) in coarse.iter().enumerate() {
            let a = angle(y);
            if a < amin {
                amin = a;
                imin = i;
            }
            if a > amax {
                amax = a;
                imax = i;
            }
        }
        let h = TAU / coarse.len() as f64;
        let at = |s: f64| angle(&offset_point(self.domain, s, self.l));
        let s = coarse[imin].0;
        let psi_min = amin.min(at(golden_min(at, s - h, s + h, 1e-13)));
        let s = coarse[imax].0;
        let psi_max = amax.max(at(golden_min(|s| -at(s), s - h, s + h, 1e-13)));
        let below = if psi_min >= FRAC_PI_2 { 1.0 } else { psi_min.sin() };
        let above = if psi_max <= FRAC_PI_2 { 1.0 } else { psi_max.sin() };
        below.max(above)
    }

    /// Largest feasible angle from tangent `t` towards `-n`, given that the
    /// normal chord is blocked.
    fn feasible_angle(&self, x: &Vec3, n: &Vec3, t: &Vec3) -> Result<f64, GrazingError> {
        let (mut lo, mut hi) = (0.0, FRAC_PI_2);
        for _ in 0..48 {
            let mid = 0.5 * (lo + hi);
            let v = axpy(&scale(t, mid.cos()), -mid.sin(), n);
            if chord_reaches(self.domain, x, &v, self.l)? {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(lo)
    }

    fn depth(&self, x: &Vec3, n: &Vec3) -> Result<f64, GrazingError> {
        let minus_n = scale(n, -1.0);
        if !chord_reaches(self.domain, x, &minus_n, self.l)? {
            return Ok(1.0);
        }
        if self.domain.dim() == 2 {
            let t = [-n[1], n[0], 0.0];
            let a = self.feasible_angle(x, n, &t)?;
            let b = self.feasible_angle(x, n, &scale(&t, -1.0))?;
            return Ok(a.max(b).sin());
        }
        let (e1, e2) = tangent_basis(n);
        let dir = |phi: f64| axpy(&scale(&e1, phi.cos()), phi.sin(), &e2);
        let k = self.azimuths.max(4);
        let step = TAU / k as f64;
        let mut best = (0.0, -1.0);
        for i in 0..k {
            let phi = step * i as f64;
            let a = self.feasible_angle(x, n, &dir(phi))?;
            if a > best.1 {
                best = (phi, a);
            }
        }
        let objective = |phi: f64| -self.feasible_angle(x, n, &dir(phi)).unwrap_or(0.0);
        let phi = golden_min(objective, best.0 - step, best.0 + step, 1e-6);
        Ok(best.1.max(-objective(phi)).sin())
    }
}

fn offset_point(domain: &Domain, s: f64, l: f64) -> Vec3 {
    let (b, n) = domain.boundary_point(s);
    axpy(&b, -l, &n)
}

fn tangent_basis(n: &Vec3) -> (Vec3, Vec3) {
    let a = if n[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let e1 = axpy(&a, -dot(&a, n), n);
    let e1 = scale(&e1, 1.0 / norm(&e1));
    let e2 = [n[1] * e1[2] - n[2] * e1[1], n[2] * e1[0] - n[0] * e1[2], n[0] * e1[1] - n[1] * e1[0]];
    (e1, e2)
}

/// `h_p(x) = sup Gamma_p(x)`: the largest `|n(x).v|` over inward unit `v` whose
/// chord from `x` stays outside `U_{1/p}`.
pub fn h_p(domain: &Domain, x: &Vec3, p: u64) -> Result<f64, GrazingError> {
    check_domain(domain)?;
    if p == 0 {
        return Err(GrazingError::InvalidParameter("p must be at least 1".into()));
    }
    let loc = domain.locate(x);
    if !domain.on_boundary(x) {
        return Err(GrazingError::NotOnBoundary(loc.signed_distance));
    }
    let n = domain.normal_unchecked(x);
    let opts = GrazingOptions::for_dim(domain.dim());
    let rho = if domain.dim() == 2 { min_curvature_radius(domain) } else { 0.0 };
    HpEval::new(domain, p, opts.azimuths, rho, inradius(domain)).eval(x, &n)
}

/// Deterministic boundary points with their outward normals and, in 2-D, parameters.
pub fn boundary_samples(domain: &Domain, count: usize) -> Vec<(f64, Vec3, Vec3)> {
    if domain.dim() == 2 {
        return (0..count)
            .map(|i| {
                let s = TAU * i as f64 / count as f64;
                let (x, n) = domain.boundary_point(s);
                (s, x, n)
            })
            .collect();
    }
    // Fibonacci directions pushed radially onto the boundary
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let c = domain.center();
    (0..count)
        .map(|i| {
            let z = 1.0 - (2.0 * i as f64 + 1.0) / count as f64;
            let r = (1.0 - z * z).sqrt();
            let phi = golden * i as f64;
            let u = [r * phi.cos(), r * phi.sin(), z];
            let x = radial_projection(domain, &c, &u);
            (phi, x, domain.normal_unchecked(&x))
        })
        .collect()
}

/// Boundary point in direction `u` from the centre of a ball or ellipsoid.
fn radial_projection(domain: &Domain, c: &Vec3, u: &Vec3) -> Vec3 {
    let axes = match &domain.shape {
        Shape::Ball { radius, .. } => [*radius; 3],
        Shape::Ellipsoid { axes, .. } => *axes,
        _ => panic!("radial projection needs a ball or an ellipsoid"),
    };
    let lam = (0..3).map(|i| (u[i] / axes[i]).powi(2)).sum::<f64>().sqrt();
    axpy(c, 1.0 / lam, u)
}

fn check_3d_shape(domain: &Domain) -> Result<(), GrazingError> {
    match &domain.shape {
        Shape::Ball { dim: 3, .. } | Shape::Ellipsoid { dim: 3, .. } => Ok(()),
        s if domain.dim() == 3 => Err(GrazingError::InvalidParameter(format!("unsupported 3-D shape {s:?}"))),
        _ => Ok(()),
    }
}

/// Table of `h_p` over boundary samples for one `p`.
fn hp_table(
    domain: &Domain,
    samples: &[(f64, Vec3, Vec3)],
    p: u64,
    opts: &GrazingOptions,
    rho: f64,
    r_in: f64,
) -> Result<Vec<f64>, GrazingError> {
    let ev = HpEval::new(domain, p, opts.azimuths, rho, r_in);
    samples.par_iter().map(|(_, x, n)| ev.eval(x, n)).collect()
}

/// `sup_x h_p(x)`, from the sample table and, in 2-D, a local refinement of the
/// best sample.
fn sup_from_table(
    domain: &Domain,
    samples: &[(f64, Vec3, Vec3)],
    table: &[f64],
    p: u64,
    opts: &GrazingOptions,
    rho: f64,
    r_in: f64,
) -> Result<HpRow, GrazingError> {
    let (mut i_best, mut best) = (0, f64::NEG_INFINITY);
    for (i, h) in table.iter().enumerate() {
        if *h > best {
            best = *h;
            i_best = i;
        }
    }
    let mut argmax = samples[i_best].1;
    if domain.dim() == 2 && best < 1.0 {
        let ev = HpEval::new(domain, p, opts.azimuths, rho, r_in);
        let at = |s: f64| {
            let (x, n) = domain.boundary_point(s);
            ev.eval(&x, &n).unwrap_or(f64::NEG_INFINITY)
        };
        let h = TAU / samples.len() as f64;
        let s0 = samples[i_best].0;
        let s = golden_min(|s| -at(s), s0 - h, s0 + h, 1e-12);
        let refined = at(s);
        if refined > best {
            best = refined;
            argmax = domain.boundary_point(s).0;
        }
    }
    Ok(HpRow { p, sup_h: best, argmax })
}

/// `sup_x h_p(x)` over the boundary.
pub fn sup_h_p(domain: &Domain, p: u64, opts: &GrazingOptions) -> Result<HpRow, GrazingError> {
    check_domain(domain)?;
    check_3d_shape(domain)?;
    let samples = boundary_samples(domain, opts.boundary_samples);
    let rho = if domain.dim() == 2 { min_curvature_radius(domain) } else { 0.0 };
    let r_in = inradius(domain);
    let table = hp_table(domain, &samples, p, opts, rho, r_in)?;
    sup_from_table(domain, &samples, &table, p, opts, rho, r_in)
}

/// Smallest `p` with `sup_x h_p(x) <= target`, found by doubling then integer
/// bisection. Every visited table is checked for pointwise monotonicity in `p`.
pub fn find_p(domain: &Domain, target: f64, opts: &GrazingOptions) -> Result<(u64, Vec<HpRow>), GrazingError> {
    check_domain(domain)?;
    check_3d_shape(domain)?;
    if !(target > 0.0) {
        return Err(GrazingError::InvalidParameter(format!("target must be positive, got {target}")));
    }
    let samples = boundary_samples(domain, opts.boundary_samples);
    let rho = if domain.dim() == 2 { min_curvature_radius(domain) } else { 0.0 };
    let r_in = inradius(domain);
    let mut tables: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    let mut rows: BTreeMap<u64, HpRow> = BTreeMap::new();
    let mut visit = |p: u64| -> Result<f64, GrazingError> {
        let table = hp_table(domain, &samples, p, opts, rho, r_in)?;
        let tol = 1e-9;
        if let Some((q, lower)) = tables.range(..p).next_back() {
            if let Some(i) = (0..table.len()).find(|&i| table[i] > lower[i] + tol) {
                return Err(GrazingError::SamplingTooCoarse(format!(
                    "h_p increases from p = {q} to p = {p} at sample {i}"
                )));
            }
        }
        if let Some((q, upper)) = tables.range(p + 1..).next() {
            if let Some(i) = (0..table.len()).find(|&i| upper[i] > table[i] + tol) {
                return Err(GrazingError::SamplingTooCoarse(format!(
                    "h_p increases from p = {p} to p = {q} at sample {i}"
                )));
            }
        }
        let row = sup_from_table(domain, &samples, &table, p, opts, rho, r_in)?;
        let sup = row.sup_h;
        tables.insert(p, table);
        rows.insert(p, row);
        Ok(sup)
    };
    let (mut lo, mut hi) = (0u64, 1u64);
    while visit(hi)? > target {
        lo = hi;
        hi *= 2;
        if hi > opts.p_max {
            return Err(GrazingError::SamplingTooCoarse(format!(
                "sup h_p stays above {target} up to p = {}",
                opts.p_max
            )));
        }
    }
    while hi - lo > 1 {
        let mid = lo + (hi - lo) / 2;
        if visit(mid)? > target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok((hi, rows.into_values().collect()))
}

/// Smallest boundary distance `|x - x'|` at which `||R_x - R_x'|| = 2 sin(angle(n, n'))`
/// exceeds `eps / 2`.
pub fn alpha_x(domain: &Domain, eps: f64, opts: &GrazingOptions) -> Result<f64, GrazingError> {
    check_domain(domain)?;
    check_3d_shape(domain)?;
    let thr = 0.5 * eps;
    if thr >= 2.0 {
        return Ok(domain.diameter());
    }
    let sin_thr = 0.5 * thr;
    let violates = |a: &Vec3, b: &Vec3| {
        let c = vector::dot(a, b);
        (1.0 - c * c).max(0.0).sqrt() > sin_thr
    };
    let samples = boundary_samples(domain, opts.boundary_samples);
    let m = samples.len();
    let local: Vec<f64> = if domain.dim() == 2 {
        let h = TAU / m as f64;
        (0..m)
            .into_par_iter()
            .map(|i| {
                let (s0, x0, n0) = samples[i];
                let mut best = f64::INFINITY;
                for sign in [1.0, -1.0] {
                    let mut k = 1;
                    while k < m / 2
                        && !violates(
                            &n0,
                            &samples[(i as isize + sign as isize * k as isize).rem_euclid(m as isize) as usize].2,
                        )
                    {
                        k += 1;
                    }
                    if k >= m / 2 {
                        continue;
                    }
                    let (mut lo, mut hi) = (s0 + sign * (k - 1) as f64 * h, s0 + sign * k as f64 * h);
                    for _ in 0..60 {
                        let mid = 0.5 * (lo + hi);
                        if violates(&n0, &domain.boundary_point(mid).1) {
                            hi = mid;
                        } else {
                            lo = mid;
                        }
                    }
                    best = best.min(dist(&x0, &domain.boundary_point(hi).0));
                }
                best
            })
            .collect()
    } else {
        let c = domain.center();
        let k = opts.azimuths.max(4);
        let diam = domain.diameter();
        (0..m)
            .into_par_iter()
            .map(|i| {
                let (_, x0, n0) = samples[i];
                let (e1, e2) = tangent_basis(&n0);
                let mut best = f64::INFINITY;
                for j in 0..k {
                    let phi = TAU * j as f64 / k as f64;
                    let u = axpy(&scale(&e1, phi.cos()), phi.sin(), &e2);
                    let at = |r: f64| radial_projection(domain, &c, &sub(&axpy(&x0, r, &u), &c));
                    let bad = |r: f64| violates(&n0, &domain.normal_unchecked(&at(r)));
                    let (mut lo, mut hi) = (0.0, 1e-3 * diam);
                    while !bad(hi) && hi < diam {
                        lo = hi;
                        hi *= 2.0;
                    }
                    if !bad(hi) {
                        continue;
                    }
                    for _ in 0..60 {
                        let mid = 0.5 * (lo + hi);
                        if bad(mid) {
                            hi = mid;
                        } else {
                            lo = mid;
                        }
                    }
                    best = best.min(dist(&x0, &at(hi)));
                }
                best
            })
            .collect()
    };
    let mut alpha = local.iter().fold(f64::INFINITY, |a, b| a.min(*b));
    // guard against violating pairs that are not reached by a local walk
    for i in 0..m {
        for j in i + 1..m {
            let d = dist(&samples[i].1, &samples[j].1);
            if d < alpha && violates(&samples[i].2, &samples[j].2) {
                alpha = d;
            }
        }
    }
    if !alpha.is_finite() {
        alpha = domain.diameter();
    }
    Ok(alpha)
}

/// `t_eps(v_M) = max(alpha_X / v_M, 1 / (p_{eps/2} v_M))`.
pub fn t_eps(alpha_x: f64, p_half: u64, v_max: f64) -> f64 {
    (alpha_x / v_max).max(1.0 / (p_half as f64 * v_max))
}

/// `l_eps(v_m, tau2) = min(1 / p_{eps/2}, v_m tau2 eps / 4)`.
pub fn l_eps(p_half: u64, v_min: f64, tau2: f64, eps: f64) -> f64 {
    (1.0 / p_half as f64).min(0.25 * v_min * tau2 * eps)
}

pub fn grazing_constants(
    domain: &Domain,
    eps: f64,
    v_min: f64,
    v_max: f64,
    tau2: f64,
    opts: &GrazingOptions,
) -> Result<GrazingConstants, GrazingError> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(GrazingError::InvalidParameter(format!("eps must be positive, got {eps}")));
    }
    if !(v_min > 0.0 && v_min < v_max && v_max.is_finite()) {
        return Err(GrazingError::InvalidParameter(format!("need 0 < v_min < v_max, got {v_min}, {v_max}")));
    }
    if !(tau2 > 0.0) {
        return Err(GrazingError::InvalidParameter(format!("tau2 must be positive, got {tau2}")));
    }
    let (p_eps, table) = find_p(domain, 0.5 * eps, opts)?;
    let alpha = alpha_x(domain, eps, opts)?;
    let t = t_eps(alpha, p_eps, v_max);
    let tau2 = tau2.min(t);
    Ok(GrazingConstants {
        eps,
        v_min,
        v_max,
        p_eps,
        alpha_x: alpha,
        t_eps: t,
        tau2,
        l_eps: l_eps(p_eps, v_min, tau2, eps),
        boundary_samples: opts.boundary_samples,
        table,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct DriftReport {
    /// `max_{s <= t} |V_s(x, v) - v|`.
    pub max_drift: f64,
    pub relative_drift: f64,
    /// The trajectory stayed outside `U_l` on `[0, t]`.
    pub hypothesis_held: bool,
    /// Largest distance to the boundary along the trajectory.
    pub max_depth: f64,
    pub rebounds: usize,
}

/// Velocity drift of the forward characteristic from `(x, v)` over `[0, t]`,
/// together with whether it stayed in the shell of width `l`.
pub fn drift_check(domain: &Domain, x: &Vec3, v: &Vec3, t: f64, l: f64) -> Result<DriftReport, GrazingError> {
    drift_scan(domain, x, v, t, l, f64::INFINITY)
}

/// Depths are only resolved up to `cap`; beyond it `max_depth` is a lower bound.
fn drift_scan(domain: &Domain, x: &Vec3, v: &Vec3, t: f64, l: f64, cap: f64) -> Result<DriftReport, GrazingError> {
    let speed = norm(v);
    if speed == 0.0 {
        return Err(CharacteristicError::ZeroVelocity.into());
    }
    if domain.is_torus() {
        return Ok(DriftReport {
            max_drift: 0.0,
            relative_drift: 0.0,
            hypothesis_held: false,
            max_depth: f64::INFINITY,
            rebounds: 0,
        });
    }
    let minus_v = scale(v, -1.0);
    let seq = rebound_sequence(domain, x, &minus_v, t, DEFAULT_MAX_REBOUNDS)?;
    let events = seq.events.len();
    let (mut max_drift, mut max_depth) = (0.0f64, 0.0f64);
    for k in 0..=events {
        let (tk, xk, vk) = seq.state(k);
        let w = scale(&vk, -1.0);
        let end = if k < events {
            seq.events[k].t
        } else if seq.termination == crate::characteristics::Termination::Stop {
            tk
        } else {
            t
        };
        max_drift = max_drift.max(dist(&w, v));
        if max_depth < cap {
            max_depth = max_depth.max(segment_depth_capped(domain, &xk, &w, end - tk, cap));
        }
    }
    Ok(DriftReport {
        max_drift,
        relative_drift: max_drift / speed,
        hypothesis_held: max_depth < l,
        max_depth,
        rebounds: events,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrialConfig {
    pub trials: usize,
    pub seed: u64,
    /// Launch slopes `|n.v/|v||` are uniform on `[0, slope_factor * eps]`.
    pub slope_factor: f64,
}

impl Default for TrialConfig {
    fn default() -> Self {
        TrialConfig { trials: 100_000, seed: 0x9a2e, slope_factor: 1.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Trial {
    pub x: Vec3,
    pub v: Vec3,
    pub report: DriftReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrialReport {
    pub eps: f64,
    pub t: f64,
    pub l: f64,
    pub trials: usize,
    pub hypothesis_held: usize,
    pub counterexamples: usize,
    /// Largest drift among trajectories satisfying the hypothesis.
    pub max_drift_held: f64,
    /// Trial with the largest drift under the hypothesis.
    pub worst: Option<Trial>,
}

const TRIAL_CHUNK: usize = 1024;

/// Randomised near-grazing launches from the shell of width `l_eps`, run for
/// `t_eps`. A counterexample satisfies the shell hypothesis yet drifts by more
/// than `eps`.
pub fn grazing_trials(domain: &Domain, k: &GrazingConstants, cfg: &TrialConfig) -> Result<TrialReport, GrazingError> {
    check_domain(domain)?;
    let (t, l, eps) = (k.t_eps, k.l_eps, k.eps);
    let dim = domain.dim();
    let chunks = cfg.trials.div_ceil(TRIAL_CHUNK);
    let parts: Vec<Vec<Trial>> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(c as u64);
            let count = TRIAL_CHUNK.min(cfg.trials - c * TRIAL_CHUNK);
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                let xb = domain.sample_boundary(&mut rng);
                let n = domain.normal_unchecked(&xb);
                let x = axpy(&xb, -rng.gen::<f64>() * l, &n);
                let tangent = if dim == 2 {
                    let s = if rng.gen::<bool>() { 1.0 } else { -1.0 };
                    [-s * n[1], s * n[0], 0.0]
                } else {
                    let u = random_unit(3, &mut rng);
                    let u = axpy(&u, -dot(&u, &n), &n);
                    scale(&u, 1.0 / norm(&u))
                };
                let slope = rng.gen::<f64>() * cfg.slope_factor * eps;
                let slope = slope.min(1.0);
                let dir = axpy(&scale(&tangent, (1.0 - slope * slope).sqrt()), -slope, &n);
                let speed = rng.gen_range(k.v_min..=k.v_max);
                let v = scale(&dir, speed);
                let report = drift_scan(domain, &x, &v, t, l, l)?;
                out.push(Trial { x, v, report });
            }
            Ok(out)
        })
        .collect::<Result<_, GrazingError>>()?;
    let mut report = TrialReport {
        eps,
        t,
        l,
        trials: cfg.trials,
        hypothesis_held: 0,
        counterexamples: 0,
        max_drift_held: 0.0,
        worst: None,
    };
    for trial in parts.into_iter().flatten() {
        if !trial.report.hypothesis_held {
            continue;
        }
        report.hypothesis_held += 1;
        if trial.report.max_drift > eps {
            report.counterexamples += 1;
        }
        if report.worst.is_none() || trial.report.max_drift > report.max_drift_held {
            report.max_drift_held = trial.report.max_drift;
            report.worst = Some(trial);
        }
    }
    Ok(report)
}
