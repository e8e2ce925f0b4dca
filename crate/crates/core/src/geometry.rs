//! Convex spatial domains with smooth boundary, plus the flat torus.
//!
//! Bounded shapes are described by a level function `F` with `F < 0` inside.
//! Boundary membership uses the band `|signed distance| <= tol_geo` where
//! `tol_geo = 1e-12 * diameter`.

use rand::Rng;
use serde::Serialize;
use thiserror::Error;

use crate::vector::{self, axpy, dot, norm, sub, Vec3, ZERO};

/// Relative width of the boundary band.
pub const GEO_REL_TOL: f64 = 1e-12;
/// Relative threshold on `|v.n| / |v|` below which a boundary pair is tangential.
pub const DOT_REL_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid shape: {0}")]
    InvalidShape(String),
    #[error("point is not on the boundary (signed distance {0:e})")]
    NotOnBoundary(f64),
    #[error("root finding failed: {0}")]
    RootFindFailure(String),
    #[error("velocity is zero")]
    ZeroVelocity,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    Ball { dim: usize, center: Vec3, radius: f64 },
    Ellipsoid { dim: usize, center: Vec3, axes: Vec3 },
    Superellipse { center: Vec3, axes: Vec3, exponent: u32 },
    Torus { dim: usize, period: Vec3 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PointClass {
    Interior,
    Boundary,
    Exterior,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Location {
    pub class: PointClass,
    pub signed_distance: f64,
}

/// A spatial domain together with its cached diameter.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Domain {
    pub shape: Shape,
    #[serde(skip)]
    diameter: f64,
}

fn positive(name: &str, x: f64) -> Result<(), GeometryError> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(GeometryError::InvalidShape(format!("{name} must be positive and finite, got {x}")))
    }
}

impl Domain {
    fn new(shape: Shape) -> Self {
        let mut d = Domain { shape, diameter: 0.0 };
        d.diameter = d.compute_diameter();
        d
    }

    pub fn disk(center: [f64; 2], radius: f64) -> Result<Self, GeometryError> {
        positive("radius", radius)?;
        Ok(Self::new(Shape::Ball { dim: 2, center: vector::from_slice(&center), radius }))
    }

    pub fn ball(center: [f64; 3], radius: f64) -> Result<Self, GeometryError> {
        positive("radius", radius)?;
        Ok(Self::new(Shape::Ball { dim: 3, center, radius }))
    }

    pub fn ellipse(center: [f64; 2], a: f64, b: f64) -> Result<Self, GeometryError> {
        positive("semi-axis a", a)?;
        positive("semi-axis b", b)?;
        Ok(Self::new(Shape::Ellipsoid { dim: 2, center: vector::from_slice(&center), axes: [a, b, 0.0] }))
    }

    pub fn ellipsoid(center: [f64; 3], axes: [f64; 3]) -> Result<Self, GeometryError> {
        for a in axes {
            positive("semi-axis", a)?;
        }
        Ok(Self::new(Shape::Ellipsoid { dim: 3, center, axes }))
    }

    /// `|x/a|^p + |y/b|^p <= 1` with `p` even and at least 2.
    pub fn superellipse(center: [f64; 2], a: f64, b: f64, p: u32) -> Result<Self, GeometryError> {
        positive("semi-axis a", a)?;
        positive("semi-axis b", b)?;
        if p < 2 || !p.is_multiple_of(2) {
            return Err(GeometryError::InvalidShape(format!("superellipse exponent must be even and >= 2, got {p}")));
        }
        Ok(Self::new(Shape::Superellipse { center: vector::from_slice(&center), axes: [a, b, 0.0], exponent: p }))
    }

    pub fn torus(period: &[f64]) -> Result<Self, GeometryError> {
        if period.len() != 2 && period.len() != 3 {
            return Err(GeometryError::InvalidShape("torus needs 2 or 3 periods".into()));
        }
        for &l in period {
            positive("period", l)?;
        }
        Ok(Self::new(Shape::Torus { dim: period.len(), period: vector::from_slice(period) }))
    }

    pub fn dim(&self) -> usize {
        match &self.shape {
            Shape::Ball { dim, .. } | Shape::Ellipsoid { dim, .. } | Shape::Torus { dim, .. } => *dim,
            Shape::Superellipse { .. } => 2,
        }
    }

    pub fn is_torus(&self) -> bool {
        matches!(self.shape, Shape::Torus { .. })
    }

    pub fn diameter(&self) -> f64 {
        self.diameter
    }

    pub fn tol_geo(&self) -> f64 {
        GEO_REL_TOL * self.diameter
    }

    pub fn center(&self) -> Vec3 {
        match &self.shape {
            Shape::Ball { center, .. } | Shape::Ellipsoid { center, .. } | Shape::Superellipse { center, .. } => {
                *center
            }
            Shape::Torus { period, .. } => vector::scale(period, 0.5),
        }
    }

    /// Axis-aligned bounding box `(lo, hi)`.
    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        let c = self.center();
        let half = match &self.shape {
            Shape::Ball { dim, radius, .. } => {
                let mut h = ZERO;
                h[..*dim].fill(*radius);
                h
            }
            Shape::Ellipsoid { axes, .. } | Shape::Superellipse { axes, .. } => *axes,
            Shape::Torus { period, .. } => vector::scale(period, 0.5),
        };
        (sub(&c, &half), vector::add(&c, &half))
    }

    fn compute_diameter(&self) -> f64 {
        match &self.shape {
            Shape::Ball { radius, .. } => 2.0 * radius,
            Shape::Ellipsoid { axes, .. } => 2.0 * axes.iter().cloned().fold(0.0, f64::max),
            Shape::Torus { period, .. } => norm(period),
            Shape::Superellipse { .. } => {
                // centrally symmetric, so the diameter is twice the largest radius
                let r = |s: f64| {
                    let (p, _) = self.boundary_point(s);
                    -vector::dist(&p, &self.center())
                };
                let n = 2048;
                let h = std::f64::consts::FRAC_PI_2 / n as f64;
                let (mut best, mut bs) = (f64::INFINITY, 0.0);
                for i in 0..=n {
                    let s = i as f64 * h;
                    let v = r(s);
                    if v < best {
                        best = v;
                        bs = s;
                    }
                }
                let s = golden_min(r, (bs - h).max(0.0), (bs + h).min(std::f64::consts::FRAC_PI_2), 1e-14);
                -2.0 * r(s)
            }
        }
    }

    /// Level function, negative inside. Identically -1 on the torus.
    pub fn level(&self, x: &Vec3) -> f64 {
        match &self.shape {
            Shape::Ball { center, radius, .. } => {
                let d = sub(x, center);
                dot(&d, &d) / (radius * radius) - 1.0
            }
            Shape::Ellipsoid { dim, center, axes } => {
                (0..*dim).map(|i| ((x[i] - center[i]) / axes[i]).powi(2)).sum::<f64>() - 1.0
            }
            Shape::Superellipse { center, axes, exponent } => {
                (0..2).map(|i| ((x[i] - center[i]) / axes[i]).powi(*exponent as i32)).sum::<f64>() - 1.0
            }
            Shape::Torus { .. } => -1.0,
        }
    }

    /// Gradient of the level function.
    pub fn level_gradient(&self, x: &Vec3) -> Vec3 {
        let mut g = ZERO;
        match &self.shape {
            Shape::Ball { dim, center, radius } => {
                for i in 0..*dim {
                    g[i] = 2.0 * (x[i] - center[i]) / (radius * radius);
                }
            }
            Shape::Ellipsoid { dim, center, axes } => {
                for i in 0..*dim {
                    g[i] = 2.0 * (x[i] - center[i]) / (axes[i] * axes[i]);
                }
            }
            Shape::Superellipse { center, axes, exponent } => {
                let p = *exponent as i32;
                for i in 0..2 {
                    let q = (x[i] - center[i]) / axes[i];
                    g[i] = p as f64 * q.powi(p - 1) / axes[i];
                }
            }
            Shape::Torus { .. } => {}
        }
        g
    }

    /// Unit outward normal of the level set through `x`, without the boundary check.
    pub fn normal_unchecked(&self, x: &Vec3) -> Vec3 {
        let g = self.level_gradient(x);
        let n = norm(&g);
        if n > 0.0 {
            vector::scale(&g, 1.0 / n)
        } else {
            ZERO
        }
    }

    /// Exact Euclidean signed distance to the boundary, negative inside.
    pub fn signed_distance(&self, x: &Vec3) -> f64 {
        match &self.shape {
            Shape::Ball { center, radius, .. } => vector::dist(x, center) - radius,
            Shape::Ellipsoid { dim, center, axes } => {
                let d = ellipsoid_distance(*dim, axes, &sub(x, center));
                if self.level(x) < 0.0 {
                    -d
                } else {
                    d
                }
            }
            Shape::Superellipse { .. } => {
                let d = self.superellipse_distance(x);
                if self.level(x) < 0.0 {
                    -d
                } else {
                    d
                }
            }
            Shape::Torus { .. } => f64::NEG_INFINITY,
        }
    }

    /// Signed distance, using the first-order estimate `F/|grad F|` inside a
    /// thin shell where it is accurate to rounding.
    fn fast_signed_distance(&self, x: &Vec3) -> f64 {
        if let Shape::Ball { .. } | Shape::Torus { .. } = self.shape {
            return self.signed_distance(x);
        }
        let g = norm(&self.level_gradient(x));
        if g > 0.0 {
            let est = self.level(x) / g;
            if est.abs() < 1e-9 * self.diameter {
                return est;
            }
        }
        self.signed_distance(x)
    }

    pub fn locate(&self, x: &Vec3) -> Location {
        let sd = self.fast_signed_distance(x);
        let tol = self.tol_geo();
        let class = if sd.abs() <= tol {
            PointClass::Boundary
        } else if sd < 0.0 {
            PointClass::Interior
        } else {
            PointClass::Exterior
        };
        Location { class, signed_distance: sd }
    }

    pub fn on_boundary(&self, x: &Vec3) -> bool {
        !self.is_torus() && self.locate(x).class == PointClass::Boundary
    }

    /// Point of the closure (boundary band included).
    pub fn in_closure(&self, x: &Vec3) -> bool {
        self.is_torus() || self.locate(x).class != PointClass::Exterior
    }

    pub fn outward_normal(&self, x: &Vec3) -> Result<Vec3, GeometryError> {
        if self.is_torus() {
            return Err(GeometryError::NotOnBoundary(f64::NEG_INFINITY));
        }
        let loc = self.locate(x);
        if loc.class != PointClass::Boundary {
            return Err(GeometryError::NotOnBoundary(loc.signed_distance));
        }
        Ok(self.normal_unchecked(x))
    }

    /// Time of first forward contact with the boundary from `x` along `v`.
    ///
    /// Zero when `x` is on the boundary and `v` does not point strictly inward,
    /// `+inf` on the torus.
    pub fn first_contact(&self, x: &Vec3, v: &Vec3) -> Result<f64, GeometryError> {
        let speed = norm(v);
        if speed == 0.0 {
            return Err(GeometryError::ZeroVelocity);
        }
        if self.is_torus() {
            return Ok(f64::INFINITY);
        }
        if self.on_boundary(x) && dot(&self.normal_unchecked(x), v) >= -DOT_REL_TOL * speed {
            return Ok(0.0);
        }
        match &self.shape {
            Shape::Ball { dim, center, radius } => {
                let mut axes = ZERO;
                axes[..*dim].fill(*radius);
                quadratic_contact(*dim, center, &axes, x, v)
            }
            Shape::Ellipsoid { dim, center, axes } => quadratic_contact(*dim, center, axes, x, v),
            Shape::Superellipse { center, axes, exponent } => {
                superellipse_contact(center, axes, *exponent as i32, x, v)
            }
            Shape::Torus { .. } => unreachable!(),
        }
    }

    /// Reduce a torus position into the fundamental cell `[0, L)`.
    pub fn wrap(&self, x: &Vec3) -> Vec3 {
        match &self.shape {
            Shape::Torus { dim, period } => {
                let mut out = *x;
                for i in 0..*dim {
                    out[i] = x[i].rem_euclid(period[i]);
                    if out[i] >= period[i] {
                        out[i] = 0.0;
                    }
                }
                out
            }
            _ => *x,
        }
    }

    /// Boundary point and outward normal at parameter `s` (planar bounded shapes).
    pub fn boundary_point(&self, s: f64) -> (Vec3, Vec3) {
        let (c, a, b, p) = match &self.shape {
            Shape::Ball { center, radius, .. } => (*center, *radius, *radius, 2),
            Shape::Ellipsoid { center, axes, .. } => (*center, axes[0], axes[1], 2),
            Shape::Superellipse { center, axes, exponent } => (*center, axes[0], axes[1], *exponent),
            Shape::Torus { .. } => panic!("the torus has no boundary"),
        };
        let e = 2.0 / p as f64;
        let sp = |t: f64| t.signum() * t.abs().powf(e);
        let x = [c[0] + a * sp(s.cos()), c[1] + b * sp(s.sin()), 0.0];
        (x, self.normal_unchecked(&x))
    }

    /// Point drawn from the uniform law on the domain (rejection from the box).
    pub fn sample_interior<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3 {
        let (lo, hi) = self.bounding_box();
        let d = self.dim();
        loop {
            let mut x = ZERO;
            for i in 0..d {
                x[i] = rng.gen_range(lo[i]..hi[i]);
            }
            if self.is_torus() || self.level(&x) < 0.0 {
                return x;
            }
        }
    }

    /// Point on the boundary (not uniform in arc length).
    pub fn sample_boundary<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec3 {
        match &self.shape {
            Shape::Ball { dim: 3, center, radius } => {
                let u = random_unit(3, rng);
                axpy(center, *radius, &u)
            }
            Shape::Ellipsoid { dim: 3, center, axes } => {
                let u = random_unit(3, rng);
                let lam = (0..3).map(|i| (u[i] / axes[i]).powi(2)).sum::<f64>().sqrt();
                vector::add(center, &vector::scale(&u, 1.0 / lam))
            }
            Shape::Torus { .. } => panic!("the torus has no boundary"),
            _ => self.boundary_point(rng.gen_range(0.0..std::f64::consts::TAU)).0,
        }
    }

    fn superellipse_distance(&self, x: &Vec3) -> f64 {
        let Shape::Superellipse { center, axes, exponent } = &self.shape else { unreachable!() };
        let q = [(x[0] - center[0]).abs(), (x[1] - center[1]).abs(), 0.0];
        let e = 2.0 / *exponent as f64;
        let f = |s: f64| {
            let y0 = axes[0] * s.cos().max(0.0).powf(e);
            let y1 = axes[1] * s.sin().max(0.0).powf(e);
            (y0 - q[0]).powi(2) + (y1 - q[1]).powi(2)
        };
        let n = 24;
        let h = std::f64::consts::FRAC_PI_2 / n as f64;
        let (mut best, mut bs) = (f64::INFINITY, 0.0);
        for i in 0..=n {
            let s = i as f64 * h;
            let v = f(s);
            if v < best {
                best = v;
                bs = s;
            }
        }
        let s = golden_min(f, (bs - h).max(0.0), (bs + h).min(std::f64::consts::FRAC_PI_2), 1e-11);
        f(s).min(best).sqrt()
    }
}

/// Uniform direction on the unit sphere of dimension `dim`.
pub fn random_unit<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Vec3 {
    loop {
        let mut u = ZERO;
        for c in u.iter_mut().take(dim) {
            *c = rng.gen_range(-1.0..1.0);
        }
        let n = norm(&u);
        if n > 1e-3 && n <= 1.0 {
            return vector::scale(&u, 1.0 / n);
        }
    }
}

/// Golden-section minimisation of a unimodal function on `[a, b]`.
pub fn golden_min<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, tol: f64) -> f64 {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..200 {
        if (b - a).abs() <= tol * (1.0 + a.abs() + b.abs()) {
            break;
        }
        if fc < fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = f(d);
        }
    }
    0.5 * (a + b)
}

fn quadratic_contact(dim: usize, c: &Vec3, axes: &Vec3, x: &Vec3, v: &Vec3) -> Result<f64, GeometryError> {
    let (mut qa, mut qb, mut qc) = (0.0, 0.0, -1.0);
    for i in 0..dim {
        let a2 = axes[i] * axes[i];
        let y = x[i] - c[i];
        qa += v[i] * v[i] / a2;
        qb += 2.0 * y * v[i] / a2;
        qc += y * y / a2;
    }
    let disc = qb * qb - 4.0 * qa * qc;
    if disc < 0.0 {
        return Err(GeometryError::RootFindFailure("ray misses the domain".into()));
    }
    let q = -0.5 * (qb + qb.signum() * disc.sqrt());
    if q == 0.0 {
        return Ok(0.0);
    }
    Ok((q / qa).max(qc / q).max(0.0))
}

/// Level-function band accepted as a boundary hit; rounding of `sum q^p` alone
/// reaches a few ulps, e.g. where a ray leaves through a vertex.
const LEVEL_ROOT_TOL: f64 = 1e-13;

fn superellipse_contact(c: &Vec3, axes: &Vec3, p: i32, x: &Vec3, v: &Vec3) -> Result<f64, GeometryError> {
    let g = |t: f64| -> (f64, f64) {
        let mut val = -1.0;
        let mut der = 0.0;
        for i in 0..2 {
            let q = (x[i] + t * v[i] - c[i]) / axes[i];
            val += q.powi(p);
            der += p as f64 * q.powi(p - 1) * v[i] / axes[i];
        }
        (val, der)
    };
    // exit time of the bounding box, where g >= 0
    let mut t_hi = f64::INFINITY;
    for i in 0..2 {
        if v[i] != 0.0 {
            let target = c[i] + v[i].signum() * axes[i];
            t_hi = t_hi.min((target - x[i]) / v[i]);
        }
    }
    let mut t = t_hi.max(0.0);
    for _ in 0..200 {
        let (val, der) = g(t);
        if val <= 0.0 && val > -LEVEL_ROOT_TOL {
            return Ok(t.max(0.0));
        }
        if der <= 0.0 || !val.is_finite() {
            break;
        }
        let step = val / der;
        let next = t - step;
        if (next - t).abs() <= 1e-16 * t.abs().max(1e-300) || next == t {
            return Ok(next.max(0.0));
        }
        t = next;
    }
    // bisection fallback on [0, t_hi]
    let (mut lo, mut hi) = (0.0, t_hi.max(0.0));
    if g(hi).0 < 0.0 {
        return Err(GeometryError::RootFindFailure("no sign change along the ray".into()));
    }
    // move lo off the starting point into the negative region when starting on the boundary
    let probe = 1e-9 * hi;
    if g(lo).0 >= 0.0 {
        if g(probe).0 < 0.0 {
            lo = probe;
        } else {
            return Err(GeometryError::RootFindFailure("ray does not enter the domain".into()));
        }
    }
    for _ in 0..300 {
        let mid = 0.5 * (lo + hi);
        if mid == lo || mid == hi {
            break;
        }
        if g(mid).0 < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(hi)
}

/// Distance from a point to an axis-aligned centred ellipse or ellipsoid.
fn ellipsoid_distance(dim: usize, axes: &Vec3, y: &Vec3) -> f64 {
    // sort axes in decreasing order, working with |y|
    let mut idx: Vec<usize> = (0..dim).collect();
    idx.sort_by(|&i, &j| axes[j].partial_cmp(&axes[i]).unwrap());
    let e: Vec<f64> = idx.iter().map(|&i| axes[i]).collect();
    let z: Vec<f64> = idx.iter().map(|&i| y[i].abs()).collect();
    if dim == 2 {
        distance_ellipse(e[0], e[1], z[0], z[1])
    } else {
        distance_ellipsoid(e[0], e[1], e[2], z[0], z[1], z[2])
    }
}

fn root2(r0: f64, z0: f64, z1: f64, g: f64) -> f64 {
    let n0 = r0 * z0;
    let mut s0 = z1 - 1.0;
    let mut s1 = if g < 0.0 { 0.0 } else { n0.hypot(z1) - 1.0 };
    let mut s = 0.0;
    for _ in 0..1100 {
        s = 0.5 * (s0 + s1);
        if s == s0 || s == s1 {
            break;
        }
        let a = n0 / (s + r0);
        let b = z1 / (s + 1.0);
        let g = a * a + b * b - 1.0;
        if g > 0.0 {
            s0 = s;
        } else if g < 0.0 {
            s1 = s;
        } else {
            break;
        }
    }
    s
}

fn distance_ellipse(e0: f64, e1: f64, y0: f64, y1: f64) -> f64 {
    let (x0, x1);
    if y1 > 0.0 {
        if y0 > 0.0 {
            let z0 = y0 / e0;
            let z1 = y1 / e1;
            let g = z0 * z0 + z1 * z1 - 1.0;
            if g != 0.0 {
                let r0 = (e0 / e1).powi(2);
                let s = root2(r0, z0, z1, g);
                x0 = r0 * y0 / (s + r0);
                x1 = y1 / (s + 1.0);
            } else {
                x0 = y0;
                x1 = y1;
            }
        } else {
            x0 = 0.0;
            x1 = e1;
        }
    } else {
        let numer0 = e0 * y0;
        let denom0 = e0 * e0 - e1 * e1;
        if numer0 < denom0 {
            let xde0 = numer0 / denom0;
            x0 = e0 * xde0;
            x1 = e1 * (1.0 - xde0 * xde0).sqrt();
        } else {
            x0 = e0;
            x1 = 0.0;
        }
    }
    (x0 - y0).hypot(x1 - y1)
}

fn root3(r0: f64, r1: f64, z0: f64, z1: f64, z2: f64, g: f64) -> f64 {
    let n0 = r0 * z0;
    let n1 = r1 * z1;
    let mut s0 = z2 - 1.0;
    let mut s1 = if g < 0.0 { 0.0 } else { (n0 * n0 + n1 * n1 + z2 * z2).sqrt() - 1.0 };
    let mut s = 0.0;
    for _ in 0..1100 {
        s = 0.5 * (s0 + s1);
        if s == s0 || s == s1 {
            break;
        }
        let a = n0 / (s + r0);
        let b = n1 / (s + r1);
        let c = z2 / (s + 1.0);
        let g = a * a + b * b + c * c - 1.0;
        if g > 0.0 {
            s0 = s;
        } else if g < 0.0 {
            s1 = s;
        } else {
            break;
        }
    }
    s
}

fn distance_ellipsoid(e0: f64, e1: f64, e2: f64, y0: f64, y1: f64, y2: f64) -> f64 {
    if y2 > 0.0 {
        if y1 > 0.0 {
            if y0 > 0.0 {
                let z0 = y0 / e0;
                let z1 = y1 / e1;
                let z2 = y2 / e2;
                let g = z0 * z0 + z1 * z1 + z2 * z2 - 1.0;
                if g == 0.0 {
                    return 0.0;
                }
                let r0 = (e0 / e2).powi(2);
                let r1 = (e1 / e2).powi(2);
                let s = root3(r0, r1, z0, z1, z2, g);
                let x0 = r0 * y0 / (s + r0);
                let x1 = r1 * y1 / (s + r1);
                let x2 = y2 / (s + 1.0);
                ((x0 - y0).powi(2) + (x1 - y1).powi(2) + (x2 - y2).powi(2)).sqrt()
            } else {
                distance_ellipse(e1, e2, y1, y2)
            }
        } else if y0 > 0.0 {
            distance_ellipse(e0, e2, y0, y2)
        } else {
            (y2 - e2).abs()
        }
    } else {
        let denom0 = e0 * e0 - e2 * e2;
        let denom1 = e1 * e1 - e2 * e2;
        let numer0 = e0 * y0;
        let numer1 = e1 * y1;
        if numer0 < denom0 && numer1 < denom1 {
            let xde0 = numer0 / denom0;
            let xde1 = numer1 / denom1;
            let discr = 1.0 - xde0 * xde0 - xde1 * xde1;
            if discr > 0.0 {
                let x0 = e0 * xde0;
                let x1 = e1 * xde1;
                let x2 = e2 * discr.sqrt();
                return ((x0 - y0).powi(2) + (x1 - y1).powi(2) + x2 * x2).sqrt();
            }
        }
        distance_ellipse(e0, e1, y0, y1)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn disk_contact_from_centre() {
        let d = Domain::disk([0.0, 0.0], 1.0).unwrap();
        let t = d.first_contact(&[0.0, 0.0, 0.0], &[2.0, 0.0, 0.0]).unwrap();
        assert!((t - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ellipse_contact_along_diagonal() {
        let d = Domain::ellipse([0.0, 0.0], 2.0, 1.0).unwrap();
        let t = d.first_contact(&ZERO, &[1.0, 1.0, 0.0]).unwrap();
        assert!((t - 2.0 / 5f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn boundary_outward_gives_zero() {
        let d = Domain::disk([0.0, 0.0], 1.0).unwrap();
        assert_eq!(d.first_contact(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap(), 0.0);
        assert_eq!(d.first_contact(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).unwrap(), 0.0);
        let t = d.first_contact(&[1.0, 0.0, 0.0], &[-1.0, 0.0, 0.0]).unwrap();
        assert!((t - 2.0).abs() < 1e-15);
    }

    #[test]
    fn torus_never_contacts() {
        let d = Domain::torus(&[1.0, 1.0]).unwrap();
        assert!(d.first_contact(&[0.5, 0.5, 0.0], &[1.0, 0.3, 0.0]).unwrap().is_infinite());
        assert!(d.outward_normal(&[0.5, 0.5, 0.0]).is_err());
    }

    #[test]
    fn normal_requires_boundary() {
        let d = Domain::disk([0.0, 0.0], 1.0).unwrap();
        assert!(matches!(d.outward_normal(&[0.5, 0.0, 0.0]), Err(GeometryError::NotOnBoundary(_))));
        let n = d.outward_normal(&[0.0, 1.0, 0.0]).unwrap();
        assert!((n[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn invalid_shapes_rejected() {
        assert!(Domain::superellipse([0.0, 0.0], 1.0, 1.0, 3).is_err());
        assert!(Domain::disk([0.0, 0.0], -1.0).is_err());
        assert!(Domain::ellipse([0.0, 0.0], 1.0, f64::NAN).is_err());
    }

    #[test]
    fn zero_velocity_rejected() {
        let d = Domain::disk([0.0, 0.0], 1.0).unwrap();
        assert_eq!(d.first_contact(&ZERO, &ZERO), Err(GeometryError::ZeroVelocity));
    }

    #[test]
    fn superellipse_diameter_at_diagonal() {
        let d = Domain::superellipse([0.0, 0.0], 1.0, 1.0, 4).unwrap();
        let expect = 2.0 * 2f64.sqrt() * 2f64.powf(-0.25);
        assert!((d.diameter() - expect).abs() < 1e-12);
    }

    #[test]
    fn ellipse_distance_matches_brute_force() {
        let d = Domain::ellipse([0.3, -0.2], 2.0, 1.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let x = [rng.gen_range(-3.0..3.0), rng.gen_range(-2.0..2.0), 0.0];
            let brute = (0..20000)
                .map(|i| {
                    let s = i as f64 * std::f64::consts::TAU / 20000.0;
                    vector::dist(&d.boundary_point(s).0, &x)
                })
                .fold(f64::INFINITY, f64::min);
            let sd = d.signed_distance(&x).abs();
            assert!(sd <= brute + 1e-12 && brute - sd < 1e-6, "{sd} {brute}");
        }
    }

    #[test]
    fn ellipsoid_distance_matches_projection() {
        let d = Domain::ellipsoid([0.0, 0.0, 0.0], [3.0, 2.0, 1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let p = d.sample_boundary(&mut rng);
            let n = d.normal_unchecked(&p);
            let h = rng.gen_range(-0.3..0.3);
            let x = axpy(&p, h, &n);
            assert!((d.signed_distance(&x) - h).abs() < 1e-9, "{} {}", d.signed_distance(&x), h);
        }
    }

    #[test]
    fn superellipse_contact_lands_on_boundary() {
        let d = Domain::superellipse([0.0, 0.0], 1.5, 1.0, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let x = d.sample_interior(&mut rng);
            let v = random_unit(2, &mut rng);
            let t = d.first_contact(&x, &v).unwrap();
            let y = axpy(&x, t, &v);
            assert!(d.level(&y).abs() < 1e-13);
        }
    }

    #[test]
    fn superellipse_ray_through_the_vertex() {
        let d = Domain::superellipse([0.0, 0.0], 1.5, 1.0, 4).unwrap();
        let x = [1.4680583633640416, 0.5359292177779884, 0.0];
        let v = [-1.276143945075411, -0.23043823629364657, 0.0];
        let t = d.first_contact(&x, &v).unwrap();
        assert!((t - 2.325802175230828).abs() < 1e-12);
        assert!(d.on_boundary(&axpy(&x, t, &v)));
    }
}
