//! Fixed-size vectors for 2-D and 3-D phase space. Unused trailing
//! components are kept at zero so the same arithmetic serves both.

pub type Vec3 = [f64; 3];

pub const ZERO: Vec3 = [0.0; 3];

#[inline]
pub fn from_slice(s: &[f64]) -> Vec3 {
    let mut out = ZERO;
    for (o, v) in out.iter_mut().zip(s) {
        *o = *v;
    }
    out
}

#[inline]
pub fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn add(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn scale(a: &Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

/// `a + s * b`
#[inline]
pub fn axpy(a: &Vec3, s: f64, b: &Vec3) -> Vec3 {
    [a[0] + s * b[0], a[1] + s * b[1], a[2] + s * b[2]]
}

#[inline]
pub fn dist(a: &Vec3, b: &Vec3) -> f64 {
    norm(&sub(a, b))
}

/// Specular reflection `v - 2 (v.n) n` for a unit normal `n`.
#[inline]
pub fn reflect(v: &Vec3, n: &Vec3) -> Vec3 {
    axpy(v, -2.0 * dot(v, n), n)
}

/// Japanese bracket `sqrt(1 + x^2)`.
#[inline]
pub fn bracket(x: f64) -> f64 {
    (1.0 + x * x).sqrt()
}
