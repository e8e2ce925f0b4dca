//! Free transport with specular reflection, solved pointwise along the
//! backward rebound chain, and a fixed-grid L2 quadrature for conservation checks.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::characteristics::{final_rebound, CharacteristicError, DEFAULT_MAX_REBOUNDS};
use crate::geometry::Domain;
use crate::vector::{self, axpy, norm, Vec3, ZERO};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("quadrature too coarse: estimated relative error {estimate:e} exceeds {tolerance:e}")]
    QuadratureTooCoarse { estimate: f64, tolerance: f64 },
    #[error("invalid quadrature: {0}")]
    InvalidQuadrature(String),
    #[error(transparent)]
    Characteristic(#[from] CharacteristicError),
}

/// Initial datum `u0(x, v)`.
pub trait PhaseFunction: Sync {
    fn eval(&self, x: &Vec3, v: &Vec3) -> f64;
}

impl<F: Fn(&Vec3, &Vec3) -> f64 + Sync> PhaseFunction for F {
    fn eval(&self, x: &Vec3, v: &Vec3) -> f64 {
        self(x, v)
    }
}

/// Named initial data with a product structure in `x` and `v`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InitialData {
    /// `exp(-|x-x0|^2/(2 sx^2) - |v-v0|^2/(2 sv^2))`
    Gaussian { x0: Vec3, sx: f64, v0: Vec3, sv: f64 },
    /// `1_{B(x0,rx)}(x) 1_{B(v0,rv)}(v)`
    Indicator { x0: Vec3, rx: f64, v0: Vec3, rv: f64 },
    /// `(1-|x-x0|^2/rx^2)_+^k (1-|v-v0|^2/rv^2)_+^k`
    Polynomial { x0: Vec3, rx: f64, v0: Vec3, rv: f64, k: u32 },
}

impl InitialData {
    /// Radius of a centred velocity ball containing the velocity support.
    pub fn velocity_support(&self) -> f64 {
        match self {
            InitialData::Gaussian { v0, sv, .. } => norm(v0) + 8.0 * sv,
            InitialData::Indicator { v0, rv, .. } | InitialData::Polynomial { v0, rv, .. } => norm(v0) + rv,
        }
    }
}

impl PhaseFunction for InitialData {
    fn eval(&self, x: &Vec3, v: &Vec3) -> f64 {
        match self {
            InitialData::Gaussian { x0, sx, v0, sv } => {
                let dx = vector::sub(x, x0);
                let dv = vector::sub(v, v0);
                (-vector::dot(&dx, &dx) / (2.0 * sx * sx) - vector::dot(&dv, &dv) / (2.0 * sv * sv)).exp()
            }
            InitialData::Indicator { x0, rx, v0, rv } => {
                if vector::dist(x, x0) <= *rx && vector::dist(v, v0) <= *rv {
                    1.0
                } else {
                    0.0
                }
            }
            InitialData::Polynomial { x0, rx, v0, rv, k } => {
                let a = 1.0 - vector::dot(&vector::sub(x, x0), &vector::sub(x, x0)) / (rx * rx);
                let b = 1.0 - vector::dot(&vector::sub(v, v0), &vector::sub(v, v0)) / (rv * rv);
                if a <= 0.0 || b <= 0.0 {
                    0.0
                } else {
                    (a * b).powi(*k as i32)
                }
            }
        }
    }
}

/// `u(t, x, v) = u0(x_fin - (t - t_fin) v_fin, v_fin)`.
pub fn evolve_pointwise<U: PhaseFunction + ?Sized>(
    domain: &Domain,
    u0: &U,
    t: f64,
    x: &Vec3,
    v: &Vec3,
) -> Result<f64, TransportError> {
    if norm(v) == 0.0 {
        return Ok(u0.eval(x, v));
    }
    if domain.is_torus() {
        return Ok(u0.eval(&domain.wrap(&axpy(x, -t, v)), v));
    }
    let res = final_rebound(domain, t, x, v, DEFAULT_MAX_REBOUNDS)?;
    Ok(u0.eval(&res.foot(t), &res.v_fin))
}

/// Tensor grid sizes for the L2 quadrature. Velocities are restricted to the
/// centred ball of radius `v_radius`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadratureSpec {
    pub nx: usize,
    pub nv: usize,
    pub v_radius: f64,
    /// Largest accepted relative discrepancy between this grid and the half grid.
    pub tolerance: f64,
}

/// Weighted nodes of a cut-cell midpoint rule.
#[derive(Clone, Debug)]
pub struct CutCellRule {
    pub nodes: Vec<Vec3>,
    pub weights: Vec<f64>,
}

const SUBCELL: usize = 8;

impl CutCellRule {
    /// Midpoint rule on `n^d` cells of the box `[lo, hi]`. Cells crossing the
    /// region `inside` get the covered fraction as weight and the centroid of
    /// the covered part as node.
    pub fn new<F: Fn(&Vec3) -> bool>(dim: usize, lo: &Vec3, hi: &Vec3, n: usize, inside: F) -> Self {
        let mut h = ZERO;
        for i in 0..dim {
            h[i] = (hi[i] - lo[i]) / n as f64;
        }
        let cell_vol: f64 = h[..dim].iter().product();
        let total = n.pow(dim as u32);
        let mut nodes = Vec::new();
        let mut weights = Vec::new();
        let sub_total = SUBCELL.pow(dim as u32);
        for idx in 0..total {
            let mut corner = ZERO;
            let mut rem = idx;
            for i in 0..dim {
                corner[i] = lo[i] + (rem % n) as f64 * h[i];
                rem /= n;
            }
            let mut centre = corner;
            for i in 0..dim {
                centre[i] += 0.5 * h[i];
            }
            // quick accept/reject with the corners
            let mut count_in = 0;
            for c in 0..(1 << dim) {
                let mut p = corner;
                for i in 0..dim {
                    if c >> i & 1 == 1 {
                        p[i] += h[i];
                    }
                }
                if inside(&p) {
                    count_in += 1;
                }
            }
            if count_in == 1 << dim && inside(&centre) {
                nodes.push(centre);
                weights.push(cell_vol);
                continue;
            }
            let mut acc = ZERO;
            let mut k = 0usize;
            for s in 0..sub_total {
                let mut p = corner;
                let mut r = s;
                for i in 0..dim {
                    p[i] += ((r % SUBCELL) as f64 + 0.5) * h[i] / SUBCELL as f64;
                    r /= SUBCELL;
                }
                if inside(&p) {
                    acc = vector::add(&acc, &p);
                    k += 1;
                }
            }
            if k > 0 {
                nodes.push(vector::scale(&acc, 1.0 / k as f64));
                weights.push(cell_vol * k as f64 / sub_total as f64);
            }
        }
        CutCellRule { nodes, weights }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct L2Report {
    /// `(t, ||u(t)||^2)` rows.
    pub rows: Vec<(f64, f64)>,
    /// Relative discrepancy of `||u0||^2` between this grid and the half grid.
    pub quadrature_error: f64,
}

impl L2Report {
    /// Largest relative deviation from the initial squared norm.
    pub fn max_relative_drift(&self) -> f64 {
        let n0 = self.rows[0].1;
        self.rows.iter().map(|(_, n)| ((n - n0) / n0).abs()).fold(0.0, f64::max)
    }
}

fn phase_rules(domain: &Domain, spec: &QuadratureSpec, refine: usize) -> (CutCellRule, CutCellRule) {
    let d = domain.dim();
    let (lo, hi) = domain.bounding_box();
    let xr = CutCellRule::new(d, &lo, &hi, spec.nx / refine, |p| domain.level(p) <= 0.0);
    let mut vlo = ZERO;
    let mut vhi = ZERO;
    for i in 0..d {
        vlo[i] = -spec.v_radius;
        vhi[i] = spec.v_radius;
    }
    let r2 = spec.v_radius * spec.v_radius;
    let vr = CutCellRule::new(d, &vlo, &vhi, spec.nv / refine, |p| vector::dot(p, p) <= r2);
    (xr, vr)
}

fn squared_norm<U: PhaseFunction + ?Sized>(
    domain: &Domain,
    u0: &U,
    t: f64,
    xr: &CutCellRule,
    vr: &CutCellRule,
) -> Result<f64, TransportError> {
    let partial: Result<Vec<f64>, TransportError> = xr
        .nodes
        .par_iter()
        .zip(&xr.weights)
        .map(|(x, wx)| {
            let mut acc = 0.0;
            for (v, wv) in vr.nodes.iter().zip(&vr.weights) {
                let u = evolve_pointwise(domain, u0, t, x, v)?;
                acc += wv * u * u;
            }
            Ok(acc * wx)
        })
        .collect();
    Ok(partial?.iter().sum())
}

/// Squared L2 norm of `u(t)` on a fixed phase grid, for each requested time.
pub fn l2_report<U: PhaseFunction + ?Sized>(
    domain: &Domain,
    u0: &U,
    times: &[f64],
    spec: &QuadratureSpec,
) -> Result<L2Report, TransportError> {
    if spec.nx < 4 || spec.nv < 4 || !spec.nx.is_multiple_of(2) || !spec.nv.is_multiple_of(2) || spec.v_radius <= 0.0 {
        return Err(TransportError::InvalidQuadrature(format!(
            "need even nx, nv >= 4 and positive v_radius, got {spec:?}"
        )));
    }
    let (xr, vr) = phase_rules(domain, spec, 1);
    let (xc, vc) = phase_rules(domain, spec, 2);
    let fine = squared_norm(domain, u0, 0.0, &xr, &vr)?;
    let coarse = squared_norm(domain, u0, 0.0, &xc, &vc)?;
    let quadrature_error = if fine > 0.0 { ((fine - coarse) / fine).abs() } else { 0.0 };
    if quadrature_error > spec.tolerance {
        return Err(TransportError::QuadratureTooCoarse { estimate: quadrature_error, tolerance: spec.tolerance });
    }
    let mut rows = Vec::with_capacity(times.len());
    for &t in times {
        let n = if t == 0.0 { fine } else { squared_norm(domain, u0, t, &xr, &vr)? };
        rows.push((t, n));
    }
    Ok(L2Report { rows, quadrature_error })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diameter_orbit_value() {
        let d = Domain::disk([0.0, 0.0], 1.0).unwrap();
        let u0 = |x: &Vec3, v: &Vec3| x[0] + 10.0 * v[0];
        // backward from (0, e1) for t = 2: one rebound at (-1, 0), foot (0, 0) with v = -e1
        let u = evolve_pointwise(&d, &u0, 2.0, &[0.0, 0.0, 0.0], &[1.0, 0.0, 0.0]).unwrap();
        assert!((u + 10.0).abs() < 1e-13);
    }

    #[test]
    fn zero_velocity_is_stationary() {
        let d = Domain::disk([0.0, 0.0], 1.0).unwrap();
        let u0 = |x: &Vec3, _: &Vec3| x[0];
        assert_eq!(evolve_pointwise(&d, &u0, 7.0, &[0.3, 0.0, 0.0], &ZERO).unwrap(), 0.3);
    }

    #[test]
    fn cut_cell_rule_measures_the_disk() {
        let lo = [-1.0, -1.0, 0.0];
        let hi = [1.0, 1.0, 0.0];
        let r = CutCellRule::new(2, &lo, &hi, 64, |p| p[0] * p[0] + p[1] * p[1] <= 1.0);
        let area: f64 = r.weights.iter().sum();
        assert!((area - std::f64::consts::PI).abs() < 2e-4);
    }

    #[test]
    fn coarse_grid_is_rejected() {
        let d = Domain::disk([0.0, 0.0], 1.0).unwrap();
        let u0 = InitialData::Indicator { x0: [0.1, 0.0, 0.0], rx: 0.3, v0: ZERO, rv: 0.7 };
        let spec = QuadratureSpec { nx: 8, nv: 8, v_radius: 1.0, tolerance: 1e-6 };
        assert!(matches!(l2_report(&d, &u0, &[0.0], &spec), Err(TransportError::QuadratureTooCoarse { .. })));
    }
}
