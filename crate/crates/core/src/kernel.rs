//! Collision kernels `B(|v - v*|, cos theta) = Phi(|v - v*|) b(cos theta)`.
//!
//! The angular part is described through its polar density
//! `b(cos theta) sin^{d-2} theta`, whose behaviour near `theta = 0` is
//! `b0 theta^{-(1+nu)}`. `nu < 0` is the cutoff case.
//!
//! Angular masses can be reported in two normalisations:
//! [`AngularMeasure::Polar`] integrates the polar density in `theta` alone,
//! [`AngularMeasure::Sphere`] integrates `b` against the surface measure of
//! `S^{d-1}`, which multiplies by `|S^{d-2}|`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::quadrature::{integrate, integrate_graded};
use crate::vector::bracket;

use std::f64::consts::PI;

const REL_TOL: f64 = 1e-11;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum KernelError {
    #[error("invalid exponent: {0}")]
    InvalidExponent(String),
    #[error("angular profile does not match the declared asymptote: {0}")]
    AsymptoteMismatch(String),
    #[error("invalid kernel parameter: {0}")]
    InvalidParameter(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhiKind {
    /// `Phi(z) = c_phi |z|^gamma`
    Power,
    /// `Phi(z) = c_phi 2^{(-gamma)^+/2} <z>^gamma`: bounded by `[c_phi, C_phi]` on
    /// the unit ball and comparable to `|z|^gamma` outside it.
    Mollified,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AngularProfile {
    /// `b = value`.
    Constant { value: f64 },
    /// `b(cos theta) sin^{d-2} theta = b0 theta^{-1-nu} cos^2(theta/2)`.
    PowerLaw { nu: f64, b0: f64 },
}

impl AngularProfile {
    /// Exponent and prefactor of the small-angle law implied by the profile.
    pub fn natural_asymptote(&self, dim: usize) -> (f64, f64) {
        match *self {
            AngularProfile::Constant { value } => (1.0 - dim as f64, value),
            AngularProfile::PowerLaw { nu, b0 } => (nu, b0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AngularMeasure {
    #[default]
    Polar,
    Sphere,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub dim: usize,
    pub gamma: f64,
    pub phi_kind: PhiKind,
    pub c_phi: f64,
    pub big_c_phi: f64,
    pub profile: AngularProfile,
    /// Declared small-angle exponent; defaults to the profile's own.
    pub nu: Option<f64>,
    /// Declared small-angle prefactor; defaults to the profile's own.
    pub b0: Option<f64>,
}

impl KernelParams {
    pub fn hard_spheres() -> Self {
        KernelParams {
            dim: 3,
            gamma: 1.0,
            phi_kind: PhiKind::Power,
            c_phi: 1.0,
            big_c_phi: 1.0,
            profile: AngularProfile::Constant { value: 1.0 / (4.0 * PI) },
            nu: None,
            b0: None,
        }
    }

    /// `Phi = |z|` with a constant angular kernel of unit sphere mass in
    /// dimension `dim`; `hard_spheres` up to normalisation when `dim = 3`.
    pub fn hard_spheres_in(dim: usize) -> Self {
        KernelParams {
            dim,
            profile: AngularProfile::Constant { value: 1.0 / sphere_area(dim) },
            ..Self::hard_spheres()
        }
    }

    pub fn maxwellian_cutoff(dim: usize) -> Self {
        KernelParams {
            dim,
            gamma: 0.0,
            phi_kind: PhiKind::Power,
            c_phi: 1.0,
            big_c_phi: 1.0,
            profile: AngularProfile::Constant { value: 1.0 / sphere_area(dim) },
            nu: None,
            b0: None,
        }
    }

    pub fn soft(dim: usize, gamma: f64) -> Self {
        KernelParams {
            dim,
            gamma,
            phi_kind: PhiKind::Mollified,
            c_phi: 1.0,
            big_c_phi: 2f64.powf(f64::abs(gamma) / 2.0),
            profile: AngularProfile::Constant { value: 1.0 / sphere_area(dim) },
            nu: None,
            b0: None,
        }
    }

    pub fn non_cutoff(dim: usize, gamma: f64, nu: f64, b0: f64) -> Self {
        KernelParams {
            dim,
            gamma,
            phi_kind: PhiKind::Power,
            c_phi: 1.0,
            big_c_phi: 1.0,
            profile: AngularProfile::PowerLaw { nu, b0 },
            nu: None,
            b0: None,
        }
    }

    /// Named preset lookup.
    pub fn preset(name: &str, dim: usize) -> Option<Self> {
        match name {
            "hard_spheres" if dim == 3 => Some(Self::hard_spheres()),
            "hard_spheres" => Some(Self::hard_spheres_in(dim)),
            "maxwellian_cutoff" => Some(Self::maxwellian_cutoff(dim)),
            "soft" => Some(Self::soft(dim, -1.0)),
            "non_cutoff" => Some(Self::non_cutoff(dim, 0.0, 1.0, 1.0)),
            _ => None,
        }
    }
}

/// Surface area of the unit sphere `S^{n-1}` in `R^n`.
pub fn sphere_area(n: usize) -> f64 {
    match n {
        1 => 2.0,
        2 => 2.0 * PI,
        3 => 4.0 * PI,
        _ => 2.0 * PI.powf(n as f64 / 2.0) / gamma_fn(n as f64 / 2.0),
    }
}

fn gamma_fn(x: f64) -> f64 {
    // only half-integers and integers are needed
    if (x - x.round()).abs() < 1e-12 {
        (1..x.round() as u64).map(|k| k as f64).product()
    } else {
        let mut g = PI.sqrt();
        let mut y = 0.5;
        while y < x - 1e-12 {
            g *= y;
            y += 1.0;
        }
        g
    }
}

/// Validated collision kernel.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Kernel {
    pub params: KernelParams,
    pub nu: f64,
    pub b0: f64,
}

pub fn build_kernel(params: KernelParams) -> Result<Kernel, KernelError> {
    let d = params.dim;
    if d != 2 && d != 3 {
        return Err(KernelError::InvalidParameter(format!("dimension must be 2 or 3, got {d}")));
    }
    let g = params.gamma;
    if !(g > -(d as f64) && g <= 1.0) {
        return Err(KernelError::InvalidExponent(format!("gamma = {g} must lie in (-{d}, 1]")));
    }
    if !(params.c_phi > 0.0 && params.big_c_phi >= params.c_phi && params.big_c_phi.is_finite()) {
        return Err(KernelError::InvalidParameter(format!(
            "need 0 < c_phi <= C_phi, got {} and {}",
            params.c_phi, params.big_c_phi
        )));
    }
    let (nat_nu, nat_b0) = params.profile.natural_asymptote(d);
    match params.profile {
        AngularProfile::Constant { value } if !(value > 0.0 && value.is_finite()) => {
            return Err(KernelError::InvalidParameter(format!("constant b must be positive, got {value}")))
        }
        AngularProfile::PowerLaw { b0, .. } if !(b0 > 0.0 && b0.is_finite()) => {
            return Err(KernelError::InvalidParameter(format!("b0 must be positive, got {b0}")))
        }
        _ => {}
    }
    let nu = params.nu.unwrap_or(nat_nu);
    let b0 = params.b0.unwrap_or(nat_b0);
    if !(nat_nu < 2.0) || !(nu < 2.0) {
        return Err(KernelError::InvalidExponent(format!("nu = {nu} must be below 2")));
    }
    let k = Kernel { params, nu, b0 };
    // declared asymptote against the profile at a small angle
    let theta = 1e-4;
    let ratio = k.polar_density(theta) * theta.powf(1.0 + nu) / b0;
    if !((ratio - 1.0).abs() <= 0.01) {
        return Err(KernelError::AsymptoteMismatch(format!(
            "b sin^(d-2) theta * theta^(1+nu) / b0 = {ratio} at theta = 1e-4"
        )));
    }
    // sandwich on a log-spaced sample; the mollified form is compared with a
    // constant on the unit ball
    for i in 0..=120 {
        let z = 10f64.powf(-3.0 + 6.0 * i as f64 / 120.0);
        let p = match k.params.phi_kind {
            PhiKind::Mollified if z < 1.0 => k.phi(z),
            _ => k.phi(z) / z.powf(g),
        };
        if p < k.params.c_phi * (1.0 - 1e-12) || p > k.params.big_c_phi * (1.0 + 1e-12) {
            return Err(KernelError::InvalidParameter(format!("Phi({z}) / |z|^gamma = {p} leaves [c_phi, C_phi]")));
        }
    }
    Ok(k)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AngularMasses {
    pub eps: f64,
    /// Mass of `b 1_{theta >= eps}`.
    pub n_co: f64,
    /// Mass of `b 1_{theta <= eps}`, infinite for non-cutoff kernels.
    pub n_nco: f64,
    /// Second angular moment `int b 1_{theta <= eps} theta^2`.
    pub m_nco: f64,
    /// `inf b(cos theta)` over `theta in [pi/4, 3pi/4]`.
    pub l_b: f64,
}

impl Kernel {
    pub fn dim(&self) -> usize {
        self.params.dim
    }

    pub fn gamma(&self) -> f64 {
        self.params.gamma
    }

    pub fn gamma_plus(&self) -> f64 {
        self.params.gamma.max(0.0)
    }

    /// `(2 + gamma)^+`.
    pub fn gamma_tilde(&self) -> f64 {
        (2.0 + self.params.gamma).max(0.0)
    }

    pub fn is_cutoff(&self) -> bool {
        self.nu < 0.0
    }

    pub fn phi(&self, z: f64) -> f64 {
        let p = &self.params;
        match p.phi_kind {
            PhiKind::Power => p.c_phi * z.powf(p.gamma),
            PhiKind::Mollified => p.c_phi * 2f64.powf(0.5 * (-p.gamma).max(0.0)) * bracket(z).powf(p.gamma),
        }
    }

    /// `b(cos theta) sin^{d-2} theta`.
    pub fn polar_density(&self, theta: f64) -> f64 {
        match self.params.profile {
            AngularProfile::Constant { value } => value * theta.sin().powi(self.dim() as i32 - 2),
            AngularProfile::PowerLaw { nu, b0 } => b0 * theta.powf(-1.0 - nu) * (0.5 * theta).cos().powi(2),
        }
    }

    /// `b(cos theta)`.
    pub fn b(&self, theta: f64) -> f64 {
        match self.params.profile {
            AngularProfile::Constant { value } => value,
            AngularProfile::PowerLaw { .. } => self.polar_density(theta) / theta.sin().powi(self.dim() as i32 - 2),
        }
    }

    fn measure_factor(&self, m: AngularMeasure) -> f64 {
        match m {
            AngularMeasure::Polar => 1.0,
            AngularMeasure::Sphere => sphere_area(self.dim() - 1),
        }
    }

    /// Angular mass of `b 1_{theta >= eps}`; `eps = 0` gives the full mass.
    pub fn n_co(&self, eps: f64, m: AngularMeasure) -> f64 {
        let f = |t: f64| self.polar_density(t);
        let base = if eps == 0.0 {
            if !self.is_cutoff() {
                return f64::INFINITY;
            }
            integrate_graded(f, 0.0, PI, REL_TOL)
        } else if eps >= PI {
            0.0
        } else if self.is_cutoff() {
            integrate(f, eps, PI, REL_TOL * integrate(f, eps, PI, 1e-6).abs().max(1e-300))
        } else {
            integrate_graded(f, eps, PI, REL_TOL)
        };
        base * self.measure_factor(m)
    }

    /// Angular mass of `b 1_{theta <= eps}`.
    pub fn n_nco(&self, eps: f64, m: AngularMeasure) -> f64 {
        if eps <= 0.0 {
            return 0.0;
        }
        if !self.is_cutoff() {
            return f64::INFINITY;
        }
        integrate_graded(|t: f64| self.polar_density(t), 0.0, eps.min(PI), REL_TOL) * self.measure_factor(m)
    }

    /// `int b 1_{theta <= eps} theta^2`.
    pub fn m_nco(&self, eps: f64, m: AngularMeasure) -> f64 {
        if eps <= 0.0 {
            return 0.0;
        }
        integrate_graded(|t: f64| self.polar_density(t) * t * t, 0.0, eps.min(PI), REL_TOL) * self.measure_factor(m)
    }

    /// `inf b(cos theta)` over `[pi/4, 3 pi/4]`, from a dense sample.
    pub fn l_b(&self) -> f64 {
        (0..=512).map(|i| self.b(PI / 4.0 + 0.5 * PI * i as f64 / 512.0)).fold(f64::INFINITY, f64::min)
    }

    pub fn angular_masses(&self, eps: f64, m: AngularMeasure) -> AngularMasses {
        AngularMasses {
            eps,
            n_co: self.n_co(eps, m),
            n_nco: self.n_nco(eps, m),
            m_nco: self.m_nco(eps, m),
            l_b: self.l_b(),
        }
    }

    /// Leading small-`eps` behaviour of `n_co`: `b0 eps^{-nu} / nu`, or
    /// `b0 |log eps|` when `nu = 0`. Polar normalisation.
    pub fn n_co_asymptote(&self, eps: f64) -> f64 {
        if self.nu == 0.0 {
            self.b0 * eps.ln().abs()
        } else {
            self.b0 * eps.powf(-self.nu) / self.nu
        }
    }

    /// Leading small-`eps` behaviour of `m_nco`: `b0 eps^{2-nu} / (2-nu)`.
    pub fn m_nco_asymptote(&self, eps: f64) -> f64 {
        self.b0 * eps.powf(2.0 - self.nu) / (2.0 - self.nu)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hard_sphere_mass_is_one_on_the_sphere() {
        let k = build_kernel(KernelParams::hard_spheres()).unwrap();
        assert!(k.is_cutoff());
        assert!((k.n_co(0.0, AngularMeasure::Sphere) - 1.0).abs() < 1e-12);
        assert!((k.n_co(0.0, AngularMeasure::Polar) - 1.0 / (2.0 * PI)).abs() < 1e-12);
        assert!((k.l_b() - 1.0 / (4.0 * PI)).abs() < 1e-15);
    }

    #[test]
    fn exponent_range_is_enforced() {
        let mut p = KernelParams::hard_spheres();
        p.gamma = -3.5;
        assert!(matches!(build_kernel(p), Err(KernelError::InvalidExponent(_))));
        let p = KernelParams::non_cutoff(3, 0.0, 2.5, 1.0);
        assert!(matches!(build_kernel(p), Err(KernelError::InvalidExponent(_))));
    }

    #[test]
    fn declared_asymptote_must_match() {
        let mut p = KernelParams::non_cutoff(3, 0.0, 1.0, 1.0);
        p.b0 = Some(1.1);
        assert!(matches!(build_kernel(p.clone()), Err(KernelError::AsymptoteMismatch(_))));
        p.b0 = Some(1.0);
        assert!(build_kernel(p).is_ok());
    }

    #[test]
    fn split_is_consistent() {
        let k = build_kernel(KernelParams::maxwellian_cutoff(3)).unwrap();
        for eps in [0.01, 0.3, 1.0] {
            let full = k.n_co(0.0, AngularMeasure::Sphere);
            let sum = k.n_co(eps, AngularMeasure::Sphere) + k.n_nco(eps, AngularMeasure::Sphere);
            assert!((full - sum).abs() < 1e-10 * full);
        }
    }

    #[test]
    fn mollified_soft_kernel_sandwich() {
        let k = build_kernel(KernelParams::soft(3, -1.0)).unwrap();
        assert!(k.phi(0.0).is_finite());
        let mut p = KernelParams::soft(3, -1.0);
        p.big_c_phi = 1.2;
        assert!(build_kernel(p).is_err());
        let mut p = KernelParams::hard_spheres();
        p.phi_kind = PhiKind::Mollified;
        p.big_c_phi = 2f64.sqrt();
        assert!(build_kernel(p).is_ok());
    }

    #[test]
    fn cutoff_moment_vanishes() {
        let k = build_kernel(KernelParams::hard_spheres()).unwrap();
        assert!(k.m_nco(1e-3, AngularMeasure::Polar) < 1e-9);
    }

    #[test]
    fn small_angle_mass_follows_power_law() {
        for nu in [0.5, 1.0, 1.5] {
            let k = build_kernel(KernelParams::non_cutoff(3, 0.0, nu, 1.0)).unwrap();
            let eps: f64 = 1e-3;
            let scaled = k.n_co(eps, AngularMeasure::Polar) * eps.powf(nu);
            assert!((scaled * nu - 1.0).abs() < 0.05, "nu = {nu}: {scaled}");
        }
        let k = build_kernel(KernelParams::non_cutoff(3, 0.0, 0.0, 1.0)).unwrap();
        let r = k.n_co(1e-4, AngularMeasure::Polar) / k.n_co_asymptote(1e-4);
        assert!((r - 1.0).abs() < 0.10, "{r}");
    }
}
