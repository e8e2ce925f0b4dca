//! Explicit lower-bound recursions: upheaval point, spreading away from and
//! along the boundary, the centred ball, and the final Maxwellian or
//! exponential tail.
//!
//! Every amplitude is carried as a natural logarithm. The recursions square
//! the amplitude at each step, so the bounds leave the `f64` range after a
//! few dozen steps while their logarithms stay representable.

use std::collections::BTreeMap;
use std::f64::consts::{LN_2, PI};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::Domain;
use crate::grazing::{self, GrazingOptions};
use crate::kernel::{AngularMeasure, Kernel, PhiKind};
use crate::quadrature::integrate;
use crate::vector::{self, norm, Vec3};

/// Hard cap on every iteration count.
pub const ITERATION_CAP: usize = 10_000;
/// Growth ratio of the upheaval and far-spreading radii.
pub const FAR_RATIO: f64 = 1.060_660_171_779_821_2;
/// Largest `xi` for which the grazing radii keep growing from `r_0 = delta_V`.
pub const XI_GRAZE_GROWTH: f64 = 0.116_116_523_516_815_7;

const CHEB_NODES: usize = 24;
const MIN_R_SQUARED: f64 = 0.999;

#[derive(Debug, Error)]
pub enum CertificateError {
    #[error("missing bound: {0}")]
    MissingBound(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("no convergence: {0}")]
    NonConvergence(String),
    #[error("grazing constants unavailable: {0}")]
    GrazingConstantsMissing(String),
    #[error("fit rejected: R^2 = {0}")]
    FitRejected(f64),
    #[error("invalid schedule: {0}")]
    ScheduleInvalid(String),
}

type Result<T> = std::result::Result<T, CertificateError>;

fn ln_bracket(x: f64) -> f64 {
    0.5 * x.mul_add(x, 1.0).ln()
}

fn ball_volume(dim: usize, r: f64) -> f64 {
    match dim {
        2 => PI * r * r,
        _ => 4.0 / 3.0 * PI * r * r * r,
    }
}

/// Hydrodynamic and regularity bounds on the solution.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    /// `sup e_f(t, x)`.
    pub e_f: Option<f64>,
    /// Weighted energy bound with exponent `gamma~`.
    pub eprime_f: Option<f64>,
    /// Local `L^p` bound, required for soft potentials.
    pub lp_f: Option<f64>,
    pub p_gamma: Option<f64>,
    /// `W^{2,inf}` bound, required without cutoff.
    pub w_f: Option<f64>,
    pub mass: Option<f64>,
    pub energy: Option<f64>,
    /// Radius of a ball centred at the origin containing the domain.
    pub r_x: Option<f64>,
}

/// Bounds after the per-kernel completeness check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CheckedBounds {
    pub e_f: f64,
    pub eprime_f: f64,
    pub lp_f: f64,
    pub w_f: f64,
    pub mass: f64,
    pub energy: f64,
    pub r_x: f64,
}

impl Bounds {
    pub fn validate(&self, kernel: &Kernel) -> Result<CheckedBounds> {
        fn need(v: Option<f64>, name: &str) -> Result<f64> {
            match v {
                Some(x) if x > 0.0 && x.is_finite() => Ok(x),
                Some(x) => {
                    Err(CertificateError::InvalidParameter(format!("{name} must be positive and finite, got {x}")))
                }
                None => Err(CertificateError::MissingBound(name.into())),
            }
        }
        let d = kernel.dim() as f64;
        let gamma = kernel.gamma();
        let mut out = CheckedBounds {
            e_f: need(self.e_f, "e_f")?,
            eprime_f: 0.0,
            lp_f: 0.0,
            w_f: 0.0,
            mass: need(self.mass, "mass")?,
            energy: need(self.energy, "energy")?,
            r_x: need(self.r_x, "r_x")?,
        };
        if gamma < 0.0 && kernel.params.phi_kind == PhiKind::Power {
            out.lp_f = need(self.lp_f, "lp_f")?;
            let p = need(self.p_gamma, "p_gamma")?;
            if p <= d / (d + gamma) {
                return Err(CertificateError::InvalidParameter(format!(
                    "p_gamma must exceed d/(d+gamma) = {}, got {p}",
                    d / (d + gamma)
                )));
            }
        }
        if !kernel.is_cutoff() {
            out.eprime_f = need(self.eprime_f, "eprime_f")?;
            out.w_f = need(self.w_f, "w_f")?;
        }
        Ok(out)
    }
}

/// Optional overrides of the unspecified constants, usually produced by the
/// collision oracle.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Calibration {
    /// Gain spreading constant.
    pub cst_q: Option<f64>,
    /// Loss bound constant.
    pub cst_l: Option<f64>,
    /// Singular-part bound constant (non-cutoff).
    pub cst_s: Option<f64>,
    /// Remainder bound constant (non-cutoff).
    pub cst_q1: Option<f64>,
    pub c_e: Option<f64>,
    pub c_tilde_f: Option<f64>,
    /// Factor of the logarithmic penalty when `nu = 0`.
    pub cst_log: Option<f64>,
}

/// Constants in use, with the names of those that came from a calibration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Constants {
    pub cst_q: f64,
    pub cst_l: f64,
    pub cst_s: f64,
    pub cst_q1: f64,
    pub c_e: f64,
    pub c_tilde_f: f64,
    pub cst_log: f64,
    pub calibrated: Vec<String>,
    pub defaulted: Vec<String>,
}

impl Constants {
    pub fn from_calibration(c: &Calibration) -> Result<Self> {
        let mut calibrated = Vec::new();
        let mut defaulted = Vec::new();
        let mut pick = |v: Option<f64>, name: &str| -> Result<f64> {
            match v {
                Some(x) if x > 0.0 && x.is_finite() => {
                    calibrated.push(name.to_string());
                    Ok(x)
                }
                Some(x) => Err(CertificateError::InvalidParameter(format!("{name} must be positive, got {x}"))),
                None => {
                    defaulted.push(name.to_string());
                    Ok(1.0)
                }
            }
        };
        Ok(Constants {
            cst_q: pick(c.cst_q, "cst_q")?,
            cst_l: pick(c.cst_l, "cst_l")?,
            cst_s: pick(c.cst_s, "cst_s")?,
            cst_q1: pick(c.cst_q1, "cst_q1")?,
            c_e: pick(c.c_e, "c_e")?,
            c_tilde_f: pick(c.c_tilde_f, "c_tilde_f")?,
            cst_log: pick(c.cst_log, "cst_log")?,
            calibrated,
            defaulted,
        })
    }
}

/// Kernel and bound dependent rates shared by every stage.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Rates {
    pub dim: usize,
    pub gamma: f64,
    pub gamma_plus: f64,
    pub gamma_tilde: f64,
    pub nu: f64,
    pub cutoff: bool,
    /// `ln(cst_q l_b c_phi)`, halved without cutoff.
    pub ln_c_q: f64,
    /// Loss rate `C_L`.
    pub c_l: f64,
    /// Remainder rate `C_f` (non-cutoff).
    pub c_f: f64,
    /// Small-angle prefactor in the sphere normalisation.
    pub b0_sphere: f64,
    pub constants: Constants,
}

impl Rates {
    /// `eps0` splits a non-cutoff kernel into its cutoff and grazing parts.
    pub fn new(kernel: &Kernel, bounds: &CheckedBounds, constants: Constants, eps0: f64) -> Result<Self> {
        let p = &kernel.params;
        let cutoff = kernel.is_cutoff();
        let lb = kernel.l_b();
        if !(lb > 0.0) {
            return Err(CertificateError::InvalidParameter(format!("l_b must be positive, got {lb}")));
        }
        let e_eff = bounds.e_f + bounds.lp_f;
        let (ln_c_q, c_l, c_f) = if cutoff {
            let nb = kernel.n_co(0.0, AngularMeasure::Sphere);
            ((constants.cst_q * lb * p.c_phi).ln(), constants.cst_l * nb * p.big_c_phi * e_eff, 0.0)
        } else {
            if !(eps0 > 0.0 && eps0 < PI) {
                return Err(CertificateError::InvalidParameter(format!("eps0 must lie in (0, pi), got {eps0}")));
            }
            let nb = kernel.n_co(eps0, AngularMeasure::Sphere);
            let mb = kernel.m_nco(eps0, AngularMeasure::Sphere);
            (
                (0.5 * constants.cst_q * lb * p.c_phi).ln(),
                constants.cst_l * nb * p.big_c_phi * e_eff + constants.cst_s * mb * p.big_c_phi * bounds.e_f,
                constants.cst_q1 * p.big_c_phi * bounds.eprime_f * bounds.w_f,
            )
        };
        let dim = kernel.dim();
        Ok(Rates {
            dim,
            gamma: kernel.gamma(),
            gamma_plus: kernel.gamma_plus(),
            gamma_tilde: kernel.gamma_tilde(),
            nu: kernel.nu,
            cutoff,
            ln_c_q,
            c_l,
            c_f,
            b0_sphere: kernel.b0 * crate::kernel::sphere_area(dim - 1),
            constants,
        })
    }

    fn damping(&self, radius: f64) -> f64 {
        self.c_l * (self.gamma_plus * ln_bracket(radius)).exp()
    }
}

/// One line of the audit table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditRow {
    pub stage: String,
    pub n: usize,
    pub r: f64,
    pub log_a: f64,
    /// `ln eps_n` for the non-cutoff tail.
    pub log_eps: Option<f64>,
    /// `ln` of the time slice or window width used at this step.
    pub log_step: Option<f64>,
}

impl AuditRow {
    fn new(stage: &str, n: usize, r: f64, log_a: f64) -> Self {
        AuditRow { stage: stage.into(), n, r, log_a, log_eps: None, log_step: None }
    }
}

/// The upheaval recursion `alpha_{n+1}(t) = C_Q r_n^{N+gamma} 4^{1-N/2}
/// int_0^{min(t, T_n)} e^{-s C_L <2 r_n + |v1|>^{gamma+}} alpha_n(s)^2 ds`
/// with `r_n = delta FAR_RATIO^n` and `T_n = delta / (2^{n+2} r_n)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AlphaRecursion {
    pub dim: usize,
    pub gamma: f64,
    pub gamma_plus: f64,
    pub ln_c_q: f64,
    pub c_l: f64,
    pub v1: f64,
    pub delta: f64,
    pub log_alpha0: f64,
}

impl AlphaRecursion {
    pub fn radius(&self, n: usize) -> f64 {
        self.delta * FAR_RATIO.powi(n as i32)
    }

    pub fn cutoff_time(&self, n: usize) -> f64 {
        self.delta / (2f64.powi(n as i32 + 2) * self.radius(n))
    }

    pub fn ln_gain(&self, n: usize) -> f64 {
        let d = self.dim as f64;
        self.ln_c_q + (d + self.gamma) * self.radius(n).ln() - (0.5 * d - 1.0) * 4f64.ln()
    }

    pub fn rate(&self, n: usize) -> f64 {
        self.c_l * (self.gamma_plus * ln_bracket(2.0 * self.radius(n) + self.v1)).exp()
    }

    /// `ln alpha_j(L)` for `j = 0..=n` at `L = min(t, T_{n-1})`, together with `L`.
    ///
    /// Each level is stored as `alpha_j(s) = s^{k_j} exp(H_j + g_j(s))` with
    /// `k_j = 2^j - 1` and `g_j(0) = 0`, and `g_j` is interpolated on
    /// Chebyshev-Lobatto nodes of `[0, L]`.
    pub fn log_alpha_levels(&self, n: usize, t: f64) -> (Vec<f64>, f64) {
        let l = if n == 0 { t } else { t.min(self.cutoff_time(n - 1)) };
        let m = CHEB_NODES;
        let nodes: Vec<f64> = (0..m).map(|i| 0.5 * l * (1.0 - (PI * i as f64 / (m - 1) as f64).cos())).collect();
        let weights: Vec<f64> = (0..m)
            .map(|i| {
                let w = if i % 2 == 0 { 1.0 } else { -1.0 };
                if i == 0 || i == m - 1 {
                    0.5 * w
                } else {
                    w
                }
            })
            .collect();
        let interp = |g: &[f64], s: f64| -> f64 {
            let (mut num, mut den) = (0.0, 0.0);
            for i in 0..m {
                let dx = s - nodes[i];
                if dx == 0.0 {
                    return g[i];
                }
                let c = weights[i] / dx;
                num += c * g[i];
                den += c;
            }
            num / den
        };
        let mut big_h = self.log_alpha0;
        let mut k = 0.0f64;
        let mut g = vec![0.0; m];
        let mut levels = vec![self.log_alpha0];
        for j in 0..n {
            let c = self.rate(j);
            let e = 1.0 / (2.0 * k + 1.0);
            let next: Vec<f64> = nodes
                .iter()
                .enumerate()
                .map(|(i, &s)| {
                    if s == 0.0 {
                        return 0.0;
                    }
                    let gs = g[i];
                    let f = |y: f64| {
                        let w = if y <= 0.0 { 0.0 } else { (y.ln() * e).exp() };
                        (-c * s * w + 2.0 * (interp(&g, s * w) - gs)).exp()
                    };
                    2.0 * gs + integrate(f, 0.0, 1.0, 1e-14).ln()
                })
                .collect();
            big_h = self.ln_gain(j) + 2.0 * big_h - (2.0 * k + 1.0).ln();
            k = 2.0 * k + 1.0;
            g = next;
            let tail = if l > 0.0 { k * l.ln() } else { f64::NEG_INFINITY };
            levels.push(big_h + g[m - 1] + tail);
        }
        (levels, l)
    }

    /// `ln alpha_n(t)`.
    pub fn log_alpha(&self, n: usize, t: f64) -> f64 {
        *self.log_alpha_levels(n, t).0.last().unwrap()
    }
}

/// Localised positive lower bound around the anchors of a space cover.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UpheavalConfig {
    pub dim: usize,
    pub tau0: f64,
    /// Initial window `Delta` (also `r_0` of the upheaval radii).
    pub delta: f64,
    pub x1: Vec3,
    pub v1: Vec3,
    /// `M R_X^2 + E`.
    pub alpha: f64,
    /// `sqrt(2 alpha / M)`.
    pub r_min0: f64,
    /// `|v1| + r_N >= 2 d_U / tau0`.
    pub r_min: f64,
    pub d_u: f64,
    pub iterations: usize,
    /// Time at which the last level was evaluated.
    pub eval_time: f64,
    pub log_alpha0: f64,
    pub log_a0: f64,
    pub delta_t: f64,
    pub delta_x: f64,
    pub delta_v: f64,
    /// Radius of the cover balls `B(x_i, delta_X / 2^level)`.
    pub cover_radius: f64,
    pub cover_level: u32,
    pub n_x: usize,
    pub max_anchor_speed: f64,
    /// Sorted anchor speeds `|v_i| = 2 |x_i - x_1| / tau0`.
    #[serde(skip)]
    pub anchor_speeds: Vec<f64>,
    pub rows: Vec<AuditRow>,
}

/// Inputs of [`upheaval`] beyond the bounds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UpheavalOptions {
    pub delta: f64,
    pub x1: Option<Vec<f64>>,
    pub v1: Option<Vec<f64>>,
    pub delta_t: Option<f64>,
    pub delta_x: Option<f64>,
    pub delta_v: Option<f64>,
    pub cover_level: u32,
    pub max_anchors: usize,
}

impl Default for UpheavalOptions {
    fn default() -> Self {
        UpheavalOptions {
            delta: 1.0,
            x1: None,
            v1: None,
            delta_t: None,
            delta_x: None,
            delta_v: None,
            cover_level: 0,
            max_anchors: 2_000_000,
        }
    }
}

fn point(v: &Option<Vec<f64>>, dim: usize, default: Vec3, name: &str) -> Result<Vec3> {
    match v {
        None => Ok(default),
        Some(s) if s.len() == dim => Ok(vector::from_slice(s)),
        Some(s) => Err(CertificateError::InvalidParameter(format!("{name} needs {dim} components, got {}", s.len()))),
    }
}

/// Speeds `2 |x_i - x_1| / tau0` over the centres of a grid cover of the
/// domain closure by balls of radius `rho`.
fn anchor_speeds(domain: &Domain, x1: &Vec3, rho: f64, tau0: f64, max: usize) -> Result<Vec<f64>> {
    let dim = domain.dim();
    let h = 2.0 * rho / (dim as f64).sqrt();
    let (lo, hi) = domain.bounding_box();
    let counts: Vec<usize> = (0..dim).map(|i| ((hi[i] - lo[i]) / h).ceil().max(1.0) as usize).collect();
    let total = counts.iter().try_fold(1usize, |acc, &c| acc.checked_mul(c));
    match total {
        Some(t) if t <= max => {}
        _ => {
            return Err(CertificateError::InvalidParameter(format!(
                "cover of radius {rho} needs more than {max} anchors"
            )))
        }
    }
    let period = if domain.is_torus() { Some(vector::sub(&hi, &lo)) } else { None };
    let mut speeds = vec![0.0];
    let mut idx = vec![0usize; dim];
    loop {
        let mut c = vector::ZERO;
        for i in 0..dim {
            c[i] = lo[i] + (idx[i] as f64 + 0.5) * h;
        }
        if period.is_some() || domain.signed_distance(&c) <= rho {
            let mut dx = vector::sub(&c, x1);
            if let Some(p) = &period {
                for i in 0..dim {
                    dx[i] -= p[i] * (dx[i] / p[i]).round();
                }
            }
            speeds.push(2.0 * norm(&dx) / tau0);
        }
        let mut i = 0;
        loop {
            if i == dim {
                speeds.sort_by(f64::total_cmp);
                return Ok(speeds);
            }
            idx[i] += 1;
            if idx[i] < counts[i] {
                break;
            }
            idx[i] = 0;
            i += 1;
        }
    }
}

/// Builds the upheaval point, its lower bound `a_0(tau0)` and the anchor cover.
pub fn upheaval(
    domain: &Domain,
    bounds: &CheckedBounds,
    rates: &Rates,
    tau0: f64,
    opts: &UpheavalOptions,
) -> Result<UpheavalConfig> {
    let dim = rates.dim;
    if domain.dim() != dim {
        return Err(CertificateError::InvalidParameter(format!(
            "domain dimension {} differs from kernel dimension {dim}",
            domain.dim()
        )));
    }
    if !(tau0 > 0.0 && tau0.is_finite()) {
        return Err(CertificateError::InvalidParameter(format!("tau0 must be positive, got {tau0}")));
    }
    if !(opts.delta > 0.0) {
        return Err(CertificateError::InvalidParameter(format!("delta must be positive, got {}", opts.delta)));
    }
    let x1 = point(&opts.x1, dim, domain.center(), "x1")?;
    let v1 = point(&opts.v1, dim, vector::ZERO, "v1")?;
    if !domain.is_torus() && domain.signed_distance(&x1) > 0.0 {
        return Err(CertificateError::InvalidParameter("x1 lies outside the domain".into()));
    }
    let alpha = bounds.mass * bounds.r_x * bounds.r_x + bounds.energy;
    let r_min0 = (2.0 * alpha / bounds.mass).sqrt();
    let d_u = if domain.is_torus() { 0.5 * domain.diameter() } else { domain.diameter() };
    let speed1 = norm(&v1);
    let target = 2.0 * d_u / tau0;
    let mut n = 0;
    while speed1 + opts.delta * FAR_RATIO.powi(n as i32) < target {
        n += 1;
        if n > ITERATION_CAP {
            return Err(CertificateError::NonConvergence(format!("upheaval radius never reaches {target}")));
        }
    }
    let rec = AlphaRecursion {
        dim,
        gamma: rates.gamma,
        gamma_plus: rates.gamma_plus,
        ln_c_q: rates.ln_c_q,
        c_l: rates.c_l,
        v1: speed1,
        delta: opts.delta,
        log_alpha0: bounds.mass.ln() - 8f64.ln() - 2.0 * ball_volume(dim, r_min0).ln(),
    };
    let (levels, eval_time) = rec.log_alpha_levels(n, 0.5 * tau0);
    let log_a0 = -LN_2 + levels[n] - 0.5 * tau0 * rates.damping(target);
    let rows = levels.iter().enumerate().map(|(j, &la)| AuditRow::new("upheaval", j, rec.radius(j), la)).collect();
    let positive = |v: Option<f64>, default: f64, name: &str| -> Result<f64> {
        match v {
            None => Ok(default),
            Some(x) if x > 0.0 && x.is_finite() => Ok(x),
            Some(x) => Err(CertificateError::InvalidParameter(format!("{name} must be positive, got {x}"))),
        }
    };
    let delta_t = positive(opts.delta_t, 0.5 * tau0, "delta_t")?;
    let delta_x = positive(opts.delta_x, 0.1 * r_min0, "delta_x")?;
    let delta_v = positive(opts.delta_v, 0.1 * r_min0, "delta_v")?;
    let cover_radius = delta_x / 2f64.powi(opts.cover_level as i32);
    let speeds = anchor_speeds(domain, &x1, cover_radius, tau0, opts.max_anchors)?;
    Ok(UpheavalConfig {
        dim,
        tau0,
        delta: opts.delta,
        x1,
        v1,
        alpha,
        r_min0,
        r_min: speed1 + rec.radius(n),
        d_u,
        iterations: n,
        eval_time,
        log_alpha0: rec.log_alpha0,
        log_a0,
        delta_t,
        delta_x,
        delta_v,
        cover_radius,
        cover_level: opts.cover_level,
        n_x: speeds.len(),
        max_anchor_speed: *speeds.last().unwrap(),
        anchor_speeds: speeds,
        rows,
    })
}

/// Smallest `n` with `r_0 FAR_RATIO^n >= target`.
pub fn far_iterations(r0: f64, target: f64) -> Result<usize> {
    let mut r = r0;
    let mut n = 0;
    while r < target {
        r *= FAR_RATIO;
        n += 1;
        if n > ITERATION_CAP {
            return Err(CertificateError::NonConvergence(format!("far radii never reach {target}")));
        }
    }
    Ok(n)
}

/// Grazing radii `r_{n+1} = sqrt(2) (1 - xi) r_n - delta_V / 4`, `r_0 = delta_V`.
pub fn grazing_radius(delta_v: f64, xi: f64, n: usize) -> f64 {
    let mut r = delta_v;
    for _ in 0..n {
        r = 2f64.sqrt() * (1.0 - xi) * r - 0.25 * delta_v;
    }
    r
}

/// Boundary constants needed near the boundary: `p_{eps/2}` and `alpha_X`
/// for `eps = delta_V / 4`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GrazingInputs {
    pub eps: f64,
    pub p: u64,
    pub alpha_x: f64,
}

impl GrazingInputs {
    pub fn compute(domain: &Domain, delta_v: f64, opts: &GrazingOptions) -> Result<Option<Self>> {
        if domain.is_torus() {
            return Ok(None);
        }
        let eps = 0.25 * delta_v;
        let miss = |e: grazing::GrazingError| CertificateError::GrazingConstantsMissing(e.to_string());
        let (p, _) = grazing::find_p(domain, 0.5 * eps, opts).map_err(miss)?;
        let alpha_x = grazing::alpha_x(domain, eps, opts).map_err(miss)?;
        Ok(Some(GrazingInputs { eps, p, alpha_x }))
    }

    pub fn t(&self, v_max: f64) -> f64 {
        grazing::t_eps(self.alpha_x, self.p, v_max)
    }

    pub fn l(&self, v_min: f64, tau2: f64) -> f64 {
        grazing::l_eps(self.p, v_min, tau2, self.eps)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SpreadMode {
    Far,
    Grazing,
    Merged,
    Final,
}

/// Result of one spreading stage.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpreadState {
    pub mode: SpreadMode,
    pub tau: f64,
    pub delta_t: f64,
    pub big_r: f64,
    pub tau1: f64,
    pub tau2: f64,
    /// `l / (2^{N_2} R)` in far mode.
    pub alpha: f64,
    pub l: f64,
    pub v_m: Option<f64>,
    pub xi: Option<f64>,
    /// Number of anchors per `N_max`.
    pub n_max: BTreeMap<usize, usize>,
    /// Radius of the centred ball reached.
    pub r_v: f64,
    pub log_a: f64,
    pub rows: Vec<AuditRow>,
}

impl SpreadState {
    fn empty(mode: SpreadMode, tau: f64, delta_t: f64) -> Self {
        SpreadState {
            mode,
            tau,
            delta_t,
            big_r: f64::NAN,
            tau1: f64::NAN,
            tau2: f64::NAN,
            alpha: f64::NAN,
            l: f64::NAN,
            v_m: None,
            xi: None,
            n_max: BTreeMap::new(),
            r_v: f64::NAN,
            log_a: f64::NAN,
            rows: Vec::new(),
        }
    }
}

/// `R(tau) = max(3 R_min, 2 delta_X / tau + 1)`.
pub fn big_r(up: &UpheavalConfig, tau: f64) -> f64 {
    (3.0 * up.r_min).max(2.0 * up.delta_x / tau + 1.0)
}

/// Spreading from the anchors when trajectories stay away from the boundary:
/// radii grow by `FAR_RATIO` from `delta_V` until every anchor ball covers
/// `B(0, 2 R_min)`, then the time window shrinks until `l / (2^{N_2} R) < tau1`.
pub fn spread_far(
    up: &UpheavalConfig,
    rates: &Rates,
    l: f64,
    tau1: f64,
    delta_t: f64,
    big_r: f64,
) -> Result<SpreadState> {
    if !(l > 0.0 && tau1 > 0.0 && delta_t > 0.0 && big_r > 0.0) {
        return Err(CertificateError::InvalidParameter(format!(
            "far spreading needs positive l, tau1, Delta_T, R; got {l}, {tau1}, {delta_t}, {big_r}"
        )));
    }
    if l / big_r > delta_t {
        return Err(CertificateError::InvalidParameter(format!("l / R = {} exceeds Delta_T = {delta_t}", l / big_r)));
    }
    let n1 = far_iterations(up.delta_v, up.max_anchor_speed + 2.0 * up.r_min)?;
    let mut n2 = n1;
    while l / (2f64.powi(n2 as i32) * big_r) >= tau1 {
        n2 += 1;
        if n2 > ITERATION_CAP {
            return Err(CertificateError::NonConvergence("far window never fits tau1".into()));
        }
    }
    let d = rates.dim as f64;
    let damp = delta_t * rates.damping(big_r);
    let mut log_a = up.log_a0;
    let mut r = up.delta_v;
    let mut rows = Vec::with_capacity(n2 + 1);
    for k in 0..n2 {
        let ln_l = l.ln() - (n2 - 1 - k) as f64 * 8f64.ln();
        let mut row = AuditRow::new("far", k, r, log_a);
        row.log_step = Some(ln_l);
        rows.push(row);
        log_a = rates.ln_c_q + (d + rates.gamma) * r.ln() - (0.5 * d - 1.0) * 4f64.ln() + ln_l
            - (k as f64 + 3.0) * LN_2
            - big_r.ln()
            - damp
            + 2.0 * log_a;
        r *= FAR_RATIO;
    }
    rows.push(AuditRow::new("far", n2, r, log_a));
    let mut s = SpreadState::empty(SpreadMode::Far, tau1, delta_t);
    s.big_r = big_r;
    s.tau1 = tau1;
    s.l = l;
    s.alpha = l / (2f64.powi(n2 as i32) * big_r);
    s.r_v = 2.0 * up.r_min;
    s.log_a = log_a;
    s.rows = rows;
    Ok(s)
}

/// Geometric constants of the grazing stage at time `tau`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GrazingGeometry {
    pub tau: f64,
    pub delta_t: f64,
    pub big_r: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub l: f64,
    pub v_m: Option<f64>,
    pub xi: f64,
    /// `N_max(i)` per anchor, aligned with the sorted anchor speeds.
    #[serde(skip)]
    pub n_max: Vec<usize>,
    pub radii: Vec<f64>,
}

/// `Delta_T = min(delta_T, t_{delta_V/4}(3 R_min))`, or `delta_T` without boundary.
pub fn delta_t(up: &UpheavalConfig, graze: Option<&GrazingInputs>) -> f64 {
    match graze {
        Some(g) => up.delta_t.min(g.t(3.0 * up.r_min)),
        None => up.delta_t,
    }
}

pub fn grazing_geometry(
    up: &UpheavalConfig,
    tau: f64,
    graze: Option<&GrazingInputs>,
    xi: f64,
) -> Result<GrazingGeometry> {
    if !(xi > 0.0 && xi < XI_GRAZE_GROWTH) {
        return Err(CertificateError::InvalidParameter(format!(
            "xi must lie in (0, {XI_GRAZE_GROWTH}) for the grazing radii to grow, got {xi}"
        )));
    }
    let dt = delta_t(up, graze);
    if !(tau > 0.0 && tau <= dt) {
        return Err(CertificateError::InvalidParameter(format!("tau = {tau} must lie in (0, Delta_T = {dt}]")));
    }
    let r = big_r(up, tau);
    let tau1 = tau - 2.0 * up.delta_x / r;
    let tau2 = up.delta_x / r;
    let mut radii = vec![up.delta_v];
    let mut n_max = Vec::with_capacity(up.anchor_speeds.len());
    let mut v_m: Option<f64> = None;
    for &s in &up.anchor_speeds {
        while *radii.last().unwrap() <= s {
            let last = *radii.last().unwrap();
            radii.push(2f64.sqrt() * (1.0 - xi) * last - 0.25 * up.delta_v);
            if radii.len() > ITERATION_CAP {
                return Err(CertificateError::NonConvergence("grazing radii never reach the anchors".into()));
            }
        }
        let n = radii.iter().position(|&r| r > s).unwrap();
        if n > 0 {
            let gap = s - radii[n - 1];
            if gap > 0.0 {
                v_m = Some(v_m.map_or(gap, |m| m.min(gap)));
            }
        }
        n_max.push(n);
    }
    let l = match (graze, v_m) {
        (Some(g), Some(vm)) => up.delta_x.min(g.l(vm, tau2.min(dt))),
        _ => up.delta_x,
    };
    Ok(GrazingGeometry { tau, delta_t: dt, big_r: r, tau1, tau2, l, v_m, xi, n_max, radii })
}

/// Spreading along the boundary: per anchor group `b_{n+1} = min(C_Q
/// r_n^{N+gamma} xi^{N/2-1} delta_X / (2^{n+2} R) e^{-tau C_L <R>^{gamma+}} b_n^2,
/// a(l, tau1, Delta_T)^2)` from `b_0 = a_0 e^{-(Delta_T - tau) C_L <R>^{gamma+}}`.
pub fn spread_grazing(
    up: &UpheavalConfig,
    rates: &Rates,
    geo: &GrazingGeometry,
    far: &SpreadState,
) -> Result<SpreadState> {
    if far.mode != SpreadMode::Far {
        return Err(CertificateError::InvalidParameter("grazing stage needs a far state".into()));
    }
    let d = rates.dim as f64;
    let damp_r = rates.damping(geo.big_r);
    let cap = 2.0 * far.log_a;
    let top = geo.n_max.iter().copied().max().unwrap_or(0);
    let mut b = vec![up.log_a0 - (geo.delta_t - geo.tau) * damp_r];
    let mut rows = vec![AuditRow::new("grazing", 0, geo.radii[0], b[0])];
    for n in 0..top {
        let r = geo.radii[n];
        let grown = rates.ln_c_q + (d + rates.gamma) * r.ln() + (0.5 * d - 1.0) * geo.xi.ln() + up.delta_x.ln()
            - (n as f64 + 2.0) * LN_2
            - geo.big_r.ln()
            - geo.tau * damp_r
            + 2.0 * b[n];
        let next = grown.min(cap);
        b.push(next);
        rows.push(AuditRow::new("grazing", n + 1, geo.radii[n + 1], next));
    }
    let mut counts = BTreeMap::new();
    let mut log_b = f64::INFINITY;
    let mut r_v = f64::INFINITY;
    for (&s, &n) in up.anchor_speeds.iter().zip(&geo.n_max) {
        *counts.entry(n).or_insert(0) += 1;
        log_b = log_b.min(b[n]);
        r_v = r_v.min(geo.radii[n] - s);
    }
    let mut st = SpreadState::empty(SpreadMode::Grazing, geo.tau, geo.delta_t);
    st.big_r = geo.big_r;
    st.tau1 = geo.tau1;
    st.tau2 = geo.tau2;
    st.l = geo.l;
    st.alpha = far.alpha;
    st.v_m = geo.v_m;
    st.xi = Some(geo.xi);
    st.n_max = counts;
    st.r_v = r_v;
    st.log_a = log_b;
    st.rows = rows;
    Ok(st)
}

/// `a(tau) = min(a(l, tau1, Delta_T), b(tau))` on `B(0, r_V)`.
pub fn merge_centered_ball(far: &SpreadState, grazing: Option<&SpreadState>) -> SpreadState {
    let mut m = SpreadState::empty(SpreadMode::Merged, far.tau, far.delta_t);
    m.big_r = far.big_r;
    m.tau1 = far.tau1;
    m.l = far.l;
    m.alpha = far.alpha;
    m.r_v = far.r_v;
    m.log_a = far.log_a;
    if let Some(g) = grazing {
        m.tau = g.tau;
        m.big_r = g.big_r;
        m.tau2 = g.tau2;
        m.l = g.l;
        m.v_m = g.v_m;
        m.xi = g.xi;
        m.n_max = g.n_max.clone();
        m.r_v = m.r_v.min(g.r_v);
        m.log_a = m.log_a.min(g.log_a);
    }
    m
}

/// Centred ball at one evaluation time `s <= Delta_T`.
pub fn centered_ball_at(
    up: &UpheavalConfig,
    rates: &Rates,
    s: f64,
    graze: Option<&GrazingInputs>,
    xi: f64,
) -> Result<Vec<SpreadState>> {
    let geo = grazing_geometry(up, s, graze, xi)?;
    let dt = geo.delta_t;
    let far = spread_far(up, rates, geo.l, geo.tau1, dt, big_r(up, dt))?;
    let grazing = if graze.is_some() { Some(spread_grazing(up, rates, &geo, &far)?) } else { None };
    let merged = merge_centered_ball(&far, grazing.as_ref());
    let mut out = vec![far];
    out.extend(grazing);
    out.push(merged);
    Ok(out)
}

/// Uniform lower bound `a(tau) 1_{B(0, r_V)}` over `[tau/2, tau]` (time
/// counted from the upheaval start).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CenteredBall {
    pub tau: f64,
    pub delta_t: f64,
    pub r_v: f64,
    pub log_a: f64,
    /// `(evaluation time, ln a)` per window branch before the minimum.
    pub branches: Vec<(f64, f64)>,
    pub stages: Vec<SpreadState>,
}

pub fn centered_ball(
    up: &UpheavalConfig,
    rates: &Rates,
    tau: f64,
    graze: Option<&GrazingInputs>,
    xi: f64,
) -> Result<CenteredBall> {
    let dt = delta_t(up, graze);
    let mut branches = Vec::new();
    let mut stages = Vec::new();
    let mut r_v = f64::INFINITY;
    if 0.5 * tau <= dt {
        let st = centered_ball_at(up, rates, 0.5 * tau, graze, xi)?;
        let m = st.last().unwrap();
        r_v = r_v.min(m.r_v);
        branches.push((0.5 * tau, m.log_a));
        stages.extend(st);
    }
    if tau > dt {
        let st = centered_ball_at(up, rates, dt, graze, xi)?;
        let m = st.last().unwrap();
        r_v = r_v.min(m.r_v);
        branches.push((dt, m.log_a - (tau - dt) * rates.damping(m.r_v)));
        stages.extend(st);
    }
    let log_a = branches.iter().map(|b| b.1).fold(f64::INFINITY, f64::min);
    Ok(CenteredBall { tau, delta_t: dt, r_v, log_a, branches, stages })
}

/// Sequence `(xi_n)` of the final stage.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "values")]
pub enum XiSchedule {
    /// `xi_n = 1 / (n + 2)^2`.
    #[default]
    InverseSquare,
    /// Leading values; the inverse-square rule continues past the list.
    Explicit(Vec<f64>),
}

impl XiSchedule {
    fn validate(&self) -> Result<()> {
        if let XiSchedule::Explicit(v) = self {
            if let Some(x) = v.iter().find(|x| !(**x > 0.0 && **x < 1.0)) {
                return Err(CertificateError::ScheduleInvalid(format!("xi must lie in (0, 1), got {x}")));
            }
        }
        Ok(())
    }

    pub fn at(&self, n: usize) -> f64 {
        match self {
            XiSchedule::Explicit(v) if n < v.len() => v[n],
            _ => 1.0 / ((n + 2) as f64).powi(2),
        }
    }

    /// `prod_{k >= m} (1 - xi_k)`; the inverse-square part telescopes to
    /// `(j + 1) / (j + 2)` from index `j` on.
    pub fn tail_product(&self, m: usize) -> f64 {
        let start = match self {
            XiSchedule::Explicit(v) => v.len().max(m),
            XiSchedule::InverseSquare => m,
        };
        let head: f64 = (m..start).map(|k| 1.0 - self.at(k)).product();
        head * (start + 1) as f64 / (start + 2) as f64
    }
}

/// Time slices `(Delta_n)` of the non-cutoff tail, summing to 1.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "values")]
pub enum DeltaSchedule {
    /// Halving slices, shrunk further so that the penalty of step `n` stays
    /// below `2^{-(n+1)} |ln a_n|`.
    #[default]
    Adaptive,
    /// `Delta_n = 6 / (pi^2 (n + 1)^2)`.
    InverseSquare,
    /// `Delta_0, Delta_1, ...`; the recursion stops where the list ends.
    Explicit(Vec<f64>),
}

/// Least-squares line `y = c0 + c1 x` with its coefficient of determination.
fn fit_line(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxx += (a - mx) * (a - mx);
        sxy += (a - mx) * (b - my);
        syy += (b - my) * (b - my);
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let r2 = if syy > 0.0 { 1.0 - ss_res / syy } else { 1.0 };
    (intercept, slope, r2)
}

/// Steps used to pin the limiting slope when `K = 2`.
const SLOPE_HORIZON: usize = 80;
/// Cap on the steps taken past the audit to settle the envelope.
const ENVELOPE_CAP: usize = 2_000;

/// Fitted tail `ln a_{n+1} ~ ln c - s r_n^K`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TailFit {
    /// Decay rate in use: the fitted one, or the limiting one when larger.
    pub slope: f64,
    /// Decay rate of the least-squares line.
    pub fit_slope: f64,
    pub fit_intercept: f64,
    pub r_squared: f64,
    /// Largest `ln c` keeping `c e^{-s |v|^K}` below every step reached.
    pub log_c: f64,
    /// Last step index examined.
    pub horizon: usize,
    /// Whether the envelope terms were seen growing past the horizon of the
    /// minimum, rather than stopping at a cap or the end of the schedule.
    pub settled: bool,
}

/// `(r_n^K, ln a_{n+1})` over the tail half of the audit: `a_{n+1}` bounds
/// the shell `r_n <= |v| < r_{n+1}`.
fn shell_pairs(pts: &[(f64, f64)], n_iter: usize, k: f64) -> (Vec<f64>, Vec<f64>) {
    pts[n_iter / 2..n_iter].iter().zip(&pts[n_iter / 2 + 1..=n_iter]).map(|(a, b)| (a.0.powf(k), b.1)).unzip()
}

/// Fits the tail of `(r_n, ln a_n)` and lowers the constant to the staircase
/// envelope, extending the recursion with `step` as far as needed. With
/// `limit = Some(xi)` the exponent is 2 and the slope is raised to its limit
/// `lim -ln a_{n+1} / r_n^2`, using the known tail product of the radii.
fn fit_tail<S>(
    pts: &mut Vec<(f64, f64)>,
    n_iter: usize,
    k: f64,
    limit: Option<&XiSchedule>,
    mut step: S,
) -> Result<TailFit>
where
    S: FnMut(usize, f64, f64) -> Result<Option<(f64, f64)>>,
{
    let (x, y) = shell_pairs(pts, n_iter, k);
    let (b, neg_slope, r2) = fit_line(&x, &y);
    let s_fit = -neg_slope;
    let mut ended = false;
    let mut extend = |pts: &mut Vec<(f64, f64)>, upto: usize| -> Result<()> {
        while !ended && pts.len() <= upto {
            let n = pts.len() - 1;
            let (r, la) = pts[n];
            match step(n, r, la)? {
                Some(p) if p.1.abs() < 1e300 => pts.push(p),
                _ => ended = true,
            }
        }
        Ok(())
    };
    let mut slope = s_fit;
    if let Some(xi) = limit {
        extend(pts, SLOPE_HORIZON + 1)?;
        let m = pts.len() - 2;
        let p = xi.tail_product(m);
        slope = slope.max(-pts[m + 1].1 / (pts[m].0 * pts[m].0 * p * p));
    }
    if !(slope > 0.0 && slope.is_finite()) {
        return Err(CertificateError::FitRejected(r2));
    }
    let mut log_c = pts[0].1;
    let mut prev = f64::NEG_INFINITY;
    let mut rising = 0;
    let mut n = 0;
    let mut settled = false;
    while n < n_iter + ENVELOPE_CAP {
        extend(pts, n + 1)?;
        if pts.len() <= n + 1 {
            break;
        }
        let term = pts[n + 1].1 + slope * pts[n].0.powf(k);
        log_c = log_c.min(term);
        rising = if term > prev && term > log_c { rising + 1 } else { 0 };
        prev = term;
        n += 1;
        if n >= n_iter && rising >= 3 && term > 0.0 {
            settled = true;
            break;
        }
    }
    Ok(TailFit { slope, fit_slope: s_fit, fit_intercept: b, r_squared: r2, log_c, horizon: n, settled })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CertificateKind {
    Maxwellian,
    Exponential,
}

/// Lower bound `rho (2 pi theta)^{-d/2} e^{-|v|^2 / (2 theta)}` or
/// `C1 e^{-C2 |v|^K}` for `t >= tau`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Certificate {
    pub kind: CertificateKind,
    pub tau: f64,
    pub rho: Option<f64>,
    pub log_rho: Option<f64>,
    pub theta: Option<f64>,
    pub c1: Option<f64>,
    pub log_c1: Option<f64>,
    pub c2: Option<f64>,
    #[serde(rename = "K", serialize_with = "integral_as_int")]
    pub k: f64,
    pub k_threshold: f64,
    pub fit_r_squared: f64,
    pub tail: Option<TailFit>,
    pub r_v: f64,
    pub log_a_centered: f64,
    pub constants: Constants,
    pub upheaval: Option<UpheavalConfig>,
    pub centered: Option<CenteredBall>,
    pub audit: Vec<AuditRow>,
    pub warnings: Vec<String>,
}

/// Integral exponents print without a fractional part.
fn integral_as_int<S: serde::Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if x.fract() == 0.0 && x.abs() < 9.0e15 {
        s.serialize_i64(*x as i64)
    } else {
        s.serialize_f64(*x)
    }
}

impl Certificate {
    fn bare(kind: CertificateKind, rates: &Rates, state: &SpreadState) -> Self {
        Certificate {
            kind,
            tau: state.tau,
            rho: None,
            log_rho: None,
            theta: None,
            c1: None,
            log_c1: None,
            c2: None,
            k: 2.0,
            k_threshold: 2.0,
            fit_r_squared: f64::NAN,
            tail: None,
            r_v: state.r_v,
            log_a_centered: state.log_a,
            constants: rates.constants.clone(),
            upheaval: None,
            centered: None,
            audit: Vec::new(),
            warnings: Vec::new(),
        }
    }

    fn note_tail(&mut self, t: TailFit) {
        self.fit_r_squared = t.r_squared;
        self.tail = Some(t);
        if !t.settled {
            self.warnings.push(format!("envelope not settled within {} steps", t.horizon));
        }
    }
}

fn check_start(state: &SpreadState, n_iter: usize) -> Result<()> {
    if !(state.r_v > 0.0 && state.r_v.is_finite() && state.log_a.is_finite()) {
        return Err(CertificateError::InvalidParameter(format!(
            "centred ball needs finite r_V > 0 and ln a, got {} and {}",
            state.r_v, state.log_a
        )));
    }
    if !(4..=ITERATION_CAP).contains(&n_iter) {
        return Err(CertificateError::InvalidParameter(format!(
            "n_iter must lie in [4, {ITERATION_CAP}], got {n_iter}"
        )));
    }
    Ok(())
}

/// One cutoff step: `r_{n+1} = sqrt(2) (1 - xi_n) r_n` and
/// `a_{n+1} = cst C_e a_n^2 r_n^{N+gamma} xi_n^{N/2+1} / 2^{n+1}`.
pub fn maxwellian_step(rates: &Rates, n: usize, r: f64, log_a: f64, xi: f64) -> (f64, f64) {
    let d = rates.dim as f64;
    let ln_c = (rates.constants.cst_q * rates.constants.c_e).ln();
    let next = ln_c + 2.0 * log_a + (d + rates.gamma) * r.ln() + (0.5 * d + 1.0) * xi.ln() - (n as f64 + 1.0) * LN_2;
    (r * 2f64.sqrt() * (1.0 - xi), next)
}

/// Final cutoff stage: the cutoff steps from the centred ball, a least-squares
/// fit `ln a_{n+1} = ln rho' - r_n^2 / (2 theta)` over the tail half with R^2
/// check, `theta` from the limiting slope and `rho'` lowered to the envelope.
pub fn maxwellian_certificate(
    state: &SpreadState,
    rates: &Rates,
    xi: &XiSchedule,
    n_iter: usize,
) -> Result<Certificate> {
    check_start(state, n_iter)?;
    xi.validate()?;
    let mut pts = vec![(state.r_v, state.log_a)];
    for n in 0..n_iter {
        let (r, la) = pts[n];
        pts.push(maxwellian_step(rates, n, r, la, xi.at(n)));
    }
    let rows: Vec<AuditRow> = pts.iter().enumerate().map(|(n, p)| AuditRow::new("maxwellian", n, p.0, p.1)).collect();
    let tail =
        fit_tail(&mut pts, n_iter, 2.0, Some(xi), |n, r, la| Ok(Some(maxwellian_step(rates, n, r, la, xi.at(n)))))?;
    if !(tail.r_squared >= MIN_R_SQUARED) {
        return Err(CertificateError::FitRejected(tail.r_squared));
    }
    let theta = 0.5 / tail.slope;
    let d = rates.dim as f64;
    let log_rho = tail.log_c + 0.5 * d * (2.0 * PI * theta).ln();
    let mut c = Certificate::bare(CertificateKind::Maxwellian, rates, state);
    c.rho = Some(log_rho.exp());
    c.log_rho = Some(log_rho);
    c.theta = Some(theta);
    c.note_tail(tail);
    c.audit = rows;
    Ok(c)
}

/// `2 log_2(2 + 2 nu / (2 - nu))`.
pub fn k_threshold(nu: f64) -> f64 {
    2.0 * (2.0 + 2.0 * nu / (2.0 - nu)).log2()
}

/// `ln eps_n` solving `C_f m_b(eps) <R>^{gamma~} = a_n^2 cst l_b c_phi r_n^{N+gamma}
/// xi_n^{N/2-1} / 2` with `m_b(eps) = b0 eps^{2-nu} / (2-nu)` on the sphere.
pub fn log_eps_n(rates: &Rates, log_a: f64, r: f64, xi: f64, big_r: f64) -> f64 {
    let d = rates.dim as f64;
    let nu = rates.nu;
    let rhs =
        2.0 * log_a + rates.ln_c_q + (d + rates.gamma) * r.ln() + (0.5 * d - 1.0) * xi.ln() + (2.0 - nu).ln() - LN_2;
    let lhs = rates.c_f.ln() + rates.b0_sphere.ln() + rates.gamma_tilde * ln_bracket(big_r);
    (rhs - lhs) / (2.0 - nu)
}

/// State of the non-cutoff recursion, including the time-slice schedule.
struct NcoStepper<'a> {
    rates: &'a Rates,
    xi: &'a XiSchedule,
    schedule: &'a DeltaSchedule,
    ln_delta_prev: f64,
    sum: f64,
    last: f64,
}

/// One non-cutoff step.
struct NcoStep {
    r: f64,
    log_a: f64,
    ln_delta: f64,
    log_eps: f64,
}

impl NcoStepper<'_> {
    fn step(&mut self, n: usize, r: f64, log_a: f64) -> Result<Option<NcoStep>> {
        let rates = self.rates;
        let c = &rates.constants;
        let d = rates.dim as f64;
        let nu = rates.nu;
        let x = self.xi.at(n);
        let lambda =
            c.c_tilde_f.ln() + 2.0 * log_a + (d + rates.gamma - rates.gamma_tilde) * r.ln() + (0.5 * d - 1.0) * x.ln();
        let ln_r_plus = rates.gamma_plus * r.ln();
        // ln of the penalty without its tail factor
        let ln_p0 = if nu == 0.0 {
            c.cst_log.ln() + lambda.abs().ln() + ln_r_plus
        } else {
            -nu / (2.0 - nu) * lambda + ln_r_plus
        };
        let norm_c = 6.0 / (PI * PI);
        let (ln_delta, ln_tail) = match self.schedule {
            DeltaSchedule::Adaptive => {
                let budget = log_a.abs().max(1.0).ln() - (n as f64 + 2.0) * LN_2 - ln_p0;
                let ln_delta = (self.ln_delta_prev - LN_2).min(budget);
                self.ln_delta_prev = ln_delta;
                self.sum += ln_delta.exp();
                self.last = ln_delta.exp();
                (ln_delta, ln_delta + LN_2)
            }
            DeltaSchedule::InverseSquare => {
                let m = n + 1;
                let partial: f64 = (0..m).map(|j| norm_c / ((j + 1) as f64).powi(2)).sum();
                (norm_c.ln() - 2.0 * ((m + 1) as f64).ln(), (1.0 - partial).ln())
            }
            DeltaSchedule::Explicit(v) => {
                let m = n + 1;
                if m >= v.len() || v[m] == 0.0 {
                    return Ok(None);
                }
                (v[m].ln(), v[m..].iter().sum::<f64>().ln())
            }
        };
        let penalty = (ln_p0 + ln_tail).exp();
        if !penalty.is_finite() {
            return Err(CertificateError::NonConvergence(format!(
                "penalty exceeds the f64 range at step {n}; use the adaptive schedule"
            )));
        }
        let next =
            c.cst_q.ln() + ln_delta - penalty + 2.0 * log_a + (rates.gamma + d) * r.ln() + (0.5 * d + 1.0) * x.ln();
        Ok(Some(NcoStep {
            r: r * 2f64.sqrt() * (1.0 - x),
            log_a: next,
            ln_delta,
            log_eps: log_eps_n(rates, log_a, r, x, r),
        }))
    }
}

/// Final non-cutoff stage: `a_{n+1} = cst Delta_{n+1} e^{-P_n} a_n^2 r_n^{gamma+N}
/// xi_n^{N/2+1}` with the penalty `P_n = [C~_f a_n^2 r_n^{N+gamma-gamma~}
/// xi_n^{N/2-1}]^{-nu/(2-nu)} (sum_{k>n} Delta_k) r_n^{gamma+}` (logarithmic when
/// `nu = 0`), then a fit `ln a_{n+1} = ln C1 - C2 r_n^K` over the tail half with
/// `C1` lowered to the envelope.
pub fn noncutoff_certificate(
    state: &SpreadState,
    rates: &Rates,
    schedule: &DeltaSchedule,
    xi: &XiSchedule,
    n_iter: usize,
    k_margin: f64,
) -> Result<Certificate> {
    check_start(state, n_iter)?;
    xi.validate()?;
    if rates.cutoff {
        return Err(CertificateError::InvalidParameter("the exponential tail needs a non-cutoff kernel".into()));
    }
    let nu = rates.nu;
    if !(0.0..2.0).contains(&nu) {
        return Err(CertificateError::InvalidParameter(format!("nu must lie in [0, 2), got {nu}")));
    }
    if !(k_margin >= 0.0) || (nu > 0.0 && k_margin == 0.0) {
        return Err(CertificateError::InvalidParameter(format!(
            "K must exceed its threshold when nu > 0; margin {k_margin}"
        )));
    }
    if let DeltaSchedule::Explicit(v) = schedule {
        if let Some(x) = v.iter().find(|x| !(**x >= 0.0)) {
            return Err(CertificateError::ScheduleInvalid(format!("negative slice {x}")));
        }
        let total: f64 = v.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(CertificateError::ScheduleInvalid(format!("slices sum to {total}")));
        }
        if v.len() <= n_iter {
            return Err(CertificateError::ScheduleInvalid(format!("{} slices for {n_iter} steps", v.len())));
        }
    }
    let mut stepper = NcoStepper { rates, xi, schedule, ln_delta_prev: (0.5f64).ln(), sum: 0.0, last: 0.0 };
    let mut pts = vec![(state.r_v, state.log_a)];
    let mut rows = Vec::with_capacity(n_iter + 1);
    for n in 0..n_iter {
        let (r, la) = pts[n];
        let s = stepper
            .step(n, r, la)?
            .ok_or_else(|| CertificateError::ScheduleInvalid(format!("schedule ends at step {n}")))?;
        let mut row = AuditRow::new("exponential", n, r, la);
        row.log_eps = Some(s.log_eps);
        row.log_step = Some(s.ln_delta);
        rows.push(row);
        pts.push((s.r, s.log_a));
    }
    rows.push(AuditRow::new("exponential", n_iter, pts[n_iter].0, pts[n_iter].1));
    if *schedule == DeltaSchedule::Adaptive {
        let delta0 = 1.0 - stepper.sum - stepper.last;
        if !(delta0 > 0.0) {
            return Err(CertificateError::ScheduleInvalid(format!("adaptive slices leave Delta_0 = {delta0}")));
        }
    }
    let k_thr = k_threshold(nu);
    let k = k_thr + k_margin;
    let limit = if k == 2.0 { Some(xi) } else { None };
    let tail = fit_tail(&mut pts, n_iter, k, limit, |n, r, la| Ok(stepper.step(n, r, la)?.map(|s| (s.r, s.log_a))))?;
    let mut cert = Certificate::bare(CertificateKind::Exponential, rates, state);
    cert.k = k;
    cert.k_threshold = k_thr;
    cert.c1 = Some(tail.log_c.exp());
    cert.log_c1 = Some(tail.log_c);
    cert.c2 = Some(tail.slope);
    cert.note_tail(tail);
    cert.audit = rows;
    Ok(cert)
}

/// All inputs of [`certify`] beyond domain, kernel, bounds and calibration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertificateConfig {
    pub tau: f64,
    /// Upheaval start; defaults to `tau / 4`.
    pub tau0: Option<f64>,
    pub upheaval: UpheavalOptions,
    pub xi_graze: f64,
    pub xi: XiSchedule,
    pub delta_schedule: DeltaSchedule,
    pub n_iter: usize,
    /// Angle splitting a non-cutoff kernel in the centred-ball stage.
    pub eps0: f64,
    /// `K - threshold`; defaults to 0 at `nu = 0` and 0.05 otherwise.
    pub k_margin: Option<f64>,
    pub grazing_samples: Option<usize>,
}

impl Default for CertificateConfig {
    fn default() -> Self {
        CertificateConfig {
            tau: 1.0,
            tau0: None,
            upheaval: UpheavalOptions::default(),
            xi_graze: 0.1,
            xi: XiSchedule::default(),
            delta_schedule: DeltaSchedule::default(),
            n_iter: 40,
            eps0: 0.1,
            k_margin: None,
            grazing_samples: None,
        }
    }
}

/// Full pipeline: upheaval at `tau0`, centred ball over the shifted window
/// `[tau0, tau]`, then the Maxwellian (cutoff) or exponential (non-cutoff) tail.
pub fn certify(
    domain: &Domain,
    kernel: &Kernel,
    bounds: &Bounds,
    calibration: &Calibration,
    cfg: &CertificateConfig,
) -> Result<Certificate> {
    let checked = bounds.validate(kernel)?;
    let rates = Rates::new(kernel, &checked, Constants::from_calibration(calibration)?, cfg.eps0)?;
    if !(cfg.tau > 0.0 && cfg.tau.is_finite()) {
        return Err(CertificateError::InvalidParameter(format!("tau must be positive, got {}", cfg.tau)));
    }
    let tau0 = cfg.tau0.unwrap_or(0.25 * cfg.tau);
    if !(tau0 > 0.0 && tau0 < cfg.tau) {
        return Err(CertificateError::InvalidParameter(format!("tau0 must lie in (0, tau), got {tau0}")));
    }
    let mut warnings = Vec::new();
    let o = &cfg.upheaval;
    if o.delta_t.is_none() || o.delta_x.is_none() || o.delta_v.is_none() {
        warnings.push(
            "delta_T, delta_X, delta_V parameterise the certificate; defaults were used for the missing ones".into(),
        );
    }
    if !rates.constants.defaulted.is_empty() {
        warnings.push(format!("defaulted constants: {}", rates.constants.defaulted.join(", ")));
    }
    let up = upheaval(domain, &checked, &rates, tau0, o)?;
    let mut gopts = GrazingOptions::for_dim(domain.dim());
    if let Some(n) = cfg.grazing_samples {
        gopts.boundary_samples = n;
    }
    let graze = GrazingInputs::compute(domain, up.delta_v, &gopts)?;
    let ball = centered_ball(&up, &rates, cfg.tau - tau0, graze.as_ref(), cfg.xi_graze)?;
    let mut start = ball.stages.last().unwrap().clone();
    start.mode = SpreadMode::Final;
    start.tau = cfg.tau;
    start.r_v = ball.r_v;
    start.log_a = ball.log_a;
    let mut cert = if rates.cutoff {
        maxwellian_certificate(&start, &rates, &cfg.xi, cfg.n_iter)?
    } else {
        let margin = cfg.k_margin.unwrap_or(if rates.nu == 0.0 { 0.0 } else { 0.05 });
        noncutoff_certificate(&start, &rates, &cfg.delta_schedule, &cfg.xi, cfg.n_iter, margin)?
    };
    let mut audit: Vec<AuditRow> = up.rows.clone();
    for s in &ball.stages {
        audit.extend(s.rows.iter().cloned());
    }
    audit.append(&mut cert.audit);
    cert.audit = audit;
    cert.tau = cfg.tau;
    cert.upheaval = Some(up);
    cert.centered = Some(ball);
    cert.warnings = warnings;
    Ok(cert)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{build_kernel, KernelParams};
    use proptest::prelude::*;

    fn bounds() -> Bounds {
        Bounds {
            e_f: Some(1.0),
            eprime_f: Some(1.0),
            w_f: Some(1.0),
            mass: Some(1.0),
            energy: Some(1.0),
            r_x: Some(1.0),
            ..Default::default()
        }
    }

    fn rates(kernel: &Kernel, b: &Bounds) -> Rates {
        let checked = b.validate(kernel).unwrap();
        Rates::new(kernel, &checked, Constants::from_calibration(&Calibration::default()).unwrap(), 0.1).unwrap()
    }

    fn hard_spheres() -> Kernel {
        build_kernel(KernelParams::hard_spheres()).unwrap()
    }

    fn torus3() -> Domain {
        Domain::torus(&[1.0, 1.0, 1.0]).unwrap()
    }

    fn recursion(gamma: f64, c_l: f64) -> AlphaRecursion {
        AlphaRecursion {
            dim: 3,
            gamma,
            gamma_plus: gamma.max(0.0),
            ln_c_q: 0.0,
            c_l,
            v1: 1.0,
            delta: 1.0,
            log_alpha0: 0.3f64.ln(),
        }
    }

    #[test]
    fn upheaval_energy_radius() {
        let k = hard_spheres();
        let b = bounds();
        let up =
            upheaval(&torus3(), &b.validate(&k).unwrap(), &rates(&k, &b), 0.5, &UpheavalOptions::default()).unwrap();
        assert_eq!(up.alpha, 2.0);
        assert_eq!(up.r_min0, 2.0);
        assert!(up.r_min >= 2.0 * up.d_u / up.tau0);
        assert!((up.delta_x - 0.2).abs() < 1e-15 && (up.delta_v - 0.2).abs() < 1e-15);
    }

    #[test]
    fn first_level_matches_closed_form() {
        for (gamma, c_l) in [(0.0, 1.0), (1.0, 2.5)] {
            let rec = recursion(gamma, c_l);
            assert_eq!(rec.cutoff_time(0), 0.25);
            let k0 = (rec.ln_gain(0)).exp();
            let c0 = rec.rate(0);
            for t in [0.01f64, 0.1, 0.25, 1.0] {
                let m = t.min(0.25);
                let closed = (k0 * 0.09 * (1.0 - (-c0 * m).exp()) / c0).ln();
                let quad = (k0 * integrate(|s: f64| (-c0 * s).exp() * 0.09, 0.0, m, 1e-16)).ln();
                let got = rec.log_alpha(1, t);
                assert!((got - closed).abs() < 1e-10, "t = {t}: {got} vs {closed}");
                assert!((quad - closed).abs() < 1e-12);
            }
        }
    }

    /// `alpha_n` by direct nested adaptive quadrature of the recursion.
    fn nested(rec: &AlphaRecursion, n: usize, t: f64) -> f64 {
        if n == 0 {
            return rec.log_alpha0.exp();
        }
        let upper = t.min(rec.cutoff_time(n - 1));
        let c = rec.rate(n - 1);
        rec.ln_gain(n - 1).exp() * integrate(|s: f64| (-c * s).exp() * nested(rec, n - 1, s).powi(2), 0.0, upper, 1e-22)
    }

    #[test]
    fn deeper_levels_match_nested_quadrature() {
        let rec = recursion(1.0, 2.0);
        for n in [2, 3] {
            for t in [0.01, 1.0] {
                let want = nested(&rec, n, t).ln();
                let got = rec.log_alpha(n, t);
                assert!((got - want).abs() < 1e-8 * want.abs().max(1.0), "n = {n}, t = {t}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn shorter_upheaval_time_needs_more_steps_and_gives_less() {
        let k = hard_spheres();
        let b = bounds();
        let (c, r) = (b.validate(&k).unwrap(), rates(&k, &b));
        let long = upheaval(&torus3(), &c, &r, 0.5, &UpheavalOptions::default()).unwrap();
        let short = upheaval(&torus3(), &c, &r, 0.25, &UpheavalOptions::default()).unwrap();
        assert!(short.iterations > long.iterations);
        assert!(short.log_a0 < long.log_a0);
    }

    #[test]
    fn far_radii_and_iteration_count() {
        assert!((FAR_RATIO - 3.0 * 2f64.sqrt() / 4.0).abs() < 1e-15);
        assert!((FAR_RATIO.powi(7) - 1.51).abs() < 0.005);
        let closed = (60f64.ln() / FAR_RATIO.ln()).ceil() as usize;
        assert_eq!(closed, 70);
        assert_eq!(far_iterations(0.1, 2.0 + 2.0 * 2.0).unwrap(), 70);
    }

    #[test]
    fn far_amplitudes_stay_finite_and_radii_grow() {
        let k = hard_spheres();
        let b = bounds();
        let r = rates(&k, &b);
        let up = upheaval(&torus3(), &b.validate(&k).unwrap(), &r, 0.5, &UpheavalOptions::default()).unwrap();
        let far = spread_far(&up, &r, 0.01, 0.05, 0.25, 10.0).unwrap();
        assert!(far.rows.windows(2).all(|w| w[1].r > w[0].r));
        assert!(far.rows.iter().all(|row| row.log_a.is_finite()));
        assert!(far.alpha < 0.05);
        assert!(far.rows.last().unwrap().r >= up.max_anchor_speed + 2.0 * up.r_min);
    }

    #[test]
    fn grazing_radius_two_ways() {
        let (dv, xi) = (1.0, 0.5 - 3.0 / (8.0 * 2f64.sqrt()));
        let q = 2f64.sqrt() * (1.0 - xi);
        assert!((grazing_radius(dv, xi, 1) - (q - 0.25)).abs() < 1e-15);
        let xi = 0.1;
        let q = 2f64.sqrt() * (1.0 - xi);
        let fixed = 0.25 * dv / (q - 1.0);
        for n in 0..30 {
            let closed = fixed + q.powi(n as i32) * (dv - fixed);
            assert!((grazing_radius(dv, xi, n) - closed).abs() < 1e-11 * closed);
        }
        assert!((XI_GRAZE_GROWTH - (1.0 - 5.0 / (4.0 * 2f64.sqrt()))).abs() < 1e-16);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn grazing_radii_grow(dv in 1e-3f64..10.0) {
            let mut prev = grazing_radius(dv, 0.1, 0);
            for n in 1..40 {
                let r = grazing_radius(dv, 0.1, n);
                prop_assert!(r > prev);
                prev = r;
            }
        }
    }

    fn torus_upheaval() -> (UpheavalConfig, Rates) {
        let k = hard_spheres();
        let b = bounds();
        let r = rates(&k, &b);
        (upheaval(&torus3(), &b.validate(&k).unwrap(), &r, 0.5, &UpheavalOptions::default()).unwrap(), r)
    }

    #[test]
    fn slow_anchors_are_left_out_of_v_m() {
        let (mut up, _) = torus_upheaval();
        up.anchor_speeds = vec![0.0, 0.05, 0.5];
        let geo = grazing_geometry(&up, 0.1, None, 0.1).unwrap();
        assert_eq!(&geo.n_max[..2], &[0, 0]);
        let n = geo.n_max[2];
        assert!(n > 0);
        assert_eq!(geo.v_m, Some(0.5 - geo.radii[n - 1]));
    }

    #[test]
    fn grazing_xi_beyond_growth_is_rejected() {
        let (up, _) = torus_upheaval();
        assert!(grazing_geometry(&up, 0.1, None, 0.12).is_err());
    }

    #[test]
    fn merge_takes_the_minimum() {
        let (up, r) = torus_upheaval();
        let geo = grazing_geometry(&up, 0.1, None, 0.1).unwrap();
        let far = spread_far(&up, &r, geo.l, geo.tau1, geo.delta_t, big_r(&up, geo.delta_t)).unwrap();
        let g = spread_grazing(&up, &r, &geo, &far).unwrap();
        let m = merge_centered_ball(&far, Some(&g));
        assert!(m.log_a <= far.log_a && m.log_a <= g.log_a);
        assert!(m.r_v <= far.r_v && m.r_v <= g.r_v);
        assert_eq!(m.mode, SpreadMode::Merged);
    }

    #[test]
    fn window_damping_and_shifted_start() {
        let (up, r) = torus_upheaval();
        let dt = delta_t(&up, None);
        let at_dt = centered_ball_at(&up, &r, dt, None, 0.1).unwrap();
        let base = at_dt.last().unwrap();
        // tau = Delta_T: the second branch carries no damping
        let both = centered_ball(&up, &r, 2.0 * dt, None, 0.1).unwrap();
        assert_eq!(both.branches.len(), 2);
        let ball_a = centered_ball(&up, &r, 2.5 * dt, None, 0.1).unwrap();
        let ball_b = centered_ball(&up, &r, 3.0 * dt, None, 0.1).unwrap();
        assert_eq!(ball_a.branches.len(), 1);
        assert_eq!(ball_a.r_v, ball_b.r_v);
        let damp = r.damping(base.r_v);
        assert!((ball_a.log_a - (base.log_a - 1.5 * dt * damp)).abs() <= 1e-12 * ball_a.log_a.abs());
        assert!((ball_a.log_a - ball_b.log_a - 0.5 * dt * damp).abs() <= 1e-12 * ball_a.log_a.abs());
        let zero = base.log_a - 0.0 * damp;
        assert_eq!(zero, base.log_a);
    }

    fn start(r_v: f64, log_a: f64) -> SpreadState {
        let mut s = SpreadState::empty(SpreadMode::Final, 1.0, 0.5);
        s.r_v = r_v;
        s.log_a = log_a;
        s
    }

    #[test]
    fn maxwellian_radii_converge_after_scaling() {
        let k = hard_spheres();
        let r = rates(&k, &bounds());
        let c = maxwellian_certificate(&start(2.0, -50.0), &r, &XiSchedule::InverseSquare, 40).unwrap();
        let scaled: Vec<f64> = c.audit.iter().map(|row| row.r * row.r / 2f64.powi(row.n as i32)).collect();
        let limit = 4.0 * XiSchedule::InverseSquare.tail_product(0).powi(2);
        assert!((scaled[40] - limit).abs() < 0.06 * limit);
        assert!((scaled[40] - scaled[39]).abs() < 2e-3 * limit);
    }

    #[test]
    fn maxwellian_fit_quality_and_scale_audit() {
        let k = hard_spheres();
        let r = rates(&k, &bounds());
        for (rv, la) in [(0.5, -5.0), (2.0, -50.0), (2.0, -500.0), (10.0, -1e6)] {
            let c = maxwellian_certificate(&start(rv, la), &r, &XiSchedule::InverseSquare, 40).unwrap();
            assert!(c.theta.unwrap() > 0.0);
            assert!(c.fit_r_squared >= 0.999);
            if la > -100.0 {
                continue;
            }
            // doubling a0 leaves the slope alone once |ln a0| dominates
            let d = maxwellian_certificate(&start(rv, la + LN_2), &r, &XiSchedule::InverseSquare, 40).unwrap();
            let rel = (d.theta.unwrap() / c.theta.unwrap() - 1.0).abs();
            assert!(rel < 0.01, "theta moved by {rel} at r_v = {rv}, log a = {la}");
            assert!(d.log_rho.unwrap() > c.log_rho.unwrap());
        }
    }

    #[test]
    fn maxwellian_profile_stays_below_the_staircase() {
        let k = hard_spheres();
        let r = rates(&k, &bounds());
        let c = maxwellian_certificate(&start(1.0, -20.0), &r, &XiSchedule::InverseSquare, 40).unwrap();
        let (theta, ln_rho_p) = (c.theta.unwrap(), c.tail.unwrap().log_c);
        assert!(ln_rho_p <= c.audit[0].log_a);
        for w in c.audit.windows(2) {
            assert!(ln_rho_p - w[0].r * w[0].r / (2.0 * theta) <= w[1].log_a);
        }
    }

    #[test]
    fn exponent_thresholds() {
        assert_eq!(k_threshold(0.0), 2.0);
        assert_eq!(k_threshold(1.0), 4.0);
        assert!(k_threshold(0.5) > 2.0 && k_threshold(1.5) > k_threshold(1.0));
    }

    fn nco(nu: f64) -> Kernel {
        build_kernel(KernelParams::non_cutoff(3, 0.0, nu, 1.0)).unwrap()
    }

    #[test]
    fn exponential_certificates() {
        for nu in [0.0, 0.5, 1.0, 1.5] {
            let k = nco(nu);
            let r = rates(&k, &bounds());
            let margin = if nu == 0.0 { 0.0 } else { 0.05 };
            let c = noncutoff_certificate(
                &start(1.0, -30.0),
                &r,
                &DeltaSchedule::Adaptive,
                &XiSchedule::InverseSquare,
                40,
                margin,
            )
            .unwrap();
            assert_eq!(c.k_threshold, k_threshold(nu));
            assert_eq!(c.k, k_threshold(nu) + margin);
            assert!(c.c2.unwrap() > 0.0 && c.log_c1.unwrap().is_finite());
            assert!(c.tail.unwrap().settled);
        }
        let r = rates(&nco(1.0), &bounds());
        assert!(noncutoff_certificate(
            &start(1.0, -30.0),
            &r,
            &DeltaSchedule::Adaptive,
            &XiSchedule::InverseSquare,
            40,
            0.0
        )
        .is_err());
    }

    #[test]
    fn cutoff_limit_agrees_on_the_exponent() {
        let r0 = rates(&nco(0.0), &bounds());
        let e = noncutoff_certificate(
            &start(1.0, -30.0),
            &r0,
            &DeltaSchedule::Adaptive,
            &XiSchedule::InverseSquare,
            40,
            0.0,
        )
        .unwrap();
        let m = maxwellian_certificate(
            &start(1.0, -30.0),
            &rates(&hard_spheres(), &bounds()),
            &XiSchedule::InverseSquare,
            40,
        )
        .unwrap();
        assert_eq!(e.k, 2.0);
        assert_eq!(m.k, 2.0);
    }

    #[test]
    fn schedules_must_sum_to_one() {
        let r = rates(&nco(0.5), &bounds());
        let mut v = vec![0.0; 50];
        v[0] = 0.5;
        for (i, x) in v.iter_mut().enumerate().skip(1) {
            *x = 0.4 / 49.0 + 0.0 * i as f64;
        }
        let err = noncutoff_certificate(
            &start(1.0, -30.0),
            &r,
            &DeltaSchedule::Explicit(v),
            &XiSchedule::InverseSquare,
            40,
            0.05,
        );
        assert!(matches!(err, Err(CertificateError::ScheduleInvalid(_))));
    }

    #[test]
    fn inverse_square_slices_overflow_for_positive_nu() {
        let r = rates(&nco(1.0), &bounds());
        let err = noncutoff_certificate(
            &start(1.0, -30.0),
            &r,
            &DeltaSchedule::InverseSquare,
            &XiSchedule::InverseSquare,
            40,
            0.05,
        );
        assert!(matches!(err, Err(CertificateError::NonConvergence(_))));
        let r0 = rates(&nco(0.0), &bounds());
        let c = noncutoff_certificate(
            &start(1.0, -30.0),
            &r0,
            &DeltaSchedule::InverseSquare,
            &XiSchedule::InverseSquare,
            40,
            0.0,
        )
        .unwrap();
        assert_eq!(c.k, 2.0);
    }

    #[test]
    fn grazing_angle_meets_its_inequality() {
        let k = nco(1.0);
        let r = rates(&k, &bounds());
        let (rad, xi) = (1.5, 0.04);
        let target = 1e-3f64.ln();
        let guess = -3.0;
        let la = guess + (target - log_eps_n(&r, guess, rad, xi, rad)) * (2.0 - r.nu) / 2.0;
        let eps = log_eps_n(&r, la, rad, xi, rad).exp();
        assert!((eps.ln() - target).abs() < 1e-9);
        let d = 3.0;
        let lhs = r.c_f * k.m_nco(eps, AngularMeasure::Sphere) * (r.gamma_tilde * ln_bracket(rad)).exp();
        let rhs = 0.5 * (2.0 * la + r.ln_c_q + (d + r.gamma) * rad.ln() + (0.5 * d - 1.0) * xi.ln()).exp();
        assert!((lhs / rhs - 1.0).abs() < 0.1, "ratio {}", lhs / rhs);
    }

    #[test]
    fn missing_bounds_are_reported() {
        let mut b = bounds();
        b.w_f = None;
        assert!(matches!(b.validate(&nco(0.5)), Err(CertificateError::MissingBound(n)) if n == "w_f"));
        assert!(b.validate(&hard_spheres()).is_ok());
        let soft =
            build_kernel(KernelParams { phi_kind: crate::kernel::PhiKind::Power, ..KernelParams::soft(3, -1.0) })
                .unwrap();
        assert!(matches!(bounds().validate(&soft), Err(CertificateError::MissingBound(n)) if n == "lp_f"));
    }

    #[test]
    fn pipeline_is_deterministic() {
        let k = build_kernel(KernelParams::maxwellian_cutoff(2)).unwrap();
        let d = Domain::disk([0.0, 0.0], 1.0).unwrap();
        let cfg = CertificateConfig { grazing_samples: Some(1024), ..Default::default() };
        let a = certify(&d, &k, &bounds(), &Calibration::default(), &cfg).unwrap();
        let b = certify(&d, &k, &bounds(), &Calibration::default(), &cfg).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.log_rho.unwrap().is_finite() && a.theta.unwrap() > 0.0);
        assert!(a.r_v > 0.0);
    }

    #[test]
    fn stronger_loss_lowers_the_bound_but_not_theta() {
        let k = hard_spheres();
        let mut prev: Option<Certificate> = None;
        for ef in [1.0, 2.0, 5.0, 10.0] {
            let mut b = bounds();
            b.e_f = Some(ef);
            let c = certify(&torus3(), &k, &b, &Calibration::default(), &CertificateConfig::default()).unwrap();
            if let Some(p) = &prev {
                assert!(c.log_a_centered < p.log_a_centered);
                assert!(c.log_rho.unwrap() < p.log_rho.unwrap());
                assert!((c.theta.unwrap() / p.theta.unwrap() - 1.0).abs() < 0.01);
            }
            prev = Some(c);
        }
    }
}
