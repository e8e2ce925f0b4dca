//! Run configuration read from a TOML file. Unknown keys are rejected.

use serde::{Deserialize, Serialize};

use vacfill_core::certificate::{Bounds, Calibration, CertificateConfig};
use vacfill_core::kernel::{build_kernel, AngularProfile, Kernel, KernelParams, PhiKind};
use vacfill_core::transport::InitialData;
use vacfill_core::vector::{from_slice, Vec3};
use vacfill_core::Domain;

use crate::CliError;

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    /// Output directory; the `--out` flag takes precedence.
    pub output: Option<String>,
    pub domain: Option<DomainConfig>,
    pub kernel: Option<KernelConfig>,
    pub bounds: Option<Bounds>,
    pub calibration: Option<Calibration>,
    /// JSON file holding a calibration; merged under `[calibration]`.
    pub calibration_file: Option<String>,
    pub trace: Option<TraceConfig>,
    pub classify: Option<ClassifyConfig>,
    pub transport: Option<TransportConfig>,
    pub lemma_check: Option<LemmaConfig>,
    pub certificate: Option<CertificateConfig>,
    pub grazing: Option<GrazingConfig>,
    pub simulate: Option<SimulateConfig>,
}

pub fn parse(text: &str) -> Result<RunConfig, CliError> {
    if text.trim().is_empty() {
        return Err(CliError::Config(
            "line 1: the configuration is empty; expected at least a `[domain]` table".into(),
        ));
    }
    toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
}

pub fn require<'a, T>(v: &'a Option<T>, key: &str) -> Result<&'a T, CliError> {
    v.as_ref().ok_or_else(|| CliError::Config(format!("missing key `{key}`")))
}

pub fn vec3(v: &[f64], dim: usize, key: &str) -> Result<Vec3, CliError> {
    if v.len() != dim {
        return Err(CliError::Config(format!("`{key}` needs {dim} entries, got {}", v.len())));
    }
    Ok(from_slice(v))
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DomainConfig {
    pub shape: String,
    pub center: Option<Vec<f64>>,
    pub radius: Option<f64>,
    pub axes: Option<Vec<f64>>,
    pub exponent: Option<u32>,
    pub period: Option<Vec<f64>>,
}

impl DomainConfig {
    pub fn build(&self) -> Result<Domain, CliError> {
        let geo =
            |r: Result<Domain, vacfill_core::GeometryError>| r.map_err(|e| CliError::Config(format!("domain: {e}")));
        let need = |v: &Option<f64>, k: &str| v.ok_or_else(|| CliError::Config(format!("missing key `domain.{k}`")));
        let list = |v: &Option<Vec<f64>>, k: &str, n: usize| -> Result<Vec<f64>, CliError> {
            let v = v.clone().ok_or_else(|| CliError::Config(format!("missing key `domain.{k}`")))?;
            if v.len() != n {
                return Err(CliError::Config(format!("`domain.{k}` needs {n} entries, got {}", v.len())));
            }
            Ok(v)
        };
        let center = |n: usize| -> Result<Vec<f64>, CliError> {
            match &self.center {
                None => Ok(vec![0.0; n]),
                Some(_) => list(&self.center, "center", n),
            }
        };
        match self.shape.as_str() {
            "disk" => {
                let c = center(2)?;
                geo(Domain::disk([c[0], c[1]], need(&self.radius, "radius")?))
            }
            "ball" => {
                let c = center(3)?;
                geo(Domain::ball([c[0], c[1], c[2]], need(&self.radius, "radius")?))
            }
            "ellipse" => {
                let (c, a) = (center(2)?, list(&self.axes, "axes", 2)?);
                geo(Domain::ellipse([c[0], c[1]], a[0], a[1]))
            }
            "ellipsoid" => {
                let (c, a) = (center(3)?, list(&self.axes, "axes", 3)?);
                geo(Domain::ellipsoid([c[0], c[1], c[2]], [a[0], a[1], a[2]]))
            }
            "superellipse" => {
                let (c, a) = (center(2)?, list(&self.axes, "axes", 2)?);
                let p = self.exponent.ok_or_else(|| CliError::Config("missing key `domain.exponent`".into()))?;
                geo(Domain::superellipse([c[0], c[1]], a[0], a[1], p))
            }
            "torus" => {
                let p = self.period.clone().ok_or_else(|| CliError::Config("missing key `domain.period`".into()))?;
                geo(Domain::torus(&p))
            }
            other => Err(CliError::Config(format!(
                "unknown `domain.shape` {other:?}; expected disk, ball, ellipse, ellipsoid, superellipse or torus"
            ))),
        }
    }
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct KernelConfig {
    pub preset: Option<String>,
    pub dim: Option<usize>,
    pub gamma: Option<f64>,
    pub phi_kind: Option<PhiKind>,
    pub c_phi: Option<f64>,
    pub big_c_phi: Option<f64>,
    pub profile: Option<AngularProfile>,
    pub nu: Option<f64>,
    pub b0: Option<f64>,
}

impl KernelConfig {
    /// Preset (if any) with explicit fields layered on top. `dim` defaults to
    /// the domain dimension.
    pub fn build(&self, default_dim: usize) -> Result<Kernel, CliError> {
        let dim = self.dim.unwrap_or(default_dim);
        let mut p = match &self.preset {
            Some(name) => KernelParams::preset(name, dim).ok_or_else(|| {
                CliError::Config(format!(
                    "unknown `kernel.preset` {name:?}; expected hard_spheres, maxwellian_cutoff, soft or non_cutoff"
                ))
            })?,
            None => KernelParams {
                dim,
                gamma: self
                    .gamma
                    .ok_or_else(|| CliError::Config("missing key `kernel.gamma` (or `kernel.preset`)".into()))?,
                phi_kind: PhiKind::Power,
                c_phi: 1.0,
                big_c_phi: 1.0,
                profile: self
                    .profile
                    .ok_or_else(|| CliError::Config("missing key `kernel.profile` (or `kernel.preset`)".into()))?,
                nu: None,
                b0: None,
            },
        };
        p.dim = dim;
        if let Some(g) = self.gamma {
            p.gamma = g;
        }
        if let Some(k) = self.phi_kind {
            p.phi_kind = k;
        }
        if let Some(c) = self.c_phi {
            p.c_phi = c;
        }
        if let Some(c) = self.big_c_phi {
            p.big_c_phi = c;
        }
        if let Some(pr) = self.profile {
            p.profile = pr;
        }
        match (&mut p.profile, self.profile) {
            // a power-law preset takes nu and b0 as its own exponent and prefactor
            (AngularProfile::PowerLaw { nu, b0 }, None) => {
                *nu = self.nu.unwrap_or(*nu);
                *b0 = self.b0.unwrap_or(*b0);
            }
            _ => {
                p.nu = self.nu.or(p.nu);
                p.b0 = self.b0.or(p.b0);
            }
        }
        build_kernel(p).map_err(|e| CliError::Config(format!("kernel: {e}")))
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TraceConfig {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
    pub horizon: f64,
    pub max_rebounds: Option<usize>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PhasePair {
    pub x: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyConfig {
    #[serde(default)]
    pub pairs: Vec<PhasePair>,
    /// Boundary parameters `2 pi i / boundary_samples` of a planar domain.
    #[serde(default)]
    pub boundary_samples: usize,
    /// Velocity angles `2 pi j / directions` per boundary sample.
    #[serde(default)]
    pub directions: usize,
}

/// Initial datum with coordinates given per dimension.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum U0Config {
    Gaussian { x0: Vec<f64>, sx: f64, v0: Vec<f64>, sv: f64 },
    Indicator { x0: Vec<f64>, rx: f64, v0: Vec<f64>, rv: f64 },
    Polynomial { x0: Vec<f64>, rx: f64, v0: Vec<f64>, rv: f64, k: u32 },
}

impl U0Config {
    pub fn build(&self, dim: usize) -> Result<InitialData, CliError> {
        let pos = |s: f64, k: &str| {
            if s > 0.0 && s.is_finite() {
                Ok(s)
            } else {
                Err(CliError::Config(format!("`u0.{k}` must be positive, got {s}")))
            }
        };
        Ok(match self {
            U0Config::Gaussian { x0, sx, v0, sv } => InitialData::Gaussian {
                x0: vec3(x0, dim, "u0.x0")?,
                sx: pos(*sx, "sx")?,
                v0: vec3(v0, dim, "u0.v0")?,
                sv: pos(*sv, "sv")?,
            },
            U0Config::Indicator { x0, rx, v0, rv } => InitialData::Indicator {
                x0: vec3(x0, dim, "u0.x0")?,
                rx: pos(*rx, "rx")?,
                v0: vec3(v0, dim, "u0.v0")?,
                rv: pos(*rv, "rv")?,
            },
            U0Config::Polynomial { x0, rx, v0, rv, k } => InitialData::Polynomial {
                x0: vec3(x0, dim, "u0.x0")?,
                rx: pos(*rx, "rx")?,
                v0: vec3(v0, dim, "u0.v0")?,
                rv: pos(*rv, "rv")?,
                k: *k,
            },
        })
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TransportConfig {
    pub u0: U0Config,
    pub nx: usize,
    pub nv: usize,
    pub v_radius: f64,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    pub times: Vec<f64>,
}

fn default_tolerance() -> f64 {
    1e-2
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub extent: f64,
    pub n: usize,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Lemma {
    Spreading,
    Loss,
    GrazingOperators,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct LemmaConfig {
    pub lemma: Lemma,
    pub grid: GridConfig,
    /// Spreading: centre, radii and shrink factor.
    pub vbar: Option<Vec<f64>>,
    pub r: Option<f64>,
    pub big_r: Option<f64>,
    pub xi: Option<f64>,
    /// Loss and grazing operators: temperature of the Maxwellian `g`.
    pub theta: Option<f64>,
    /// Grazing operators: angular split.
    pub eps: Option<f64>,
    pub samples: Option<usize>,
    pub target_relative_stderr: Option<f64>,
    /// Probe sublattice stride and radius.
    pub stride: Option<usize>,
    pub probe_radius: Option<f64>,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct GrazingConfig {
    pub eps: Vec<f64>,
    #[serde(default = "half")]
    pub v_min: f64,
    #[serde(default = "one")]
    pub v_max: f64,
    /// Defaults to `t_eps`.
    pub tau2: Option<f64>,
    #[serde(default)]
    pub trials: usize,
    pub boundary_samples: Option<usize>,
}

fn half() -> f64 {
    0.5
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, Deserialize, Serialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    Homogeneous,
    Inhomogeneous,
}

#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct BoundConfig {
    pub log_rho: f64,
    pub theta: f64,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct BallConfig {
    pub center: Vec<f64>,
    pub radius: f64,
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    pub mode: SimMode,
    pub t_end: f64,
    pub dt: f64,
    pub velocity: GridConfig,
    pub f0: U0Config,
    pub space_n: Option<usize>,
    pub n_sigma: Option<usize>,
    #[serde(default = "yes")]
    pub conservative: bool,
    #[serde(default)]
    pub snapshot_every: usize,
    pub bound: Option<BoundConfig>,
    /// Velocity ball whose minimum is tracked.
    pub vacuum: Option<BallConfig>,
}

fn yes() -> bool {
    true
}
