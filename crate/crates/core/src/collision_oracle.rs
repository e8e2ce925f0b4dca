//! Monte Carlo and quadrature evaluation of the collision operator pieces
//! `Q+`, `L[g]`, `S[g]` and `Q1_eps` on velocity grids.
//!
//! Collision parameters use the sigma representation
//! `v' = (v+v*)/2 + |v-v*|/2 sigma`, `v'* = (v+v*)/2 - |v-v*|/2 sigma`, with
//! `theta` the angle between `sigma` and `v - v*`. The sphere integral is
//! split as `dsigma = sin^{d-2} theta dtheta domega`, so the angular weight
//! is the kernel's polar density and `omega` runs over `S^{d-2}`.
//!
//! Every estimator draws from `ChaCha8Rng` streams indexed by a fixed chunk
//! number, so results do not depend on the number of worker threads.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kernel::{sphere_area, AngularMeasure, Kernel, PhiKind};
use crate::quadrature::{gl, integrate_graded};
use crate::vector::{axpy, bracket, dist, dot, norm, scale, sub, Vec3, ZERO};

use std::f64::consts::PI;

const CHUNK: usize = 2048;
const ANGULAR_CELLS: usize = 256;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OracleError {
    #[error("velocity grids do not match")]
    GridMismatch,
    #[error("kernel has an integrable angular part (nu < 0); Q1 and S need a non-cutoff kernel")]
    NotNonCutoff,
    #[error("no grid node inside the target ball of radius {0}")]
    EmptyTargetBall(f64),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Uniform velocity grid `v_i = (i - n/2) h`, `h = 2 extent / n`, per axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VelocityGrid {
    pub dim: usize,
    pub extent: f64,
    pub n: usize,
}

impl VelocityGrid {
    pub fn new(dim: usize, extent: f64, n: usize) -> Result<Self, OracleError> {
        if dim != 2 && dim != 3 {
            return Err(OracleError::InvalidParameter(format!("velocity dimension {dim}")));
        }
        if n < 2 || !n.is_multiple_of(2) {
            return Err(OracleError::InvalidParameter(format!("nodes per axis must be even, got {n}")));
        }
        if !(extent > 0.0 && extent.is_finite()) {
            return Err(OracleError::InvalidParameter(format!("extent {extent}")));
        }
        Ok(VelocityGrid { dim, extent, n })
    }

    pub fn spacing(&self) -> f64 {
        2.0 * self.extent / self.n as f64
    }

    pub fn len(&self) -> usize {
        self.n.pow(self.dim as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.dim as i32)
    }

    pub fn coord(&self, i: usize) -> f64 {
        (i as f64 - (self.n / 2) as f64) * self.spacing()
    }

    /// Row-major multi-index of a flat index; unused axes are 0.
    pub fn multi(&self, mut idx: usize) -> [usize; 3] {
        let mut m = [0; 3];
        for a in (0..self.dim).rev() {
            m[a] = idx % self.n;
            idx /= self.n;
        }
        m
    }

    pub fn flat(&self, m: &[usize; 3]) -> usize {
        (0..self.dim).fold(0, |acc, a| acc * self.n + m[a])
    }

    pub fn node(&self, idx: usize) -> Vec3 {
        let m = self.multi(idx);
        let mut v = ZERO;
        for a in 0..self.dim {
            v[a] = self.coord(m[a]);
        }
        v
    }

    /// Flat index of the node nearest to `v`, if `v` lies on the node hull.
    pub fn nearest(&self, v: &Vec3) -> Option<usize> {
        let h = self.spacing();
        let mut m = [0; 3];
        for a in 0..self.dim {
            let i = (v[a] / h).round() as i64 + (self.n / 2) as i64;
            if i < 0 || i >= self.n as i64 {
                return None;
            }
            m[a] = i as usize;
        }
        Some(self.flat(&m))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    Multilinear,
    /// Catmull-Rom cubic per axis.
    Cubic,
}

/// Node values on a [`VelocityGrid`]; zero outside the node hull.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridFunction {
    pub grid: VelocityGrid,
    pub values: Vec<f64>,
    pub interpolation: Interpolation,
}

impl GridFunction {
    pub fn zeros(grid: VelocityGrid) -> Self {
        GridFunction { grid, values: vec![0.0; grid.len()], interpolation: Interpolation::Multilinear }
    }

    pub fn from_fn<F: Fn(&Vec3) -> f64>(grid: VelocityGrid, f: F) -> Self {
        let values = (0..grid.len()).map(|i| f(&grid.node(i))).collect();
        GridFunction { grid, values, interpolation: Interpolation::Multilinear }
    }

    pub fn with_interpolation(mut self, interpolation: Interpolation) -> Self {
        self.interpolation = interpolation;
        self
    }

    fn at(&self, m: &[i64; 3]) -> f64 {
        let n = self.grid.n as i64;
        let mut idx = 0usize;
        for &mi in m.iter().take(self.grid.dim) {
            if mi < 0 || mi >= n {
                return 0.0;
            }
            idx = idx * self.grid.n + mi as usize;
        }
        self.values[idx]
    }

    /// Interpolated value at an arbitrary velocity.
    pub fn eval(&self, v: &Vec3) -> f64 {
        self.eval_with(v, self.interpolation)
    }

    fn eval_with(&self, v: &Vec3, interpolation: Interpolation) -> f64 {
        let g = &self.grid;
        let h = g.spacing();
        let half = (g.n / 2) as f64;
        let mut base = [0i64; 3];
        let mut frac = [0.0; 3];
        for a in 0..g.dim {
            let s = v[a] / h + half;
            if !(s > -1.0 && s < g.n as f64) {
                return 0.0;
            }
            let f = s.floor();
            base[a] = f as i64;
            frac[a] = s - f;
        }
        match interpolation {
            Interpolation::Multilinear => {
                let mut total = 0.0;
                for corner in 0..(1usize << g.dim) {
                    let mut w = 1.0;
                    let mut m = [0i64; 3];
                    for a in 0..g.dim {
                        let bit = (corner >> a) & 1;
                        m[a] = base[a] + bit as i64;
                        w *= if bit == 1 { frac[a] } else { 1.0 - frac[a] };
                    }
                    if w != 0.0 {
                        total += w * self.at(&m);
                    }
                }
                total
            }
            Interpolation::Cubic => {
                let weights = [catmull_rom(frac[0]), catmull_rom(frac[1]), catmull_rom(frac[2])];
                let mut total = 0.0;
                for corner in 0..4usize.pow(g.dim as u32) {
                    let mut w = 1.0;
                    let mut m = [0i64; 3];
                    let mut c = corner;
                    for a in 0..g.dim {
                        let k = c % 4;
                        c /= 4;
                        m[a] = base[a] + k as i64 - 1;
                        w *= weights[a][k];
                    }
                    total += w * self.at(&m);
                }
                total
            }
        }
    }

    fn moment<F: Fn(&Vec3) -> f64>(&self, w: F) -> f64 {
        let vol = self.grid.cell_volume();
        self.values.iter().enumerate().map(|(i, f)| f * w(&self.grid.node(i))).sum::<f64>() * vol
    }

    pub fn mass(&self) -> f64 {
        self.moment(|_| 1.0)
    }

    /// `int |v|^2 g`.
    pub fn energy(&self) -> f64 {
        self.moment(|v| dot(v, v))
    }

    pub fn momentum(&self) -> Vec3 {
        let mut p = ZERO;
        for a in 0..self.grid.dim {
            p[a] = self.moment(|v| v[a]);
        }
        p
    }

    /// `int |g| <v>^k`.
    pub fn weighted_l1(&self, k: f64) -> f64 {
        let vol = self.grid.cell_volume();
        self.values.iter().enumerate().map(|(i, f)| f.abs() * bracket(norm(&self.grid.node(i))).powf(k)).sum::<f64>()
            * vol
    }

    /// Max of `|g|`, first and second centred differences over interior nodes.
    pub fn w2_inf(&self) -> f64 {
        let g = &self.grid;
        let h = g.spacing();
        let mut best = self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for idx in 0..g.len() {
            let m = g.multi(idx);
            let mi = [m[0] as i64, m[1] as i64, m[2] as i64];
            let f0 = self.values[idx];
            for a in 0..g.dim {
                let mut p = mi;
                let mut q = mi;
                p[a] += 1;
                q[a] -= 1;
                let (fp, fq) = (self.at(&p), self.at(&q));
                best = best.max(((fp - fq) / (2.0 * h)).abs());
                best = best.max(((fp - 2.0 * f0 + fq) / (h * h)).abs());
                for b in (a + 1)..g.dim {
                    let mut pp = mi;
                    let mut pq = mi;
                    let mut qp = mi;
                    let mut qq = mi;
                    pp[a] += 1;
                    pp[b] += 1;
                    pq[a] += 1;
                    pq[b] -= 1;
                    qp[a] -= 1;
                    qp[b] += 1;
                    qq[a] -= 1;
                    qq[b] -= 1;
                    let mixed = (self.at(&pp) - self.at(&pq) - self.at(&qp) + self.at(&qq)) / (4.0 * h * h);
                    best = best.max(mixed.abs());
                }
            }
        }
        best
    }
}

fn catmull_rom(t: f64) -> [f64; 4] {
    let t2 = t * t;
    let t3 = t2 * t;
    [0.5 * (-t3 + 2.0 * t2 - t), 0.5 * (3.0 * t3 - 5.0 * t2 + 2.0), 0.5 * (-3.0 * t3 + 4.0 * t2 + t), 0.5 * (t3 - t2)]
}

/// A velocity function with a known enclosing ball of its support.
pub trait VelocityField: Sync {
    fn value(&self, v: &Vec3) -> f64;
    /// Centre and radius of a ball containing the support.
    fn support(&self) -> (Vec3, f64);
}

impl VelocityField for GridFunction {
    fn value(&self, v: &Vec3) -> f64 {
        self.eval(v)
    }

    fn support(&self) -> (Vec3, f64) {
        (ZERO, self.grid.extent * (self.grid.dim as f64).sqrt())
    }
}

/// `height * 1_{B(center, radius)}` with exact membership.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BallIndicator {
    pub center: Vec3,
    pub radius: f64,
    pub height: f64,
}

impl BallIndicator {
    pub fn new(center: Vec3, radius: f64) -> Self {
        BallIndicator { center, radius, height: 1.0 }
    }
}

impl VelocityField for BallIndicator {
    fn value(&self, v: &Vec3) -> f64 {
        if dist(v, &self.center) < self.radius {
            self.height
        } else {
            0.0
        }
    }

    fn support(&self) -> (Vec3, f64) {
        (self.center, self.radius)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub samples: usize,
    pub seed: u64,
}

impl Default for McConfig {
    fn default() -> Self {
        McConfig { samples: 100_000, seed: 0x5eed }
    }
}

/// Monte Carlo mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Estimate {
    pub value: f64,
    pub stderr: f64,
    pub samples: usize,
}

impl Estimate {
    pub fn exact(value: f64) -> Self {
        Estimate { value, stderr: 0.0, samples: 0 }
    }

    pub fn relative_stderr(&self) -> f64 {
        if self.value == 0.0 {
            if self.stderr == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            self.stderr / self.value.abs()
        }
    }
}

/// Range of deviation angles included in an angular integral.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum AngularRange {
    Full,
    /// `theta >= eps`: the grazing-free part `b^CO_eps`.
    Above(f64),
    /// `theta <= eps`: the grazing part `b^NCO_eps`.
    Below(f64),
}

impl AngularRange {
    fn bounds(&self) -> (f64, f64) {
        match *self {
            AngularRange::Full => (0.0, PI),
            AngularRange::Above(e) => (e.min(PI), PI),
            AngularRange::Below(e) => (0.0, e.min(PI)),
        }
    }
}

/// Piecewise-constant proposal for `theta` with tabulated cell masses.
struct AngularSampler {
    edges: Vec<f64>,
    cdf: Vec<f64>,
    total: f64,
}

impl AngularSampler {
    fn new<W: Fn(f64) -> f64>(w: W, lo: f64, hi: f64, graded: bool) -> Self {
        let mut edges = Vec::with_capacity(ANGULAR_CELLS + 2);
        if graded {
            let floor = if lo > 0.0 { lo } else { hi * 1e-12 };
            if lo == 0.0 {
                edges.push(0.0);
            }
            let ratio = (hi / floor).ln();
            for i in 0..=ANGULAR_CELLS {
                edges.push(floor * (ratio * i as f64 / ANGULAR_CELLS as f64).exp());
            }
            *edges.last_mut().unwrap() = hi;
        } else {
            for i in 0..=ANGULAR_CELLS {
                edges.push(lo + (hi - lo) * i as f64 / ANGULAR_CELLS as f64);
            }
        }
        let mut cdf = Vec::with_capacity(edges.len());
        let mut acc = 0.0;
        cdf.push(0.0);
        for pair in edges.windows(2) {
            let m = if pair[0] == 0.0 && graded {
                integrate_graded(&w, 0.0, pair[1], 1e-10)
            } else {
                gl(&w, pair[0], pair[1])
            };
            acc += m.max(0.0);
            cdf.push(acc);
        }
        AngularSampler { edges, cdf, total: acc }
    }

    /// Draws `theta` and returns it with its normalised proposal density.
    fn draw<R: Rng>(&self, rng: &mut R) -> (f64, f64) {
        let u = rng.gen::<f64>() * self.total;
        let cell = match self.cdf.binary_search_by(|c| c.partial_cmp(&u).unwrap()) {
            Ok(i) => i.min(self.edges.len() - 2),
            Err(i) => i.saturating_sub(1).min(self.edges.len() - 2),
        };
        let (a, b) = (self.edges[cell], self.edges[cell + 1]);
        let theta = a + (b - a) * rng.gen::<f64>();
        let mass = self.cdf[cell + 1] - self.cdf[cell];
        let density = mass / ((b - a) * self.total);
        (theta, density)
    }
}

fn ball_volume(dim: usize, r: f64) -> f64 {
    match dim {
        2 => PI * r * r,
        _ => 4.0 / 3.0 * PI * r * r * r,
    }
}

fn uniform_in_ball<R: Rng>(dim: usize, c: &Vec3, r: f64, rng: &mut R) -> Vec3 {
    loop {
        let mut u = ZERO;
        for x in u.iter_mut().take(dim) {
            *x = 2.0 * rng.gen::<f64>() - 1.0;
        }
        if dot(&u, &u) <= 1.0 {
            return axpy(c, r, &u);
        }
    }
}

/// Orthonormal vectors completing the unit vector `k`.
fn complement(k: &Vec3, dim: usize) -> (Vec3, Vec3) {
    if dim == 2 {
        return ([-k[1], k[0], 0.0], ZERO);
    }
    let a = if k[0].abs() < 0.9 { [1.0, 0.0, 0.0] } else { [0.0, 1.0, 0.0] };
    let e1 = sub(&a, &scale(k, dot(&a, k)));
    let e1 = scale(&e1, 1.0 / norm(&e1));
    let e2 = [k[1] * e1[2] - k[2] * e1[1], k[2] * e1[0] - k[0] * e1[2], k[0] * e1[1] - k[1] * e1[0]];
    (e1, e2)
}

/// Unit vector `e` orthogonal to `k`, uniformly distributed.
fn draw_omega<R: Rng>(e1: &Vec3, e2: &Vec3, dim: usize, rng: &mut R) -> Vec3 {
    if dim == 2 {
        if rng.gen::<bool>() {
            *e1
        } else {
            scale(e1, -1.0)
        }
    } else {
        let phi = 2.0 * PI * rng.gen::<f64>();
        axpy(&scale(e1, phi.cos()), phi.sin(), e2)
    }
}

fn stream_rng(seed: u64, chunk: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk as u64);
    rng
}

/// Sums `f(rng)` over `samples` draws, chunked over fixed RNG streams.
fn mc_sum<F>(samples: usize, seed: u64, f: F) -> Estimate
where
    F: Fn(&mut ChaCha8Rng) -> f64 + Sync,
{
    let chunks = samples.div_ceil(CHUNK).max(1);
    let parts: Vec<(f64, f64)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(seed, c);
            let n = CHUNK.min(samples - c * CHUNK);
            let (mut s, mut s2) = (0.0, 0.0);
            for _ in 0..n {
                let x = f(&mut rng);
                s += x;
                s2 += x * x;
            }
            (s, s2)
        })
        .collect();
    let (s, s2) = parts.iter().fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
    finish(s, s2, samples)
}

/// Paired version of [`mc_sum`] for two integrands sharing their draws.
fn mc_sum2<F>(samples: usize, seed: u64, f: F) -> (Estimate, Estimate)
where
    F: Fn(&mut ChaCha8Rng) -> (f64, f64) + Sync,
{
    let chunks = samples.div_ceil(CHUNK).max(1);
    let parts: Vec<[f64; 4]> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = stream_rng(seed, c);
            let n = CHUNK.min(samples - c * CHUNK);
            let mut acc = [0.0; 4];
            for _ in 0..n {
                let (a, b) = f(&mut rng);
                acc[0] += a;
                acc[1] += a * a;
                acc[2] += b;
                acc[3] += b * b;
            }
            acc
        })
        .collect();
    let mut t = [0.0; 4];
    for p in &parts {
        for i in 0..4 {
            t[i] += p[i];
        }
    }
    (finish(t[0], t[1], samples), finish(t[2], t[3], samples))
}

fn finish(s: f64, s2: f64, samples: usize) -> Estimate {
    let n = samples as f64;
    let mean = s / n;
    let var = ((s2 / n - mean * mean) * n / (n - 1.0).max(1.0)).max(0.0);
    Estimate { value: mean, stderr: (var / n).sqrt(), samples }
}

/// Mixes a base seed with an index so nested evaluations draw independent streams.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15).rotate_left(17)
}

fn angular_sampler(kernel: &Kernel, range: AngularRange) -> Result<AngularSampler, OracleError> {
    let (lo, hi) = range.bounds();
    if !(hi > lo) {
        return Err(OracleError::InvalidParameter(format!("empty angular range {range:?}")));
    }
    if !kernel.is_cutoff() && lo == 0.0 {
        return Err(OracleError::InvalidParameter(
            "the gain term of a non-cutoff kernel needs an angular cutoff".into(),
        ));
    }
    let graded = !kernel.is_cutoff();
    Ok(AngularSampler::new(|t| kernel.polar_density(t), lo, hi, graded))
}

/// `Q+(g, h)(v)` restricted to the deviation angles in `range`.
pub fn qplus<G: VelocityField + ?Sized, H: VelocityField + ?Sized>(
    kernel: &Kernel,
    g: &G,
    h: &H,
    v: &Vec3,
    range: AngularRange,
    mc: McConfig,
) -> Result<Estimate, OracleError> {
    let d = kernel.dim();
    let sampler = angular_sampler(kernel, range)?;
    let (cg, rg) = g.support();
    let (ch, rh) = h.support();
    // v_* lies in the momentum ball and, by energy conservation about the
    // midpoint w of the supports, in a second ball; sample the smaller one
    let mut centre = sub(&[cg[0] + ch[0], cg[1] + ch[1], cg[2] + ch[2]], v);
    let mut radius = rg + rh;
    let w = scale(&[cg[0] + ch[0], cg[1] + ch[1], cg[2] + ch[2]], 0.5);
    let energy = (dist(&ch, &w) + rh).powi(2) + (dist(&cg, &w) + rg).powi(2) - dist(v, &w).powi(2);
    if energy <= 0.0 {
        return Ok(Estimate { value: 0.0, stderr: 0.0, samples: mc.samples });
    }
    if energy.sqrt() < radius {
        centre = w;
        radius = energy.sqrt();
    }
    let weight = ball_volume(d, radius) * sphere_area(d - 1);
    Ok(mc_sum(mc.samples, mc.seed, |rng| {
        let vs = uniform_in_ball(d, &centre, radius, rng);
        let rel = sub(v, &vs);
        let z = norm(&rel);
        let (theta, p) = sampler.draw(rng);
        if z == 0.0 {
            return 0.0;
        }
        let k = scale(&rel, 1.0 / z);
        let (e1, e2) = complement(&k, d);
        let e = draw_omega(&e1, &e2, d, rng);
        let sigma = axpy(&scale(&k, theta.cos()), theta.sin(), &e);
        let mid = scale(&[v[0] + vs[0], v[1] + vs[1], v[2] + vs[2]], 0.5);
        let vp = axpy(&mid, 0.5 * z, &sigma);
        let hv = h.value(&vp);
        if hv == 0.0 {
            return 0.0;
        }
        let vps = axpy(&mid, -0.5 * z, &sigma);
        let gv = g.value(&vps);
        if gv == 0.0 {
            return 0.0;
        }
        weight * kernel.phi(z) * kernel.polar_density(theta) / p * hv * gv
    }))
}

/// [`qplus`] on grid functions, checking that the grids agree.
pub fn eval_qplus(
    kernel: &Kernel,
    g: &GridFunction,
    h: &GridFunction,
    v: &Vec3,
    range: AngularRange,
    mc: McConfig,
) -> Result<Estimate, OracleError> {
    if g.grid != h.grid || g.grid.dim != kernel.dim() {
        return Err(OracleError::GridMismatch);
    }
    qplus(kernel, g, h, v, range, mc)
}

/// Angular mass entering `L`: full mass for cutoff kernels, `n_b^CO` otherwise.
fn loss_mass(kernel: &Kernel, range: AngularRange) -> f64 {
    match range {
        AngularRange::Full => kernel.n_co(0.0, AngularMeasure::Sphere),
        AngularRange::Above(e) => kernel.n_co(e, AngularMeasure::Sphere),
        AngularRange::Below(e) => kernel.n_nco(e, AngularMeasure::Sphere),
    }
}

/// Average of `Phi(|u|)` over a cell of side `h` centred at the origin.
fn singular_cell_average(kernel: &Kernel, dim: usize, h: f64) -> f64 {
    let m = 16usize;
    let cells = m.pow(dim as u32);
    let mut s = 0.0;
    for c in 0..cells {
        let mut u = ZERO;
        let mut r = c;
        for x in u.iter_mut().take(dim) {
            *x = ((r % m) as f64 + 0.5) / m as f64 * h - 0.5 * h;
            r /= m;
        }
        s += kernel.phi(norm(&u));
    }
    s / cells as f64
}

/// `L[g](v) = n_b (Phi * g)(v)` by node quadrature.
pub fn eval_loss(kernel: &Kernel, g: &GridFunction, v: &Vec3, range: AngularRange) -> Result<f64, OracleError> {
    if g.grid.dim != kernel.dim() {
        return Err(OracleError::GridMismatch);
    }
    let nb = loss_mass(kernel, range);
    Ok(nb * convolve_phi(kernel, g, v))
}

fn convolve_phi(kernel: &Kernel, g: &GridFunction, v: &Vec3) -> f64 {
    let grid = &g.grid;
    let h = grid.spacing();
    let singular = kernel.params.phi_kind == PhiKind::Power && kernel.gamma() < 0.0;
    let mut self_cell: Option<f64> = None;
    let mut s = 0.0;
    for (i, gi) in g.values.iter().enumerate() {
        if *gi == 0.0 {
            continue;
        }
        let z = dist(v, &grid.node(i));
        let phi = if singular && z < 1e-9 * h {
            *self_cell.get_or_insert_with(|| singular_cell_average(kernel, grid.dim, h))
        } else {
            kernel.phi(z)
        };
        s += phi * gi;
    }
    s * grid.cell_volume()
}

/// Grazing-part operators `(S[g](v), Q1_eps(g, h)(v))` for a non-cutoff kernel.
///
/// `theta` is drawn from `b sin^{d-2} theta * theta^2` on `(0, eps]`, and the
/// integrands are averaged over `omega` and `-omega`, which removes their
/// first-order part in `theta`.
pub fn s_and_q1<G: VelocityField + ?Sized, H: VelocityField + ?Sized>(
    kernel: &Kernel,
    eps: f64,
    g: &G,
    h: &H,
    v: &Vec3,
    mc: McConfig,
) -> Result<(Estimate, Estimate), OracleError> {
    if kernel.is_cutoff() {
        return Err(OracleError::NotNonCutoff);
    }
    if !(eps > 0.0 && eps < PI / 4.0) {
        return Err(OracleError::InvalidParameter(format!("eps = {eps} must lie in (0, pi/4)")));
    }
    let d = kernel.dim();
    let sampler = AngularSampler::new(|t| kernel.polar_density(t) * t * t, 0.0, eps, true);
    let (cg, rg) = g.support();
    let half = (0.5 * eps).sin();
    let radius = (rg + half * dist(v, &cg)) / (1.0 - half);
    let weight = ball_volume(d, radius) * sphere_area(d - 1);
    let hv = h.value(v);
    let (s_est, q_est) = mc_sum2(mc.samples, mc.seed, |rng| {
        let vs = uniform_in_ball(d, &cg, radius, rng);
        let rel = sub(v, &vs);
        let z = norm(&rel);
        let (theta, p) = sampler.draw(rng);
        if z == 0.0 {
            return (0.0, 0.0);
        }
        let k = scale(&rel, 1.0 / z);
        let (e1, e2) = complement(&k, d);
        let e = draw_omega(&e1, &e2, d, rng);
        let mid = scale(&[v[0] + vs[0], v[1] + vs[1], v[2] + vs[2]], 0.5);
        let (c, s) = (theta.cos(), theta.sin());
        let sp = axpy(&scale(&k, c), s, &e);
        let sm = axpy(&scale(&k, c), -s, &e);
        let (gp, gm) = (g.value(&axpy(&mid, -0.5 * z, &sp)), g.value(&axpy(&mid, -0.5 * z, &sm)));
        let gs = g.value(&vs);
        let (hp, hm) = (h.value(&axpy(&mid, 0.5 * z, &sp)), h.value(&axpy(&mid, 0.5 * z, &sm)));
        let w = weight * kernel.phi(z) * kernel.polar_density(theta) / p;
        (-w * (0.5 * (gp + gm) - gs), w * 0.5 * (gp * (hp - hv) + gm * (hm - hv)))
    });
    Ok((s_est, q_est))
}

/// Grid function read through Catmull-Rom interpolation whatever its own setting.
struct Smooth<'a>(&'a GridFunction);

impl VelocityField for Smooth<'_> {
    fn value(&self, v: &Vec3) -> f64 {
        self.0.eval_with(v, Interpolation::Cubic)
    }

    fn support(&self) -> (Vec3, f64) {
        self.0.support()
    }
}

/// [`s_and_q1`] on grid functions, checking that the grids agree. Both are
/// read through cubic interpolation since the integrands are second
/// differences on a scale below the grid spacing.
pub fn eval_s_and_q1(
    kernel: &Kernel,
    eps: f64,
    g: &GridFunction,
    h: &GridFunction,
    v: &Vec3,
    mc: McConfig,
) -> Result<(Estimate, Estimate), OracleError> {
    if g.grid != h.grid || g.grid.dim != kernel.dim() {
        return Err(OracleError::GridMismatch);
    }
    s_and_q1(kernel, eps, &Smooth(g), &Smooth(h), v, mc)
}

/// Per-node outcome of [`spreading_constant`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SpreadingReport {
    /// Infimum over target nodes of `Q+ / (l_b c_phi r^{d-3} R^{3+gamma} xi^{d/2-1})`.
    pub constant: f64,
    /// Standard error of the node attaining the infimum, same normalisation.
    pub stderr: f64,
    pub target_radius: f64,
    pub nodes: usize,
    pub argmin: Vec3,
    /// Largest relative standard error over the target nodes.
    pub worst_relative_stderr: f64,
}

/// Options for the adaptive per-node sampling of [`spreading_constant`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpreadingOptions {
    pub mc: McConfig,
    /// Samples are doubled until every node reaches this relative error.
    pub target_relative_stderr: f64,
    pub max_samples: usize,
}

impl Default for SpreadingOptions {
    fn default() -> Self {
        SpreadingOptions {
            mc: McConfig { samples: 10_000, seed: 0x5eed },
            target_relative_stderr: 0.02,
            max_samples: 2_560_000,
        }
    }
}

/// Numerical lower constant of the gain spreading bound for
/// `Q+(1_{B(vbar,R)}, 1_{B(vbar,r)})` on the target ball
/// `B(vbar, sqrt(r^2+R^2)(1-xi))`. Grid nodes are taken relative to `vbar`.
pub fn spreading_constant(
    kernel: &Kernel,
    vbar: &Vec3,
    r: f64,
    big_r: f64,
    xi: f64,
    grid: &VelocityGrid,
    opts: SpreadingOptions,
) -> Result<SpreadingReport, OracleError> {
    if !(r > 0.0 && r <= big_r) {
        return Err(OracleError::InvalidParameter(format!("need 0 < r <= R, got r = {r}, R = {big_r}")));
    }
    if !(xi > 0.0 && xi < 1.0) {
        return Err(OracleError::InvalidParameter(format!("xi = {xi} must lie in (0, 1)")));
    }
    if grid.dim != kernel.dim() {
        return Err(OracleError::GridMismatch);
    }
    let d = kernel.dim() as f64;
    let target = (r * r + big_r * big_r).sqrt() * (1.0 - xi);
    let offsets: Vec<Vec3> = (0..grid.len()).map(|i| grid.node(i)).filter(|u| norm(u) < target).collect();
    if offsets.is_empty() {
        return Err(OracleError::EmptyTargetBall(target));
    }
    let g = BallIndicator::new(*vbar, big_r);
    let h = BallIndicator::new(*vbar, r);
    let scale_c = kernel.l_b()
        * kernel.params.c_phi
        * r.powf(d - 3.0)
        * big_r.powf(3.0 + kernel.gamma())
        * xi.powf(0.5 * d - 1.0);
    let mut best = (f64::INFINITY, 0.0, ZERO);
    let mut worst_rel: f64 = 0.0;
    for (i, u) in offsets.iter().enumerate() {
        let v = axpy(vbar, 1.0, u);
        let mut n = opts.mc.samples;
        let mut est;
        loop {
            let mc = McConfig { samples: n, seed: derive_seed(opts.mc.seed, i as u64) };
            est = qplus(kernel, &g, &h, &v, AngularRange::Full, mc)?;
            if est.relative_stderr() <= opts.target_relative_stderr || n >= opts.max_samples {
                break;
            }
            n = (2 * n).min(opts.max_samples);
        }
        worst_rel = worst_rel.max(est.relative_stderr());
        let c = est.value / scale_c;
        if c < best.0 {
            best = (c, est.stderr / scale_c, *u);
        }
    }
    Ok(SpreadingReport {
        constant: best.0,
        stderr: best.1,
        target_radius: target,
        nodes: offsets.len(),
        argmin: axpy(vbar, 1.0, &best.2),
        worst_relative_stderr: worst_rel,
    })
}

/// A fitted constant in one of the operator bounds.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ShapeFit {
    pub lemma: String,
    pub constant: f64,
    /// Standard error at the probe attaining the maximum; 0 for quadrature fits.
    pub stderr: f64,
    pub probes: usize,
}

/// Probe velocities: grid nodes on a stride-`stride` sublattice inside the ball `radius`.
pub fn probe_nodes(grid: &VelocityGrid, stride: usize, radius: f64) -> Vec<Vec3> {
    (0..grid.len())
        .filter(|&i| {
            grid.multi(i).iter().take(grid.dim).all(|m| (*m as i64 - (grid.n / 2) as i64) % stride as i64 == 0)
        })
        .map(|i| grid.node(i))
        .filter(|v| norm(v) <= radius)
        .collect()
}

/// `max_v L[g](v) / (<v>^{gamma+} n_b C_phi e_g)` over the probes.
pub fn fit_loss_constant(kernel: &Kernel, g: &GridFunction, probes: &[Vec3]) -> Result<ShapeFit, OracleError> {
    let nb = kernel.n_co(0.0, AngularMeasure::Sphere);
    let eg = g.energy();
    let denom = nb * kernel.params.big_c_phi * eg;
    let values: Vec<f64> = probes
        .par_iter()
        .map(|v| {
            eval_loss(kernel, g, v, AngularRange::Full).map(|l| l.abs() / bracket(norm(v)).powf(kernel.gamma_plus()))
        })
        .collect::<Result<_, _>>()?;
    let constant = values.iter().fold(0.0f64, |m, x| m.max(*x)) / denom;
    Ok(ShapeFit { lemma: "loss".into(), constant, stderr: 0.0, probes: probes.len() })
}

/// Fits of `|S[g]| <= C m_b C_phi e_g <v>^{gamma+}` and
/// `|Q1(g,h)| <= C m_b C_phi |g|_{L1_{gamma~}} |h|_{W2inf} <v>^{gamma~}`.
pub fn fit_grazing_constants(
    kernel: &Kernel,
    eps: f64,
    g: &GridFunction,
    h: &GridFunction,
    probes: &[Vec3],
    mc: McConfig,
) -> Result<(ShapeFit, ShapeFit), OracleError> {
    let mb = kernel.m_nco(eps, AngularMeasure::Sphere);
    let cphi = kernel.params.big_c_phi;
    let s_den = mb * cphi * g.energy();
    let q_den = mb * cphi * g.weighted_l1(kernel.gamma_tilde()) * h.w2_inf();
    let mut s_best = (0.0f64, 0.0);
    let mut q_best = (0.0f64, 0.0);
    for (i, v) in probes.iter().enumerate() {
        let mc_i = McConfig { samples: mc.samples, seed: derive_seed(mc.seed, i as u64) };
        let (s, q) = eval_s_and_q1(kernel, eps, g, h, v, mc_i)?;
        let wb = bracket(norm(v));
        let s_ratio = s.value.abs() / (wb.powf(kernel.gamma_plus()) * s_den);
        let q_ratio = q.value.abs() / (wb.powf(kernel.gamma_tilde()) * q_den);
        if s_ratio > s_best.0 {
            s_best = (s_ratio, s.stderr / (wb.powf(kernel.gamma_plus()) * s_den));
        }
        if q_ratio > q_best.0 {
            q_best = (q_ratio, q.stderr / (wb.powf(kernel.gamma_tilde()) * q_den));
        }
    }
    Ok((
        ShapeFit { lemma: "s".into(), constant: s_best.0, stderr: s_best.1, probes: probes.len() },
        ShapeFit { lemma: "q1".into(), constant: q_best.0, stderr: q_best.1, probes: probes.len() },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::{build_kernel, KernelParams};

    fn hs() -> Kernel {
        build_kernel(KernelParams::hard_spheres()).unwrap()
    }

    #[test]
    fn grid_layout() {
        let g = VelocityGrid::new(3, 2.0, 8).unwrap();
        assert_eq!(g.len(), 512);
        assert_eq!(g.spacing(), 0.5);
        let idx = g.nearest(&ZERO).unwrap();
        assert_eq!(g.node(idx), ZERO);
        assert_eq!(g.flat(&g.multi(77)), 77);
        assert!(VelocityGrid::new(3, 2.0, 7).is_err());
    }

    #[test]
    fn interpolation_reproduces_linear_and_cubic_data() {
        let grid = VelocityGrid::new(2, 2.0, 16).unwrap();
        let lin = GridFunction::from_fn(grid, |v| 1.0 + v[0] - 0.5 * v[1]);
        assert!((lin.eval(&[0.13, -0.41, 0.0]) - (1.0 + 0.13 + 0.205)).abs() < 1e-12);
        let cub =
            GridFunction::from_fn(grid, |v| v[0] * v[0] * v[0] - v[1] * v[1]).with_interpolation(Interpolation::Cubic);
        let v = [0.37, 0.61, 0.0];
        assert!((cub.eval(&v) - (v[0].powi(3) - v[1] * v[1])).abs() < 1e-3);
    }

    #[test]
    fn vanishing_inputs_give_zero() {
        let k = hs();
        let grid = VelocityGrid::new(3, 2.0, 8).unwrap();
        let z = GridFunction::zeros(grid);
        let e = eval_qplus(&k, &z, &z, &ZERO, AngularRange::Full, McConfig { samples: 10_000, seed: 1 }).unwrap();
        assert_eq!(e.value, 0.0);
        assert_eq!(eval_loss(&k, &z, &[0.5, 0.0, 0.0], AngularRange::Full).unwrap(), 0.0);
        let nco = build_kernel(KernelParams::non_cutoff(3, 0.0, 1.0, 1.0)).unwrap();
        let (s, q) = eval_s_and_q1(&nco, 0.1, &z, &z, &ZERO, McConfig { samples: 10_000, seed: 1 }).unwrap();
        assert_eq!((s.value, q.value), (0.0, 0.0));
    }

    #[test]
    fn loss_of_point_mass_is_the_kernel() {
        let k = hs();
        let grid = VelocityGrid::new(3, 2.0, 8).unwrap();
        let mut g = GridFunction::zeros(grid);
        g.values[grid.nearest(&ZERO).unwrap()] = 1.0 / grid.cell_volume();
        for i in [0usize, 100, 300, 511] {
            let v = grid.node(i);
            let l = eval_loss(&k, &g, &v, AngularRange::Full).unwrap();
            assert!((l - norm(&v)).abs() < 1e-12);
        }
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let k = hs();
        let a = GridFunction::zeros(VelocityGrid::new(3, 2.0, 8).unwrap());
        let b = GridFunction::zeros(VelocityGrid::new(3, 2.0, 10).unwrap());
        assert_eq!(
            eval_qplus(&k, &a, &b, &ZERO, AngularRange::Full, McConfig::default()),
            Err(OracleError::GridMismatch)
        );
    }

    #[test]
    fn cutoff_kernel_has_no_grazing_operators() {
        let k = hs();
        let a = GridFunction::zeros(VelocityGrid::new(3, 2.0, 8).unwrap());
        assert_eq!(eval_s_and_q1(&k, 0.1, &a, &a, &ZERO, McConfig::default()), Err(OracleError::NotNonCutoff));
    }

    #[test]
    fn estimates_do_not_depend_on_thread_count() {
        let k = hs();
        let g = BallIndicator::new(ZERO, 1.0);
        let mc = McConfig { samples: 20_000, seed: 9 };
        let a = qplus(&k, &g, &g, &[0.3, 0.0, 0.0], AngularRange::Full, mc).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let b = pool.install(|| qplus(&k, &g, &g, &[0.3, 0.0, 0.0], AngularRange::Full, mc).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn grazing_operators_read_grids_smoothly() {
        let k = build_kernel(KernelParams::non_cutoff(3, 0.0, 1.0, 1.0)).unwrap();
        let grid = VelocityGrid::new(3, 3.0, 16).unwrap();
        let g = GridFunction::from_fn(grid, |v| (-dot(v, v)).exp());
        let mc = McConfig { samples: 5_000, seed: 2 };
        let v = [0.3, -0.2, 0.1];
        let a = eval_s_and_q1(&k, 0.1, &g, &g, &v, mc).unwrap();
        let c = g.clone().with_interpolation(Interpolation::Cubic);
        assert_eq!(a, eval_s_and_q1(&k, 0.1, &c, &c, &v, mc).unwrap());
    }

    struct Loose(BallIndicator, f64);

    impl VelocityField for Loose {
        fn value(&self, v: &Vec3) -> f64 {
            self.0.value(v)
        }

        fn support(&self) -> (Vec3, f64) {
            (ZERO, self.1)
        }
    }

    #[test]
    fn estimate_does_not_depend_on_the_declared_support() {
        let k = hs();
        let g = BallIndicator::new(ZERO, 1.0);
        let h = BallIndicator::new([0.2, 0.1, 0.0], 0.25);
        let mc = McConfig { samples: 400_000, seed: 11 };
        for v in [[0.1, 0.0, 0.0], [0.8, 0.3, 0.0]] {
            let tight = qplus(&k, &g, &h, &v, AngularRange::Full, mc).unwrap();
            let loose = qplus(&k, &Loose(g, 3.0), &Loose(h, 3.0), &v, AngularRange::Full, mc).unwrap();
            let se = tight.stderr.hypot(loose.stderr);
            assert!(tight.value > 0.0);
            assert!((tight.value - loose.value).abs() <= 4.0 * se, "{tight:?} {loose:?}");
        }
    }

    #[test]
    fn gain_vanishes_beyond_the_energy_shell() {
        let k = hs();
        let g = BallIndicator::new(ZERO, 1.0);
        let e = qplus(&k, &g, &g, &[1.5, 0.0, 0.0], AngularRange::Full, McConfig::default()).unwrap();
        assert_eq!(e.value, 0.0);
    }

    #[test]
    fn angular_split_adds_up() {
        let k = hs();
        let g = BallIndicator::new(ZERO, 1.0);
        let v = [0.4, 0.2, 0.0];
        let mc = McConfig { samples: 200_000, seed: 3 };
        let full = qplus(&k, &g, &g, &v, AngularRange::Full, mc).unwrap();
        let hi = qplus(&k, &g, &g, &v, AngularRange::Above(0.3), McConfig { seed: 4, ..mc }).unwrap();
        let lo = qplus(&k, &g, &g, &v, AngularRange::Below(0.3), McConfig { seed: 5, ..mc }).unwrap();
        let se = (full.stderr.powi(2) + hi.stderr.powi(2) + lo.stderr.powi(2)).sqrt();
        assert!((full.value - hi.value - lo.value).abs() <= 3.0 * se, "{full:?} {hi:?} {lo:?}");
    }
}
