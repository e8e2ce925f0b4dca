//! Small-scale Boltzmann solvers in two velocity dimensions.
//!
//! The collision step uses the weak form with a deposit stencil: every
//! ordered node pair `(i, j)` and angle `sigma` removes `B f_i f_j` from node
//! `i` and deposits it bilinearly at `v'`. The stencil depends only on the
//! offset `j - i`, so it is computed once per grid. Pairs whose post-collision
//! velocities leave the node hull are dropped from both gain and loss, so mass
//! is conserved to rounding. An optional correction, weighted by `f`, removes
//! the small energy drift of the bilinear deposit.
//!
//! The transport step pushes every `(cell, node)` value along the exact
//! characteristic and deposits it bilinearly in `x` and `v`. Deposit weights
//! falling outside the domain or the node hull are renormalised over the
//! remaining ones.

use std::f64::consts::PI;
use std::io::{self, Write};

use nalgebra::{Matrix4, Vector4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::characteristics::{characteristic_at, CharacteristicError};
use crate::collision_oracle::{GridFunction, VelocityGrid};
use crate::geometry::Domain;
use crate::kernel::Kernel;
use crate::transport::PhaseFunction;
use crate::vector::{dist, dot, Vec3, ZERO};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("time step {dt} exceeds the stability bound {bound}")]
    StabilityViolation { dt: f64, bound: f64 },
    #[error(transparent)]
    Characteristic(#[from] CharacteristicError),
}

/// `rho (2 pi theta)^{-d/2} exp(-|v|^2 / (2 theta))`.
pub fn maxwellian(rho: f64, theta: f64, dim: usize, v: &Vec3) -> f64 {
    rho * (2.0 * PI * theta).powf(-0.5 * dim as f64) * (-dot(v, v) / (2.0 * theta)).exp()
}

fn log_maxwellian(log_rho: f64, theta: f64, dim: usize, v: &Vec3) -> f64 {
    log_rho - 0.5 * dim as f64 * (2.0 * PI * theta).ln() - dot(v, v) / (2.0 * theta)
}

#[derive(Clone, Copy, Debug)]
struct Deposit {
    base: [i64; 2],
    w: [f64; 4],
}

impl Deposit {
    fn new(s: [f64; 2]) -> Self {
        let (bx, by) = (s[0].floor(), s[1].floor());
        let (fx, fy) = (s[0] - bx, s[1] - by);
        Deposit {
            base: [bx as i64, by as i64],
            w: [(1.0 - fx) * (1.0 - fy), (1.0 - fx) * fy, fx * (1.0 - fy), fx * fy],
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct StencilEntry {
    weight: f64,
    p: Deposit,
    q: Deposit,
}

/// Collision stencil for a kernel on a two-dimensional velocity grid.
#[derive(Clone, Debug)]
pub struct Collider {
    grid: VelocityGrid,
    n_sigma: usize,
    /// Entries for offset `(dx, dy)` at `((dx + n - 1) (2n - 1) + dy + n - 1) n_sigma`.
    entries: Vec<StencilEntry>,
    pub conservative: bool,
}

impl Collider {
    pub fn new(kernel: &Kernel, grid: VelocityGrid, n_sigma: usize) -> Result<Self, SimError> {
        if grid.dim != 2 || kernel.dim() != 2 {
            return Err(SimError::InvalidParameter("the solvers run in two velocity dimensions".into()));
        }
        if !kernel.is_cutoff() {
            return Err(SimError::InvalidParameter("simulation needs a cutoff kernel".into()));
        }
        if n_sigma < 4 || !n_sigma.is_multiple_of(2) {
            return Err(SimError::InvalidParameter(format!("n_sigma must be even and at least 4, got {n_sigma}")));
        }
        let n = grid.n as i64;
        let h = grid.spacing();
        // the second half is the exact negation of the first, so v' and v'*
        // of one entry are v'* and v' of its mirror
        let half: Vec<[f64; 2]> = (0..n_sigma / 2)
            .map(|k| {
                let phi = 2.0 * PI * (k as f64 + 0.5) / n_sigma as f64;
                [phi.cos(), phi.sin()]
            })
            .collect();
        let sigmas: Vec<[f64; 2]> = half.iter().copied().chain(half.iter().map(|s| [-s[0], -s[1]])).collect();
        let w_sigma = 2.0 * PI / n_sigma as f64;
        let span = 2 * n - 1;
        let mut entries = Vec::with_capacity((span * span) as usize * n_sigma);
        for dx in -(n - 1)..n {
            for dy in -(n - 1)..n {
                let delta = [dx as f64, dy as f64];
                let c = (delta[0] * delta[0] + delta[1] * delta[1]).sqrt();
                for s in &sigmas {
                    if c == 0.0 {
                        entries.push(StencilEntry {
                            weight: 0.0,
                            p: Deposit::new([0.0; 2]),
                            q: Deposit::new([0.0; 2]),
                        });
                        continue;
                    }
                    // u = v_i - v_j = -delta h
                    let cos_theta = (-(s[0] * delta[0] + s[1] * delta[1]) / c).clamp(-1.0, 1.0);
                    let theta = cos_theta.acos();
                    let weight = h * h * w_sigma * kernel.phi(c * h) * kernel.b(theta);
                    let mid = [0.5 * delta[0], 0.5 * delta[1]];
                    let r = [0.5 * c * s[0], 0.5 * c * s[1]];
                    entries.push(StencilEntry {
                        weight,
                        p: Deposit::new([mid[0] + r[0], mid[1] + r[1]]),
                        q: Deposit::new([mid[0] - r[0], mid[1] - r[1]]),
                    });
                }
            }
        }
        Ok(Collider { grid, n_sigma, entries, conservative: true })
    }

    pub fn grid(&self) -> VelocityGrid {
        self.grid
    }

    fn fits(&self, m: [i64; 2], d: &Deposit) -> bool {
        let n = self.grid.n as i64;
        (0..2).all(|a| m[a] + d.base[a] >= 0 && m[a] + d.base[a] < n - 1)
    }

    /// Gain and loss frequency `L[f]` at every node.
    pub fn rates(&self, f: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let n = self.grid.n;
        let ni = n as i64;
        let span = 2 * ni - 1;
        let mut gain = vec![0.0; f.len()];
        let mut loss = vec![0.0; f.len()];
        for i in 0..f.len() {
            let mi = [(i / n) as i64, (i % n) as i64];
            let fi = f[i];
            let mut li = 0.0;
            for (j, &fj) in f.iter().enumerate() {
                if fj == 0.0 || j == i {
                    continue;
                }
                let mj = [(j / n) as i64, (j % n) as i64];
                let off = ((mj[0] - mi[0] + ni - 1) * span + mj[1] - mi[1] + ni - 1) as usize * self.n_sigma;
                for e in &self.entries[off..off + self.n_sigma] {
                    if !(self.fits(mi, &e.p) && self.fits(mi, &e.q)) {
                        continue;
                    }
                    li += e.weight * fj;
                    if fi > 0.0 {
                        let a = e.weight * fi * fj;
                        let b = [(mi[0] + e.p.base[0]) as usize, (mi[1] + e.p.base[1]) as usize];
                        let k = b[0] * n + b[1];
                        gain[k] += a * e.p.w[0];
                        gain[k + 1] += a * e.p.w[1];
                        gain[k + n] += a * e.p.w[2];
                        gain[k + n + 1] += a * e.p.w[3];
                    }
                }
            }
            loss[i] = li;
        }
        (gain, loss)
    }

    /// `1 / (2 max L[f])`.
    pub fn stability_bound(&self, f: &[f64]) -> f64 {
        let (_, loss) = self.rates(f);
        0.5 / loss.iter().cloned().fold(0.0, f64::max)
    }

    /// One explicit Euler step in place. Returns the minimum before clipping
    /// and the number of clipped nodes.
    pub fn step(&self, f: &mut [f64], dt: f64) -> Result<(f64, usize), SimError> {
        let (gain, loss) = self.rates(f);
        let l_max = loss.iter().cloned().fold(0.0, f64::max);
        if dt * 2.0 * l_max > 1.0 {
            return Err(SimError::StabilityViolation { dt, bound: 0.5 / l_max });
        }
        let mut q: Vec<f64> = gain.iter().zip(&loss).zip(f.iter()).map(|((g, l), fi)| g - l * fi).collect();
        if self.conservative {
            self.correct(f, &mut q);
        }
        let mut min = f64::INFINITY;
        let mut clipped = 0;
        for (fi, qi) in f.iter_mut().zip(&q) {
            *fi += dt * qi;
            min = min.min(*fi);
            if *fi < 0.0 {
                *fi = 0.0;
                clipped += 1;
            }
        }
        Ok((min, clipped))
    }

    /// Subtract `f (l0 + l1 vx + l2 vy + l3 |v|^2)` so that `q` has zero mass,
    /// momentum and energy.
    fn correct(&self, f: &[f64], q: &mut [f64]) {
        let basis = |v: &Vec3| [1.0, v[0], v[1], v[0] * v[0] + v[1] * v[1]];
        let mut a = [[0.0; 4]; 4];
        let mut rhs = [0.0; 4];
        for (i, (&fi, &qi)) in f.iter().zip(q.iter()).enumerate() {
            let phi = basis(&self.grid.node(i));
            for r in 0..4 {
                rhs[r] += qi * phi[r];
                for c in 0..4 {
                    a[r][c] += fi * phi[r] * phi[c];
                }
            }
        }
        let Some(lambda) = solve4(a, rhs) else { return };
        for (i, (&fi, qi)) in f.iter().zip(q.iter_mut()).enumerate() {
            let phi = basis(&self.grid.node(i));
            *qi -= fi * (0..4).map(|r| lambda[r] * phi[r]).sum::<f64>();
        }
    }
}

/// LU solve of a 4x4 system; `None` when singular.
fn solve4(a: [[f64; 4]; 4], b: [f64; 4]) -> Option<[f64; 4]> {
    let m = Matrix4::from_fn(|r, c| a[r][c]);
    let x = m.lu().solve(&Vector4::from(b))?;
    x.iter().all(|v| v.is_finite()).then(|| [x[0], x[1], x[2], x[3]])
}

/// Cell-centred spatial grid over the bounding box of a planar domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpaceGrid {
    pub n: usize,
    pub lo: [f64; 2],
    pub h: [f64; 2],
    pub periodic: bool,
    pub inside: Vec<bool>,
}

impl SpaceGrid {
    pub fn new(domain: &Domain, n: usize) -> Result<Self, SimError> {
        if domain.dim() != 2 {
            return Err(SimError::InvalidParameter("spatial grids are planar".into()));
        }
        if !(2..=48).contains(&n) {
            return Err(SimError::InvalidParameter(format!("cells per axis must lie in [2, 48], got {n}")));
        }
        let (lo, hi) = domain.bounding_box();
        let h = [(hi[0] - lo[0]) / n as f64, (hi[1] - lo[1]) / n as f64];
        let mut g = SpaceGrid { n, lo: [lo[0], lo[1]], h, periodic: domain.is_torus(), inside: Vec::new() };
        g.inside = (0..n * n).map(|c| domain.is_torus() || domain.signed_distance(&g.center(c)) < 0.0).collect();
        Ok(g)
    }

    pub fn center(&self, c: usize) -> Vec3 {
        let (i, j) = (c / self.n, c % self.n);
        [self.lo[0] + (i as f64 + 0.5) * self.h[0], self.lo[1] + (j as f64 + 0.5) * self.h[1], 0.0]
    }

    pub fn cell_area(&self) -> f64 {
        self.h[0] * self.h[1]
    }

    pub fn cells(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n * self.n).filter(|&c| self.inside[c])
    }

    /// Bilinear deposit weights of `x` on cell centres. `None` if no weight
    /// lands on a cell of the domain.
    fn weights(&self, x: &Vec3) -> Option<Vec<(usize, f64)>> {
        let n = self.n as i64;
        let s = [(x[0] - self.lo[0]) / self.h[0] - 0.5, (x[1] - self.lo[1]) / self.h[1] - 0.5];
        let d = Deposit::new(s);
        let mut out = Vec::with_capacity(4);
        for (k, &w) in d.w.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let (mut i, mut j) = (d.base[0] + (k / 2) as i64, d.base[1] + (k % 2) as i64);
            if self.periodic {
                i = i.rem_euclid(n);
                j = j.rem_euclid(n);
            } else if i < 0 || i >= n || j < 0 || j >= n {
                continue;
            }
            let c = (i * n + j) as usize;
            if self.inside[c] {
                out.push((c, w));
            }
        }
        let total: f64 = out.iter().map(|p| p.1).sum();
        if total <= 0.0 {
            return None;
        }
        out.iter_mut().for_each(|p| p.1 /= total);
        Some(out)
    }

    fn nearest_inside(&self, x: &Vec3) -> usize {
        self.cells()
            .min_by(|&a, &b| dist(&self.center(a), x).total_cmp(&dist(&self.center(b), x)))
            .expect("a spatial grid has at least one cell")
    }
}

fn velocity_weights(grid: &VelocityGrid, v: &Vec3) -> Vec<(usize, f64)> {
    let n = grid.n as i64;
    let h = grid.spacing();
    let half = (grid.n / 2) as f64;
    let d = Deposit::new([v[0] / h + half, v[1] / h + half]);
    let mut out = Vec::with_capacity(4);
    for (k, &w) in d.w.iter().enumerate() {
        let (i, j) = (d.base[0] + (k / 2) as i64, d.base[1] + (k % 2) as i64);
        if w > 0.0 && (0..n).contains(&i) && (0..n).contains(&j) {
            out.push(((i * n + j) as usize, w));
        }
    }
    let total: f64 = out.iter().map(|p| p.1).sum();
    if total <= 0.0 {
        let clamp = |s: f64| (s.round() as i64).clamp(0, n - 1);
        let (i, j) = (clamp(v[0] / h + half), clamp(v[1] / h + half));
        return vec![((i * n + j) as usize, 1.0)];
    }
    out.iter_mut().for_each(|p| p.1 /= total);
    out
}

/// `f(t, x, v)` on a velocity grid, optionally times a spatial grid.
/// Values are cell-major: `values[c * grid.len() + k]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KineticState {
    pub space: Option<SpaceGrid>,
    pub grid: VelocityGrid,
    pub values: Vec<f64>,
    pub t: f64,
}

impl KineticState {
    pub fn homogeneous(f0: &GridFunction) -> Self {
        KineticState { space: None, grid: f0.grid, values: f0.values.clone(), t: 0.0 }
    }

    pub fn sample<F: PhaseFunction + ?Sized>(space: SpaceGrid, grid: VelocityGrid, f0: &F) -> Self {
        let nv = grid.len();
        let mut values = vec![0.0; space.n * space.n * nv];
        for c in space.cells() {
            let x = space.center(c);
            for k in 0..nv {
                values[c * nv + k] = f0.eval(&x, &grid.node(k)).max(0.0);
            }
        }
        KineticState { space: Some(space), grid, values, t: 0.0 }
    }

    fn cells(&self) -> Vec<usize> {
        match &self.space {
            Some(s) => s.cells().collect(),
            None => vec![0],
        }
    }

    fn volume(&self) -> f64 {
        self.grid.cell_volume() * self.space.as_ref().map_or(1.0, |s| s.cell_area())
    }

    fn velocity_moment<F: Fn(&Vec3, f64) -> f64>(&self, w: F) -> f64 {
        let nv = self.grid.len();
        let mut total = 0.0;
        for c in self.cells() {
            for k in 0..nv {
                total += w(&self.grid.node(k), self.values[c * nv + k]);
            }
        }
        total * self.volume()
    }

    pub fn mass(&self) -> f64 {
        self.velocity_moment(|_, f| f)
    }

    pub fn energy(&self) -> f64 {
        self.velocity_moment(|v, f| f * dot(v, v))
    }

    pub fn l2_norm(&self) -> f64 {
        self.velocity_moment(|_, f| f * f).sqrt()
    }

    pub fn min_value(&self) -> f64 {
        let nv = self.grid.len();
        self.cells()
            .iter()
            .flat_map(|&c| self.values[c * nv..(c + 1) * nv].iter())
            .cloned()
            .fold(f64::INFINITY, f64::min)
    }

    /// Minimum of `f` over the nodes of `B(center, radius)` and all cells.
    pub fn min_over_ball(&self, center: &Vec3, radius: f64) -> f64 {
        let nv = self.grid.len();
        let nodes: Vec<usize> = (0..nv).filter(|&k| dist(&self.grid.node(k), center) <= radius).collect();
        let mut m = f64::INFINITY;
        for c in self.cells() {
            for &k in &nodes {
                m = m.min(self.values[c * nv + k]);
            }
        }
        m
    }

    /// `min_x int_{B(center, radius)} f dv` over the cells.
    pub fn min_ball_mass(&self, center: &Vec3, radius: f64) -> f64 {
        let nv = self.grid.len();
        let nodes: Vec<usize> = (0..nv).filter(|&k| dist(&self.grid.node(k), center) <= radius).collect();
        self.cells()
            .iter()
            .map(|&c| nodes.iter().map(|&k| self.values[c * nv + k]).sum::<f64>() * self.grid.cell_volume())
            .fold(f64::INFINITY, f64::min)
    }

    /// Little-endian snapshot: `u32` rank, `u32` extents, then `f64` values in
    /// row-major order. Inhomogeneous states have extents `[nx, ny, nv, nv]`
    /// with zeros in cells outside the domain; homogeneous ones `[nv, nv]`.
    pub fn write_snapshot<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let mut dims = Vec::new();
        if let Some(s) = &self.space {
            dims.extend([s.n as u32, s.n as u32]);
        }
        dims.extend([self.grid.n as u32, self.grid.n as u32]);
        w.write_all(&(dims.len() as u32).to_le_bytes())?;
        for d in &dims {
            w.write_all(&d.to_le_bytes())?;
        }
        for v in &self.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }
}

/// `inf f / M_{rho, theta}` over the grid, `+inf` when every node beats a
/// vanishing Maxwellian.
pub fn lower_bound_ratio(state: &KineticState, rho: f64, theta: f64) -> f64 {
    let nv = state.grid.len();
    let mut m = f64::INFINITY;
    for c in state.cells() {
        for k in 0..nv {
            let v = state.grid.node(k);
            let f = state.values[c * nv + k];
            let g = maxwellian(rho, theta, 2, &v);
            let r = if g > 0.0 {
                f / g
            } else if f > 0.0 {
                f64::INFINITY
            } else {
                0.0
            };
            m = m.min(r);
        }
    }
    m
}

/// `inf (ln f - ln M)` over the grid, for bounds too small to represent.
pub fn log_lower_bound_ratio(state: &KineticState, log_rho: f64, theta: f64) -> f64 {
    let nv = state.grid.len();
    let mut m = f64::INFINITY;
    for c in state.cells() {
        for k in 0..nv {
            let v = state.grid.node(k);
            m = m.min(state.values[c * nv + k].ln() - log_maxwellian(log_rho, theta, 2, &v));
        }
    }
    m
}

/// Maxwellian lower bound `rho (2 pi theta)^{-d/2} exp(-|v|^2/(2 theta))` in
/// log form, as produced by a certificate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LowerBound {
    pub log_rho: f64,
    pub theta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub t_end: f64,
    pub dt: f64,
    /// Angles on the collision circle.
    pub n_sigma: usize,
    /// Turn collisions off for a pure transport run.
    pub collisions: bool,
    /// Apply the moment correction after each collision step.
    pub conservative: bool,
    /// Keep every `k`-th state; 0 keeps none.
    pub snapshot_every: usize,
    pub bound: Option<LowerBound>,
    /// Velocity ball `(center, radius)` whose minimum is recorded each step.
    pub watch: Option<(Vec3, f64)>,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            t_end: 0.1,
            dt: 0.01,
            n_sigma: 16,
            collisions: true,
            conservative: true,
            snapshot_every: 0,
            bound: None,
            watch: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub t: f64,
    pub mass: f64,
    pub energy: f64,
    pub min_f: f64,
    /// Smallest value seen before clipping during the step.
    pub min_before_clip: f64,
    pub clipped: usize,
    pub log_lb_ratio: Option<f64>,
    pub min_watch: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub steps: Vec<StepDiagnostics>,
    pub snapshots: Vec<KineticState>,
    pub state: KineticState,
    pub warnings: Vec<String>,
}

impl Trajectory {
    pub fn mass_drift(&self) -> f64 {
        let m0 = self.steps[0].mass;
        self.steps.iter().map(|s| (s.mass - m0).abs() / m0).fold(0.0, f64::max)
    }

    pub fn energy_drift(&self) -> f64 {
        let e0 = self.steps[0].energy;
        self.steps.iter().map(|s| (s.energy - e0).abs() / e0).fold(0.0, f64::max)
    }

    pub fn clip_events(&self) -> usize {
        self.steps.iter().map(|s| s.clipped).sum()
    }
}

fn diagnostics(state: &KineticState, min_before_clip: f64, clipped: usize, cfg: &SimConfig) -> StepDiagnostics {
    StepDiagnostics {
        t: state.t,
        mass: state.mass(),
        energy: state.energy(),
        min_f: state.min_value(),
        min_before_clip,
        clipped,
        log_lb_ratio: cfg.bound.map(|b| log_lower_bound_ratio(state, b.log_rho, b.theta)),
        min_watch: cfg.watch.map(|(c, r)| state.min_over_ball(&c, r)),
    }
}

fn check(cfg: &SimConfig) -> Result<usize, SimError> {
    if !(cfg.dt > 0.0 && cfg.t_end >= 0.0 && cfg.t_end.is_finite()) {
        return Err(SimError::InvalidParameter(format!(
            "need dt > 0 and t_end >= 0, got {} and {}",
            cfg.dt, cfg.t_end
        )));
    }
    Ok((cfg.t_end / cfg.dt - 1e-9).ceil().max(0.0) as usize)
}

/// Explicit Euler on `df/dt = Q+(f, f) - L[f] f` in a single cell.
pub fn homogeneous_solve(kernel: &Kernel, f0: &GridFunction, cfg: &SimConfig) -> Result<Trajectory, SimError> {
    let steps = check(cfg)?;
    let mut collider = Collider::new(kernel, f0.grid, cfg.n_sigma)?;
    collider.conservative = cfg.conservative;
    let mut state = KineticState::homogeneous(f0);
    let mut out = Trajectory {
        steps: vec![diagnostics(&state, state.min_value(), 0, cfg)],
        snapshots: Vec::new(),
        state: state.clone(),
        warnings: Vec::new(),
    };
    for s in 0..steps {
        let next = ((s + 1) as f64 * cfg.dt).min(cfg.t_end);
        let dt = next - state.t;
        let (min, clipped) =
            if cfg.collisions { collider.step(&mut state.values, dt)? } else { (state.min_value(), 0) };
        state.t = next;
        out.steps.push(diagnostics(&state, min, clipped, cfg));
        if cfg.snapshot_every > 0 && (s + 1) % cfg.snapshot_every == 0 {
            out.snapshots.push(state.clone());
        }
    }
    out.state = state;
    Ok(out)
}

/// Push every value along its characteristic for time `tau`.
fn transport_step(domain: &Domain, state: &mut KineticState, tau: f64, underflow: &mut usize) -> Result<(), SimError> {
    let space = state.space.as_ref().expect("transport needs a spatial grid");
    let grid = state.grid;
    let nv = grid.len();
    let cells: Vec<usize> = space.cells().collect();
    let pushed: Vec<Result<(Vec<(usize, f64)>, usize), SimError>> = cells
        .par_iter()
        .map(|&c| {
            let x = space.center(c);
            let mut out = Vec::new();
            let mut missed = 0;
            for k in 0..nv {
                let f = state.values[c * nv + k];
                if f == 0.0 {
                    continue;
                }
                let (x1, v1) = characteristic_at(domain, &x, &grid.node(k), tau)?;
                let wx = match space.weights(&x1) {
                    Some(w) => w,
                    None => {
                        missed += 1;
                        vec![(space.nearest_inside(&x1), 1.0)]
                    }
                };
                let wv = velocity_weights(&grid, &v1);
                for &(c1, a) in &wx {
                    for &(k1, b) in &wv {
                        out.push((c1 * nv + k1, f * a * b));
                    }
                }
            }
            Ok((out, missed))
        })
        .collect();
    let mut next = vec![0.0; state.values.len()];
    for r in pushed {
        let (deposits, missed) = r?;
        *underflow += missed;
        for (idx, m) in deposits {
            next[idx] += m;
        }
    }
    state.values = next;
    Ok(())
}

fn collision_step(collider: &Collider, state: &mut KineticState, dt: f64) -> Result<(f64, usize), SimError> {
    let nv = state.grid.len();
    let inside = state.space.as_ref().map(|s| s.inside.clone()).unwrap_or_default();
    let results: Vec<Result<(f64, usize), SimError>> = state
        .values
        .par_chunks_mut(nv)
        .enumerate()
        .filter(|(c, _)| inside[*c])
        .map(|(_, f)| collider.step(f, dt))
        .collect();
    let mut min = f64::INFINITY;
    let mut clipped = 0;
    for r in results {
        let (m, c) = r?;
        min = min.min(m);
        clipped += c;
    }
    Ok((min, clipped))
}

/// Strang splitting `T(dt/2) C(dt) T(dt/2)` on a planar disk or torus.
pub fn inhomogeneous_solve<F: PhaseFunction + ?Sized>(
    domain: &Domain,
    kernel: &Kernel,
    f0: &F,
    space_n: usize,
    grid: VelocityGrid,
    cfg: &SimConfig,
) -> Result<Trajectory, SimError> {
    let steps = check(cfg)?;
    if domain.dim() != 2 {
        return Err(SimError::InvalidParameter("inhomogeneous runs are planar".into()));
    }
    if grid.n > 32 {
        return Err(SimError::InvalidParameter(format!("at most 32 velocity nodes per axis, got {}", grid.n)));
    }
    let space = SpaceGrid::new(domain, space_n)?;
    let mut collider = Collider::new(kernel, grid, cfg.n_sigma)?;
    collider.conservative = cfg.conservative;
    let mut state = KineticState::sample(space, grid, f0);
    let mut out = Trajectory {
        steps: vec![diagnostics(&state, state.min_value(), 0, cfg)],
        snapshots: Vec::new(),
        state: state.clone(),
        warnings: Vec::new(),
    };
    let mut underflow = 0;
    for s in 0..steps {
        let next = ((s + 1) as f64 * cfg.dt).min(cfg.t_end);
        let dt = next - state.t;
        let (mut min, mut clipped) = (f64::INFINITY, 0);
        if cfg.collisions {
            transport_step(domain, &mut state, 0.5 * dt, &mut underflow)?;
            (min, clipped) = collision_step(&collider, &mut state, dt)?;
            transport_step(domain, &mut state, 0.5 * dt, &mut underflow)?;
        } else {
            transport_step(domain, &mut state, dt, &mut underflow)?;
        }
        state.t = next;
        out.steps.push(diagnostics(&state, min.min(state.min_value()), clipped, cfg));
        if cfg.snapshot_every > 0 && (s + 1) % cfg.snapshot_every == 0 {
            out.snapshots.push(state.clone());
        }
    }
    if underflow > 0 {
        out.warnings.push(format!(
            "InterpolationUnderflow: {underflow} pushes landed outside every domain cell and went to the nearest one"
        ));
    }
    out.state = state;
    Ok(out)
}

/// Values of the exact transport solution on the state's grid.
pub fn sample_exact<F: Fn(&Vec3, &Vec3) -> f64>(state: &KineticState, exact: F) -> Vec<f64> {
    let nv = state.grid.len();
    let mut out = vec![0.0; state.values.len()];
    if let Some(space) = &state.space {
        for c in space.cells() {
            let x = space.center(c);
            for k in 0..nv {
                out[c * nv + k] = exact(&x, &state.grid.node(k));
            }
        }
    } else {
        for (k, o) in out.iter_mut().enumerate() {
            *o = exact(&ZERO, &state.grid.node(k));
        }
    }
    out
}

/// Discrete `L2` distance between the state and reference node values.
pub fn l2_error(state: &KineticState, reference: &[f64]) -> f64 {
    let nv = state.grid.len();
    let mut total = 0.0;
    for c in state.cells() {
        for k in 0..nv {
            let d = state.values[c * nv + k] - reference[c * nv + k];
            total += d * d;
        }
    }
    (total * state.volume()).sqrt()
}
