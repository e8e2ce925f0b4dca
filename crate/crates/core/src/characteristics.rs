//! Backward specular rebound chains and the characteristic flow.
//!
//! Starting from `(x, v)` the chain follows `x - v s` backwards in time and
//! reflects the velocity at every boundary contact. Every tangential boundary
//! pair on a strictly convex boundary is classified as a stop.

use serde::Serialize;
use thiserror::Error;

use crate::geometry::{Domain, GeometryError, DOT_REL_TOL};
use crate::vector::{axpy, dot, norm, reflect, Vec3};

pub const DEFAULT_MAX_REBOUNDS: usize = 100_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CharacteristicError {
    #[error("velocity is zero")]
    ZeroVelocity,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundaryClass {
    /// Backward motion leaves the domain immediately.
    Rebounds,
    /// Backward motion enters the domain along a chord.
    Line,
    /// Tangential, backward motion stays in the closure.
    Rolling,
    /// Tangential, backward motion leaves the closure.
    Stop,
}

impl BoundaryClass {
    pub fn as_str(&self) -> &'static str {
        match self {
            BoundaryClass::Rebounds => "rebounds",
            BoundaryClass::Line => "line",
            BoundaryClass::Rolling => "rolling",
            BoundaryClass::Stop => "stop",
        }
    }
}

/// Classify a boundary phase pair.
pub fn classify_boundary(domain: &Domain, x: &Vec3, v: &Vec3) -> Result<BoundaryClass, CharacteristicError> {
    let speed = norm(v);
    if speed == 0.0 {
        return Err(CharacteristicError::ZeroVelocity);
    }
    let n = domain.outward_normal(x)?;
    let vn = dot(v, &n);
    let tol = DOT_REL_TOL * speed;
    if vn < -tol {
        return Ok(BoundaryClass::Rebounds);
    }
    if vn > tol {
        return Ok(BoundaryClass::Line);
    }
    // short-time membership test for x - v delta
    let delta = 1e-6 * domain.diameter() / speed;
    let probe = axpy(x, -delta, v);
    let rise = domain.signed_distance(&probe) - domain.signed_distance(x);
    if rise > 1e-14 * domain.diameter() {
        Ok(BoundaryClass::Stop)
    } else {
        Ok(BoundaryClass::Rolling)
    }
}

/// Class of a phase pair, `None` for interior points.
pub fn phase_class(domain: &Domain, x: &Vec3, v: &Vec3) -> Result<Option<BoundaryClass>, CharacteristicError> {
    if domain.on_boundary(x) {
        classify_boundary(domain, x, v).map(Some)
    } else {
        Ok(None)
    }
}

/// Largest `t` such that `x - v s` stays in the closure for all `s <= t`.
pub fn t_min_backward(domain: &Domain, x: &Vec3, v: &Vec3) -> Result<f64, CharacteristicError> {
    if norm(v) == 0.0 {
        return Err(CharacteristicError::ZeroVelocity);
    }
    if let Some(class) = phase_class(domain, x, v)? {
        match class {
            BoundaryClass::Rebounds | BoundaryClass::Stop => return Ok(0.0),
            BoundaryClass::Line | BoundaryClass::Rolling => {}
        }
    }
    let minus_v = [-v[0], -v[1], -v[2]];
    Ok(domain.first_contact(x, &minus_v)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ReboundEvent {
    pub k: usize,
    pub t: f64,
    pub x: Vec3,
    /// Velocity after reflection.
    pub v: Vec3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// The next rebound happens after the horizon (or never, on the torus).
    Horizon,
    /// The last state is a stop pair, so the next rebound time is infinite.
    Stop,
    /// The rebound budget ran out before the horizon.
    Truncated,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReboundSequence {
    pub start_x: Vec3,
    pub start_v: Vec3,
    pub events: Vec<ReboundEvent>,
    pub termination: Termination,
}

impl ReboundSequence {
    /// State `(t_k, x_k, v_k)` for `k = 0..=events.len()`.
    pub fn state(&self, k: usize) -> (f64, Vec3, Vec3) {
        if k == 0 {
            (0.0, self.start_x, self.start_v)
        } else {
            let e = &self.events[k - 1];
            (e.t, e.x, e.v)
        }
    }

    pub fn last_state(&self) -> (f64, Vec3, Vec3) {
        self.state(self.events.len())
    }
}

/// Walk the backward chain up to `horizon`, reporting each rebound to `on_event`.
/// Returns the termination reason, the rebound count and the last state.
fn walk<F: FnMut(ReboundEvent)>(
    domain: &Domain,
    x: &Vec3,
    v: &Vec3,
    horizon: f64,
    max_rebounds: usize,
    mut on_event: F,
) -> Result<(Termination, usize, f64, Vec3, Vec3), CharacteristicError> {
    if norm(v) == 0.0 {
        return Err(CharacteristicError::ZeroVelocity);
    }
    let (mut t, mut xk, mut vk) = (0.0, *x, *v);
    if domain.is_torus() {
        return Ok((Termination::Horizon, 0, t, xk, vk));
    }
    let mut count = 0;
    loop {
        if let Some(BoundaryClass::Stop) = phase_class(domain, &xk, &vk)? {
            return Ok((Termination::Stop, count, t, xk, vk));
        }
        let tm = t_min_backward(domain, &xk, &vk)?;
        if t + tm > horizon {
            return Ok((Termination::Horizon, count, t, xk, vk));
        }
        if count >= max_rebounds {
            return Ok((Termination::Truncated, count, t, xk, vk));
        }
        xk = axpy(&xk, -tm, &vk);
        let n = domain.normal_unchecked(&xk);
        vk = reflect(&vk, &n);
        t += tm;
        count += 1;
        on_event(ReboundEvent { k: count, t, x: xk, v: vk });
    }
}

/// Backward rebound chain with all rebound times `t_k <= horizon`.
pub fn rebound_sequence(
    domain: &Domain,
    x: &Vec3,
    v: &Vec3,
    horizon: f64,
    max_rebounds: usize,
) -> Result<ReboundSequence, CharacteristicError> {
    let mut events = Vec::new();
    let (termination, ..) = walk(domain, x, v, horizon, max_rebounds, |e| events.push(e))?;
    Ok(ReboundSequence { start_x: *x, start_v: *v, events, termination })
}

/// Last rebound before time `t` of the backward chain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Resolution {
    pub n: usize,
    pub x_fin: Vec3,
    pub v_fin: Vec3,
    pub t_fin: f64,
    /// The rebound budget ran out; the fields describe the last computed state.
    pub truncated: bool,
}

impl Resolution {
    /// Foot of the backward characteristic at time zero.
    pub fn foot(&self, t: f64) -> Vec3 {
        axpy(&self.x_fin, -(t - self.t_fin), &self.v_fin)
    }
}

pub fn final_rebound(
    domain: &Domain,
    t: f64,
    x: &Vec3,
    v: &Vec3,
    max_rebounds: usize,
) -> Result<Resolution, CharacteristicError> {
    let (termination, n, tn, xn, vn) = walk(domain, x, v, t, max_rebounds, |_| {})?;
    let t_fin = match termination {
        Termination::Stop => t,
        _ => tn,
    };
    Ok(Resolution { n, x_fin: xn, v_fin: vn, t_fin, truncated: termination == Termination::Truncated })
}

/// Forward characteristic `(X_t(x, v), V_t(x, v))`.
pub fn characteristic_at(domain: &Domain, x: &Vec3, v: &Vec3, t: f64) -> Result<(Vec3, Vec3), CharacteristicError> {
    if norm(v) == 0.0 {
        return Ok((*x, *v));
    }
    if domain.is_torus() {
        return Ok((domain.wrap(&axpy(x, t, v)), *v));
    }
    let minus_v = [-v[0], -v[1], -v[2]];
    let res = final_rebound(domain, t, x, &minus_v, DEFAULT_MAX_REBOUNDS)?;
    let xt = res.foot(t);
    Ok((xt, [-res.v_fin[0], -res.v_fin[1], -res.v_fin[2]]))
}
