//! Fixtures shared by the benchmarks.

use vacfill_core::certificate::Bounds;
use vacfill_core::collision_oracle::{GridFunction, VelocityGrid};
use vacfill_core::geometry::Domain;
use vacfill_core::vector::{dist, Vec3};

pub fn planar_shapes() -> Vec<(&'static str, Domain)> {
    vec![
        ("disk", Domain::disk([0.0, 0.0], 1.0).unwrap()),
        ("ellipse", Domain::ellipse([0.0, 0.0], 2.0, 1.0).unwrap()),
        ("superellipse", Domain::superellipse([0.0, 0.0], 1.5, 1.0, 4).unwrap()),
    ]
}

/// Deterministic interior points and unit directions from a golden-angle spiral.
pub fn phase_points(domain: &Domain, count: usize) -> Vec<(Vec3, Vec3)> {
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let c = domain.center();
    let reach = -domain.signed_distance(&c);
    (0..count)
        .map(|i| {
            let s = (i as f64 + 0.5) / count as f64;
            let a = golden * i as f64;
            let r = 0.95 * reach * s.sqrt();
            let x = [c[0] + r * a.cos(), c[1] + r * a.sin(), 0.0];
            let b = 0.7 * a + 1.3;
            (x, [b.cos(), b.sin(), 0.0])
        })
        .collect()
}

/// Indicator of a velocity ball off the origin, leaving a vacuum around it.
pub fn off_center_ball(grid: VelocityGrid) -> GridFunction {
    GridFunction::from_fn(grid, |v| if dist(v, &[1.5, 0.0, 0.0]) <= 1.0 { 1.0 } else { 0.0 })
}

pub fn unit_bounds() -> Bounds {
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
