use proptest::prelude::*;
use vacfill_core::characteristics::{characteristic_at, final_rebound, rebound_sequence, t_min_backward};
use vacfill_core::geometry::Domain;
use vacfill_core::vector::{dist, dot, norm, reflect, Vec3};

fn shapes() -> Vec<Domain> {
    vec![
        Domain::disk([0.0, 0.0], 1.0).unwrap(),
        Domain::ellipse([0.1, -0.2], 2.0, 1.0).unwrap(),
        Domain::superellipse([0.0, 0.0], 1.5, 1.0, 4).unwrap(),
        Domain::ball([0.0, 0.0, 0.0], 1.0).unwrap(),
        Domain::ellipsoid([0.0, 0.0, 0.0], [1.5, 1.0, 0.7]).unwrap(),
    ]
}

/// Interior point from unit-cube coordinates, by shrinking towards the centre.
fn interior(d: &Domain, u: [f64; 3]) -> Vec3 {
    let (lo, hi) = d.bounding_box();
    let c = d.center();
    let mut x = [0.0; 3];
    for i in 0..d.dim() {
        x[i] = lo[i] + u[i] * (hi[i] - lo[i]);
    }
    let mut s = 1.0;
    loop {
        let y = [c[0] + s * (x[0] - c[0]), c[1] + s * (x[1] - c[1]), c[2] + s * (x[2] - c[2])];
        if d.level(&y) < -1e-6 {
            return y;
        }
        s *= 0.9;
    }
}

fn velocity(d: &Domain, a: [f64; 3], speed: f64) -> Vec3 {
    let mut v = [0.0; 3];
    v[..d.dim()].copy_from_slice(&a[..d.dim()]);
    let n = norm(&v).max(1e-3);
    [v[0] / n * speed, v[1] / n * speed, v[2] / n * speed]
}

fn unit3() -> impl Strategy<Value = [f64; 3]> {
    [0.0..1.0f64, 0.0..1.0f64, 0.0..1.0f64]
}

fn dir3() -> impl Strategy<Value = [f64; 3]> {
    [-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn reflection_is_an_isometric_involution(a in dir3(), s in 0usize..5, th in 0.0..6.0f64) {
        let d = &shapes()[s];
        let x = d.sample_boundary(&mut rand_from(th));
        let n = d.outward_normal(&x).unwrap();
        let v = velocity(d, a, 1.7);
        let r = reflect(&v, &n);
        prop_assert!((norm(&r) - norm(&v)).abs() < 1e-12);
        prop_assert!(dist(&reflect(&r, &n), &v) < 1e-12);
        prop_assert!((dot(&r, &n) + dot(&v, &n)).abs() < 1e-12);
    }

    #[test]
    fn rebound_times_increase_and_speed_is_kept(u in unit3(), a in dir3(), s in 0usize..5, h in 0.5..8.0f64) {
        let d = &shapes()[s];
        let x = interior(d, u);
        let v = velocity(d, a, 1.3);
        let seq = rebound_sequence(d, &x, &v, h, 10_000).unwrap();
        let mut last = 0.0;
        for e in &seq.events {
            prop_assert!(e.t > last || (e.k == 1 && e.t >= last));
            prop_assert!(e.t <= h);
            prop_assert!((norm(&e.v) - 1.3).abs() < 1e-10);
            last = e.t;
        }
        // the same chain with a larger horizon extends this one
        let longer = rebound_sequence(d, &x, &v, 2.0 * h, 10_000).unwrap();
        prop_assert!(longer.events.len() >= seq.events.len());
        for (a, b) in seq.events.iter().zip(&longer.events) {
            prop_assert_eq!(a.t, b.t);
        }
    }

    #[test]
    fn t_min_vanishes_only_at_boundary(u in unit3(), a in dir3(), s in 0usize..5) {
        let d = &shapes()[s];
        let x = interior(d, u);
        let v = velocity(d, a, 1.0);
        prop_assert!(t_min_backward(d, &x, &v).unwrap() > 0.0);
    }

    #[test]
    fn characteristic_is_reversible(u in unit3(), a in dir3(), s in 0usize..5, t in 0.0..5.0f64) {
        let d = &shapes()[s];
        let x = interior(d, u);
        let v = velocity(d, a, 0.9);
        let (y, w) = characteristic_at(d, &x, &v, t).unwrap();
        let (x2, v2) = characteristic_at(d, &y, &[-w[0], -w[1], -w[2]], t).unwrap();
        prop_assert!(dist(&x2, &x) < 1e-8 * d.diameter(), "{:?} {:?}", x2, x);
        prop_assert!(dist(&v2, &[-v[0], -v[1], -v[2]]) < 1e-8);
    }

    #[test]
    fn flow_is_a_semigroup(u in unit3(), a in dir3(), s in 0usize..5, t in 0.0..3.0f64, r in 0.0..3.0f64) {
        let d = &shapes()[s];
        let x = interior(d, u);
        let v = velocity(d, a, 1.1);
        let (y1, w1) = characteristic_at(d, &x, &v, t + r).unwrap();
        let (ya, wa) = characteristic_at(d, &x, &v, t).unwrap();
        let (y2, w2) = characteristic_at(d, &ya, &wa, r).unwrap();
        prop_assert!(dist(&y1, &y2) < 1e-8 * d.diameter());
        prop_assert!(dist(&w1, &w2) < 1e-8);
        prop_assert!(d.in_closure(&y1) || d.signed_distance(&y1) < 1e-9);
    }

    #[test]
    fn resolution_time_is_bounded(u in unit3(), a in dir3(), s in 0usize..5, t in 0.0..5.0f64) {
        let d = &shapes()[s];
        let x = interior(d, u);
        let v = velocity(d, a, 1.0);
        let res = final_rebound(d, t, &x, &v, 100_000).unwrap();
        prop_assert!(res.t_fin <= t && res.t_fin >= 0.0);
    }
}

fn rand_from(seed: f64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed.to_bits())
}
