//! Adaptive Gauss-Legendre integration in one dimension.

use std::sync::OnceLock;

const ORDER: usize = 16;

/// Gauss-Legendre nodes and weights on `[-1, 1]`.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut z = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, z);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * z * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (z * p1 - p0) / (z * z - 1.0);
            let dz = p1 / dp;
            z -= dz;
            if dz.abs() < 1e-16 {
                break;
            }
        }
        x[i] = -z;
        x[n - 1 - i] = z;
        w[i] = 2.0 / ((1.0 - z * z) * dp * dp);
        w[n - 1 - i] = w[i];
    }
    (x, w)
}

fn rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| gauss_legendre(ORDER))
}

/// Fixed-order Gauss-Legendre on `[a, b]`.
pub fn gl<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
    let (x, w) = rule();
    let m = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    x.iter().zip(w).map(|(xi, wi)| wi * f(m + h * xi)).sum::<f64>() * h
}

fn adapt<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, whole: f64, tol: f64, depth: u32) -> f64 {
    let m = 0.5 * (a + b);
    let left = gl(f, a, m);
    let right = gl(f, m, b);
    let split = left + right;
    if depth == 0 || (split - whole).abs() <= tol.max(1e-15 * split.abs()) {
        return split;
    }
    adapt(f, a, m, left, 0.5 * tol, depth - 1) + adapt(f, m, b, right, 0.5 * tol, depth - 1)
}

/// Adaptive Gauss-Legendre with absolute tolerance `tol`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    if a == b {
        return 0.0;
    }
    let whole = gl(&f, a, b);
    adapt(&f, a, b, whole, tol, 40)
}

/// `int_a^b f` for an integrand that may be singular (but integrable) at `a`,
/// using dyadic pieces graded towards `a`. Requires `a >= 0`.
pub fn integrate_graded<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, rel_tol: f64) -> f64 {
    assert!(b > a && a >= 0.0);
    let mut total: f64 = 0.0;
    let mut hi = b;
    let gap = b - a;
    let mut k = 0;
    loop {
        let lo = a + 0.5 * (hi - a);
        let piece = integrate(&f, lo, hi, rel_tol * (total.abs() + gl(&f, lo, hi).abs()).max(1e-300));
        total += piece;
        hi = lo;
        k += 1;
        let left = hi - a;
        if left <= 1e-300 || left <= gap * 1e-300 || k > 1100 {
            break;
        }
        if piece.abs() <= rel_tol * 1e-3 * total.abs() && k > 8 {
            break;
        }
    }
    total
}
