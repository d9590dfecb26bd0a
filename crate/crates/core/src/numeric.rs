//! Small numerical kit: adaptive Simpson quadrature, Gauss-Legendre nodes,
//! and the (e^{z t} - 1)/z helper that keeps g = beta style limits exact.

use crate::error::{Error, Result};

/// Decimal with 17 significant digits; round-trips f64 bit-exactly.
pub fn fmt_g17(x: f64) -> String {
    format!("{x:.16e}")
}

/// (e^{z * tau} - 1) / z, continuous through z = 0 where it equals tau.
pub fn exp_rel(z: f64, tau: f64) -> f64 {
    if z == 0.0 {
        tau
    } else {
        (z * tau).exp_m1() / z
    }
}

/// Total-order wrapper so f64 keys can live in heaps and sorts.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OrdF64(pub f64);

impl Eq for OrdF64 {}
impl PartialOrd for OrdF64 {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

fn simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

fn adaptive_step(
    f: &impl Fn(f64) -> f64,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Option<f64> {
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm);
    let frm = f(rm);
    let left = simpson(f, a, m, fa, flm, fm);
    let right = simpson(f, m, b, fm, frm, fb);
    let delta = left + right - whole;
    if delta.abs() <= 15.0 * tol {
        return Some(left + right + delta / 15.0);
    }
    if depth == 0 {
        return None;
    }
    let l = adaptive_step(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)?;
    let r = adaptive_step(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)?;
    Some(l + r)
}

/// Adaptive Simpson on [a, b] with absolute tolerance `tol`.
pub fn adaptive_simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let fa = f(a);
    let fb = f(b);
    let m = 0.5 * (a + b);
    let fm = f(m);
    let whole = simpson(&f, a, b, fa, fm, fb);
    adaptive_step(&f, a, b, fa, fm, fb, whole, tol, 48)
        .ok_or(Error::Quadrature { a, b, tol })
}

/// Gauss-Legendre nodes and weights on [-1, 1], by Newton iteration on the
/// Legendre polynomial roots.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 2);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        // Chebyshev-based initial guess.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Evaluate P_n(x) and P_n'(x) by recurrence.
            let mut p0 = 1.0;
            let mut p1 = x;
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

/// Integrate f on [a, b] with an n-point Gauss-Legendre rule.
pub fn gauss_legendre_integrate(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let (nodes, weights) = gauss_legendre(n);
    let c = 0.5 * (b - a);
    let d = 0.5 * (a + b);
    nodes
        .iter()
        .zip(&weights)
        .map(|(&x, &w)| w * f(c * x + d))
        .sum::<f64>()
        * c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exp_rel_matches_limit() {
        assert_eq!(exp_rel(0.0, 3.5), 3.5);
        let z = 1e-9;
        assert!((exp_rel(z, 2.0) - 2.0).abs() < 1e-8);
        assert!((exp_rel(0.5, 2.0) - (1f64.exp() - 1.0) / 0.5).abs() < 1e-14);
    }

    #[test]
    fn simpson_is_exact_for_cubics_and_tight_for_exp() {
        let i = adaptive_simpson(|x| x * x * x - 2.0 * x + 1.0, -1.0, 3.0, 1e-12).unwrap();
        assert!((i - (81.0 / 4.0 - 1.0 / 4.0 - 9.0 + 1.0 + 4.0)).abs() < 1e-10);
        let e = adaptive_simpson(|x| x.exp(), 0.0, 1.0, 1e-12).unwrap();
        assert!((e - 1f64.exp() + 1.0).abs() < 1e-11);
    }

    #[test]
    fn gauss_legendre_integrates_exp() {
        let v = gauss_legendre_integrate(|x| x.exp(), 0.0, 1.0, 64);
        assert!((v - (1f64.exp() - 1.0)).abs() < 1e-13);
        // exact for polynomials of degree 2n-1
        let p = gauss_legendre_integrate(|x| x.powi(7), 0.0, 2.0, 4);
        assert!((p - 32.0).abs() < 1e-11);
    }
}
