#![allow(dead_code)]

/// Two-sided Kolmogorov–Smirnov statistic of `xs` against `cdf`.
pub fn ks_statistic(xs: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

/// 1% critical value used throughout: 1.63 / sqrt(n).
pub fn ks_critical(n: usize) -> f64 {
    1.63 / (n as f64).sqrt()
}

/// Standard normal CDF by composite Simpson integration of the density.
pub fn simpson_normal_cdf(z: f64) -> f64 {
    let steps = 20_000;
    let h = z / steps as f64;
    let phi = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mut acc = phi(0.0) + phi(z);
    for i in 1..steps {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * phi(i as f64 * h);
    }
    0.5 + acc * h / 3.0
}

/// Bisection on a monotone function.
pub fn bisect(f: impl Fn(f64) -> f64, target: f64, mut lo: f64, mut hi: f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

pub fn empirical_median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// P(Z1 > 0, Z2 > 0) for a standard bivariate normal with correlation rho, by
/// Simpson integration of phi(x) * Phi(rho x / sqrt(1 - rho^2)) over x > 0.
pub fn quadrant_quadrature(rho: f64) -> f64 {
    let s = (1.0 - rho * rho).sqrt();
    let phi = |t: f64| (-0.5 * t * t).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let f = |x: f64| phi(x) * simpson_normal_cdf(rho * x / s);
    let (a, b, steps) = (0.0, 10.0, 2000);
    let h = (b - a) / steps as f64;
    let mut acc = f(a) + f(b);
    for i in 1..steps {
        acc += if i % 2 == 1 { 4.0 } else { 2.0 } * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

pub mod workshop;
pub mod trial;
pub mod ext;
