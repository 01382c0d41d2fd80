//! Bracketed CDF inversion.

/// Width at which the bracket is considered closed, on the standardized scale.
pub(crate) const WIDTH_TOL: f64 = 1e-12;
const MAX_STEPS: usize = 400;

/// Solves `cdf(x) = p` on `[lo, hi]`, where `cdf(lo) <= p <= cdf(hi)`.
///
/// Each step keeps the sign-change bracket. A Newton step from the current
/// iterate is taken when it lands strictly inside the bracket and at least
/// halves the bracket width; otherwise the bracket is bisected. The loop stops
/// once the bracket (or the accepted Newton step) is below [`WIDTH_TOL`], then
/// one final Newton polish is applied if it improves the residual.
pub(crate) fn invert_cdf<C, D>(p: f64, mut lo: f64, mut hi: f64, start: f64, cdf: C, pdf: D) -> f64
where
    C: Fn(f64) -> f64,
    D: Fn(f64) -> f64,
{
    let mut x = if start > lo && start < hi { start } else { 0.5 * (lo + hi) };
    for _ in 0..MAX_STEPS {
        let fx = cdf(x) - p;
        if fx == 0.0 {
            return x;
        }
        if fx < 0.0 {
            lo = x;
        } else {
            hi = x;
        }
        let tol = WIDTH_TOL * x.abs().max(1.0);
        if hi - lo <= tol {
            break;
        }
        let d = pdf(x);
        let newton = x - fx / d;
        if d > 0.0 && newton.is_finite() && newton > lo && newton < hi && (newton - x).abs() < 0.5 * (hi - lo) {
            let step = (newton - x).abs();
            x = newton;
            if step <= tol {
                break;
            }
        } else {
            x = 0.5 * (lo + hi);
        }
    }
    polish(p, x, lo, hi, &cdf, &pdf)
}

fn polish<C, D>(p: f64, x: f64, lo: f64, hi: f64, cdf: &C, pdf: &D) -> f64
where
    C: Fn(f64) -> f64,
    D: Fn(f64) -> f64,
{
    let fx = cdf(x) - p;
    let d = pdf(x);
    if !(d > 0.0) {
        return x;
    }
    let y = x - fx / d;
    if y.is_finite() && y >= lo && y <= hi && (cdf(y) - p).abs() < fx.abs() {
        y
    } else {
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverts_exponential() {
        let p: f64 = 1.0 - (-1.0f64).exp();
        let x = invert_cdf(p, 0.0, 50.0, 25.0, |x| 1.0 - (-x).exp(), |x| (-x).exp());
        assert!((x - 1.0).abs() < 1e-12);
    }

    #[test]
    fn survives_zero_density_start() {
        // Uniform on [0, 1] with the iterate starting where the density vanishes.
        let cdf = |x: f64| x.clamp(0.0, 1.0);
        let pdf = |x: f64| if (0.0..=1.0).contains(&x) { 1.0 } else { 0.0 };
        let x = invert_cdf(0.3, -4.0, 4.0, 3.0, cdf, pdf);
        assert!((x - 0.3).abs() < 1e-12);
    }
}
