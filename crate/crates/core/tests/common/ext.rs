//! Hand-written oracle for the log-shift extension model with a Beta anchor
//! on [0, 0.7] at conditioning point 0.65.

use elicit::distfit::FittedDistribution;

pub fn beta_anchor() -> FittedDistribution {
    FittedDistribution::beta(2.81, 3.05, 0.0, 0.70).unwrap()
}

/// Synthetic increasing medians away from the anchor point 0.65.
pub fn elicited() -> Vec<(f64, f64)> {
    vec![(0.50, 0.20), (0.60, 0.30), (0.70, 0.36), (0.75, 0.40)]
}

/// Median-function oracle: log-linear interpolation written out by hand.
pub fn m_oracle(y: f64) -> f64 {
    let mut knots = elicited();
    knots.push((0.65, beta_anchor().median()));
    knots.sort_by(|a, b| a.0.total_cmp(&b.0));
    let seg = knots.windows(2).find(|w| y >= w[0].0 && y <= w[1].0).unwrap();
    let t = (y - seg[0].0) / (seg[1].0 - seg[0].0);
    (seg[0].1.ln() * (1.0 - t) + seg[1].1.ln() * t).exp()
}

/// Scale c for which c * X_anchor restricted to [0, 0.7] has median m(y):
/// F(m / c) = F(0.7 / c) / 2, solved by bisection.
pub fn oracle_scale(y: f64) -> f64 {
    let a = beta_anchor();
    let m = m_oracle(y);
    let g = |c: f64| a.cdf(m / c) - 0.5 * a.cdf(0.70 / c);
    let (mut lo, mut hi): (f64, f64) = (1e-3, 1e3);
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if g(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (lo * hi).sqrt()
}

/// Conditional CDF oracle for the log-shift rule with upper truncation at 0.7:
/// X | y has the law of c * X_anchor restricted to [0, 0.7], with c chosen so
/// the restricted law keeps the median m(y).
pub fn conditional_cdf_oracle(y: f64, x: f64) -> f64 {
    scaled_cdf(oracle_scale(y), x)
}

/// CDF of c * X_anchor restricted to [0, 0.7].
pub fn scaled_cdf(c: f64, x: f64) -> f64 {
    let a = beta_anchor();
    let kept = a.cdf(0.70 / c).min(1.0);
    (a.cdf(x / c) / kept).min(1.0)
}
