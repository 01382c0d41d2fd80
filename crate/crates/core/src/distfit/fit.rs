//! Least-squares fitting on the probability scale.
//!
//! The loss is `sum_i (F(value_i) - cum_prob_i)^2`, minimized over the family
//! parameters by Nelder–Mead from eight deterministic starting points. Search
//! coordinates are unconstrained: location parameters are standardized by a
//! normal-score regression through the constraints and positive parameters
//! enter through their logarithm.

use serde::{Deserialize, Serialize};

use super::simplex::{minimize, SimplexOptions};
use super::{
    normalize_constraints, std_normal_quantile, DistError, Family, FittedDistribution, ProbabilityConstraint,
    Support, DEFAULT_T_DF,
};

/// Multiplier on the spread estimate and shift (in spread units) of the
/// location estimate for each start.
const STARTS: [(f64, f64); 8] = [
    (1.0, 0.0),
    (0.5, 0.0),
    (2.0, 0.0),
    (0.25, 0.0),
    (4.0, 0.0),
    (1.0, -0.5),
    (1.0, 0.5),
    (1.5, 0.25),
];

/// Log-parameters beyond this magnitude are treated as invalid.
const LOG_PARAM_LIMIT: f64 = 25.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fit {
    pub distribution: FittedDistribution,
    #[serde(with = "crate::decimal")]
    pub residual: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub t_df: f64,
    pub simplex: SimplexOptions,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            t_df: DEFAULT_T_DF,
            simplex: SimplexOptions::default(),
        }
    }
}

/// Location and spread implied by regressing values on normal scores.
#[derive(Debug, Clone, Copy)]
struct Scale {
    center: f64,
    spread: f64,
}

impl Scale {
    fn estimate(cs: &[ProbabilityConstraint]) -> Scale {
        let n = cs.len() as f64;
        let zs: Vec<f64> = cs.iter().map(|c| std_normal_quantile(c.cum_prob)).collect();
        let zbar = zs.iter().sum::<f64>() / n;
        let vbar = cs.iter().map(|c| c.value).sum::<f64>() / n;
        let sxy: f64 = zs.iter().zip(cs).map(|(z, c)| (z - zbar) * (c.value - vbar)).sum();
        let sxx: f64 = zs.iter().map(|z| (z - zbar).powi(2)).sum();
        let spread = if sxx > 0.0 && sxy > 0.0 {
            sxy / sxx
        } else {
            (cs[cs.len() - 1].value - cs[0].value).abs().max(1e-12)
        };
        Scale {
            center: vbar - spread * zbar,
            spread,
        }
    }
}

struct Problem<'a> {
    family: Family,
    support: Support,
    constraints: &'a [ProbabilityConstraint],
    scale: Scale,
    t_df: f64,
}

impl Problem<'_> {
    fn decode(&self, theta: &[f64]) -> Option<FittedDistribution> {
        let s = self.scale;
        let bounded = |t: f64| (t.abs() <= LOG_PARAM_LIMIT).then(|| t.exp());
        let params = match self.family {
            Family::Normal => vec![s.center + s.spread * theta[0], s.spread * bounded(theta[1])?],
            Family::StudentT => vec![s.center + s.spread * theta[0], s.spread * bounded(theta[1])?, self.t_df],
            Family::Gamma => vec![bounded(theta[0])?, bounded(theta[1])? / s.spread],
            Family::Lognormal => vec![theta[0], bounded(theta[1])?],
            Family::Beta => vec![bounded(theta[0])?, bounded(theta[1])?],
        };
        FittedDistribution::new(self.family, params, self.support).ok()
    }

    fn loss(&self, theta: &[f64]) -> f64 {
        match self.decode(theta) {
            Some(d) => self
                .constraints
                .iter()
                .map(|c| (d.cdf(c.value) - c.cum_prob).powi(2))
                .sum(),
            None => f64::INFINITY,
        }
    }

    /// Moment-matched starting point with the spread scaled by `factor` and the
    /// location moved by `shift` spread units.
    fn start(&self, factor: f64, shift: f64) -> (Vec<f64>, Vec<f64>) {
        let s = self.scale;
        let center = s.center + shift * s.spread;
        let spread = s.spread * factor;
        let lower = self.support.lower;
        match self.family {
            Family::Normal | Family::StudentT => (vec![shift, factor.ln()], vec![0.25, 0.25]),
            Family::Lognormal => {
                let med = (center - lower).max(0.1 * s.spread);
                let sigma = (spread / med).clamp(0.02, 5.0);
                (vec![med.ln(), sigma.ln()], vec![0.25, 0.25])
            }
            Family::Gamma => {
                let mean = (center - lower).max(0.1 * s.spread);
                let var = spread * spread;
                let shape = mean * mean / var;
                let rate = mean / var;
                (vec![shape.ln(), (rate * s.spread).ln()], vec![0.25, 0.25])
            }
            Family::Beta => {
                let width = self.support.width();
                let m = ((center - lower) / width).clamp(0.02, 0.98);
                let var = (spread / width).powi(2).min(0.9 * m * (1.0 - m));
                let kappa = (m * (1.0 - m) / var - 1.0).max(0.1);
                (vec![(m * kappa).ln(), ((1.0 - m) * kappa).ln()], vec![0.25, 0.25])
            }
        }
    }
}

/// Fits `family` on `support` with default options.
pub fn fit(family: Family, support: Support, constraints: &[ProbabilityConstraint]) -> Result<Fit, DistError> {
    fit_with(family, support, constraints, &FitOptions::default())
}

pub fn fit_with(
    family: Family,
    support: Support,
    constraints: &[ProbabilityConstraint],
    opts: &FitOptions,
) -> Result<Fit, DistError> {
    if !family.accepts(&support) {
        return Err(DistError::IncompatibleSupport { family, support });
    }
    if family == Family::StudentT && !(opts.t_df > 0.0 && opts.t_df.is_finite()) {
        return Err(DistError::InvalidParameters {
            family,
            reason: format!("degrees of freedom {} must be positive", opts.t_df),
        });
    }
    let cs = normalize_constraints(constraints)?;
    if cs.len() < 2 {
        return Err(DistError::InvalidConstraints(format!(
            "at least 2 constraints are required, got {}",
            cs.len()
        )));
    }
    if let Some(c) = cs.iter().find(|c| !support.contains(c.value)) {
        return Err(DistError::InvalidConstraints(format!(
            "value {} lies outside support {support}",
            c.value
        )));
    }

    let problem = Problem {
        family,
        support,
        constraints: &cs,
        scale: Scale::estimate(&cs),
        t_df: opts.t_df,
    };

    let mut best: Option<(f64, Vec<f64>)> = None;
    let mut best_any = f64::INFINITY;
    for (factor, shift) in STARTS {
        let (x0, steps) = problem.start(factor, shift);
        let out = minimize(|t| problem.loss(t), &x0, &steps, opts.simplex);
        best_any = best_any.min(out.value);
        if out.converged && out.value.is_finite() && best.as_ref().is_none_or(|(v, _)| out.value < *v) {
            best = Some((out.value, out.point));
        }
    }

    match best.and_then(|(v, theta)| problem.decode(&theta).map(|d| (v, d))) {
        Some((residual, distribution)) => Ok(Fit {
            distribution,
            residual,
        }),
        None => Err(DistError::FitFailure {
            family,
            best_residual: best_any,
        }),
    }
}

/// Families able to live on `support`, in canonical order.
pub fn candidate_families(support: &Support) -> Vec<Family> {
    Family::ALL.into_iter().filter(|f| f.accepts(support)).collect()
}

/// Fits every family compatible with `support`, ranked by residual.
pub fn fit_best(support: Support, constraints: &[ProbabilityConstraint]) -> Result<Vec<Fit>, DistError> {
    let candidates: Vec<(Family, Support)> = candidate_families(&support).into_iter().map(|f| (f, support)).collect();
    fit_candidates(&candidates, constraints, &FitOptions::default())
}

/// Fits each `(family, support)` pair and ranks successes by residual
/// (stable, so ties keep candidate order).
pub fn fit_candidates(
    candidates: &[(Family, Support)],
    constraints: &[ProbabilityConstraint],
    opts: &FitOptions,
) -> Result<Vec<Fit>, DistError> {
    let mut fits = Vec::new();
    let mut failures = Vec::new();
    for &(family, support) in candidates {
        match fit_with(family, support, constraints, opts) {
            Ok(f) => fits.push(f),
            Err(e) => failures.push((family, e.to_string())),
        }
    }
    if fits.is_empty() {
        if failures.is_empty() {
            return Err(DistError::InvalidSupport("no family is compatible with the support".into()));
        }
        return Err(DistError::AllFamiliesFailed { failures });
    }
    fits.sort_by(|a, b| a.residual.total_cmp(&b.residual));
    Ok(fits)
}
