//! Parametric distribution families and least-squares fitting to elicited
//! cumulative probabilities.

mod family;
mod fit;
mod invert;
mod mixture;
pub mod simplex;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use family::FittedDistribution;
pub use fit::{candidate_families, fit, fit_best, fit_candidates, fit_with, Fit, FitOptions};
pub use mixture::{linear_pool, MixtureDistribution};

/// Degrees of freedom used for Student-t fits unless overridden.
pub const DEFAULT_T_DF: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Normal,
    StudentT,
    Gamma,
    Lognormal,
    Beta,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Normal,
        Family::StudentT,
        Family::Gamma,
        Family::Lognormal,
        Family::Beta,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Family::Normal => "normal",
            Family::StudentT => "student-t",
            Family::Gamma => "gamma",
            Family::Lognormal => "lognormal",
            Family::Beta => "beta",
        }
    }

    /// Whether the family can live on `support` (normal and t need the whole
    /// line, gamma and lognormal a finite lower bound only, beta two finite bounds).
    pub fn accepts(self, support: &Support) -> bool {
        let lo = support.lower.is_finite();
        let hi = support.upper.is_finite();
        match self {
            Family::Normal | Family::StudentT => !lo && !hi,
            Family::Gamma | Family::Lognormal => lo && !hi,
            Family::Beta => lo && hi,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Family {
    type Err = DistError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "normal" => Ok(Family::Normal),
            "student-t" | "t" | "student_t" => Ok(Family::StudentT),
            "gamma" => Ok(Family::Gamma),
            "lognormal" | "log-normal" => Ok(Family::Lognormal),
            "beta" => Ok(Family::Beta),
            other => Err(DistError::Domain(format!("unknown family {other:?}"))),
        }
    }
}

/// Interval carrying a distribution; either end may be infinite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawSupport")]
pub struct Support {
    #[serde(with = "crate::decimal")]
    pub lower: f64,
    #[serde(with = "crate::decimal")]
    pub upper: f64,
}

#[derive(Deserialize)]
struct RawSupport {
    #[serde(with = "crate::decimal")]
    lower: f64,
    #[serde(with = "crate::decimal")]
    upper: f64,
}

impl TryFrom<RawSupport> for Support {
    type Error = DistError;

    fn try_from(raw: RawSupport) -> Result<Self, Self::Error> {
        Support::new(raw.lower, raw.upper)
    }
}

impl Support {
    pub const REAL_LINE: Support = Support {
        lower: f64::NEG_INFINITY,
        upper: f64::INFINITY,
    };

    pub fn new(lower: f64, upper: f64) -> Result<Self, DistError> {
        if lower.is_nan() || upper.is_nan() || lower >= upper || lower == f64::INFINITY || upper == f64::NEG_INFINITY {
            return Err(DistError::InvalidSupport(format!("[{lower}, {upper}]")));
        }
        Ok(Support { lower, upper })
    }

    pub fn bounded(lower: f64, upper: f64) -> Result<Self, DistError> {
        if !lower.is_finite() || !upper.is_finite() {
            return Err(DistError::InvalidSupport(format!("[{lower}, {upper}] is not bounded")));
        }
        Support::new(lower, upper)
    }

    pub fn lower_bounded(lower: f64) -> Result<Self, DistError> {
        if !lower.is_finite() {
            return Err(DistError::InvalidSupport(format!("lower bound {lower} must be finite")));
        }
        Support::new(lower, f64::INFINITY)
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.lower && x <= self.upper
    }

    pub fn contains_support(&self, other: &Support) -> bool {
        other.lower >= self.lower && other.upper <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }
}

impl fmt::Display for Support {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.lower, self.upper)
    }
}

/// "P(X < value) = cum_prob".
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbabilityConstraint {
    #[serde(with = "crate::decimal")]
    pub value: f64,
    #[serde(with = "crate::decimal")]
    pub cum_prob: f64,
}

impl ProbabilityConstraint {
    pub fn new(value: f64, cum_prob: f64) -> Self {
        ProbabilityConstraint { value, cum_prob }
    }

    /// "P(X > value) = prob", restated as a cumulative judgement.
    pub fn exceedance(value: f64, prob: f64) -> Self {
        ProbabilityConstraint {
            value,
            cum_prob: 1.0 - prob,
        }
    }
}

/// Sorts constraints by value and checks they are usable for fitting:
/// finite, probabilities in (0, 1), strictly increasing in both coordinates.
pub fn normalize_constraints(
    constraints: &[ProbabilityConstraint],
) -> Result<Vec<ProbabilityConstraint>, DistError> {
    let mut cs = constraints.to_vec();
    for c in &cs {
        if !c.value.is_finite() {
            return Err(DistError::InvalidConstraints(format!("non-finite value {}", c.value)));
        }
        if !(c.cum_prob > 0.0 && c.cum_prob < 1.0) {
            return Err(DistError::InvalidConstraints(format!(
                "cumulative probability {} at {} is outside (0, 1)",
                c.cum_prob, c.value
            )));
        }
    }
    cs.sort_by(|a, b| a.value.total_cmp(&b.value).then(a.cum_prob.total_cmp(&b.cum_prob)));
    for w in cs.windows(2) {
        if !(w[1].value > w[0].value) || !(w[1].cum_prob > w[0].cum_prob) {
            return Err(DistError::InvalidConstraints(format!(
                "P(X < {}) = {} and P(X < {}) = {} are not strictly increasing",
                w[0].value, w[0].cum_prob, w[1].value, w[1].cum_prob
            )));
        }
    }
    Ok(cs)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid {family} parameters: {reason}")]
    InvalidParameters { family: Family, reason: String },
    #[error("invalid support {0}")]
    InvalidSupport(String),
    #[error("configuration error: {family} cannot be fitted on support {support}")]
    IncompatibleSupport { family: Family, support: Support },
    #[error("invalid constraints: {0}")]
    InvalidConstraints(String),
    #[error("{family} fit did not converge after all restarts (best residual {best_residual:e})")]
    FitFailure { family: Family, best_residual: f64 },
    #[error("no family could be fitted: {}", .failures.iter().map(|(f, e)| format!("{f}: {e}")).collect::<Vec<_>>().join("; "))]
    AllFamiliesFailed { failures: Vec<(Family, String)> },
}

/// Standard normal CDF.
pub fn std_normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

/// Standard normal quantile.
pub fn std_normal_quantile(p: f64) -> f64 {
    -std::f64::consts::SQRT_2 * statrs::function::erf::erfc_inv(2.0 * p)
}

pub fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
}
