use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma, LogNormal, Normal, StudentT};
use serde::{Deserialize, Serialize};
use statrs::function::beta::{beta_reg, ln_beta};
use statrs::function::gamma::{gamma_lr, ln_gamma};

use super::invert::invert_cdf;
use super::{std_normal_cdf, std_normal_pdf, std_normal_quantile, DistError, Family, Support};
use crate::sampling;

/// A member of one of the supported parametric families.
///
/// Parameters by family: normal `[mean, sd]`; student-t `[location, scale, df]`;
/// gamma `[shape, rate]` shifted by `support.lower`; lognormal
/// `[log_mean, log_sd]` shifted by `support.lower`; beta `[alpha, beta]`
/// rescaled to `[support.lower, support.upper]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawFitted")]
pub struct FittedDistribution {
    family: Family,
    #[serde(with = "crate::decimal::vec")]
    params: Vec<f64>,
    support: Support,
}

#[derive(Deserialize)]
struct RawFitted {
    family: Family,
    #[serde(with = "crate::decimal::vec")]
    params: Vec<f64>,
    support: Support,
}

impl TryFrom<RawFitted> for FittedDistribution {
    type Error = DistError;

    fn try_from(raw: RawFitted) -> Result<Self, Self::Error> {
        FittedDistribution::new(raw.family, raw.params, raw.support)
    }
}

impl FittedDistribution {
    pub fn new(family: Family, params: Vec<f64>, support: Support) -> Result<Self, DistError> {
        let bad = |reason: String| DistError::InvalidParameters { family, reason };
        let expected = if family == Family::StudentT { 3 } else { 2 };
        if params.len() != expected {
            return Err(bad(format!("expected {expected} parameters, got {}", params.len())));
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(bad(format!("non-finite parameter in {params:?}")));
        }
        let positive: &[usize] = match family {
            Family::Normal => &[1],
            Family::StudentT => &[1, 2],
            Family::Lognormal => &[1],
            Family::Gamma | Family::Beta => &[0, 1],
        };
        for &i in positive {
            if params[i] <= 0.0 {
                return Err(bad(format!("parameter {i} must be positive, got {}", params[i])));
            }
        }
        if !family.accepts(&support) {
            return Err(DistError::IncompatibleSupport { family, support });
        }
        Ok(FittedDistribution {
            family,
            params,
            support,
        })
    }

    pub fn normal(mean: f64, sd: f64) -> Result<Self, DistError> {
        Self::new(Family::Normal, vec![mean, sd], Support::REAL_LINE)
    }

    pub fn student_t(location: f64, scale: f64, df: f64) -> Result<Self, DistError> {
        Self::new(Family::StudentT, vec![location, scale, df], Support::REAL_LINE)
    }

    pub fn gamma(shape: f64, rate: f64, lower: f64) -> Result<Self, DistError> {
        Self::new(Family::Gamma, vec![shape, rate], Support::lower_bounded(lower)?)
    }

    pub fn lognormal(log_mean: f64, log_sd: f64, lower: f64) -> Result<Self, DistError> {
        Self::new(Family::Lognormal, vec![log_mean, log_sd], Support::lower_bounded(lower)?)
    }

    pub fn beta(alpha: f64, beta: f64, lower: f64, upper: f64) -> Result<Self, DistError> {
        Self::new(Family::Beta, vec![alpha, beta], Support::bounded(lower, upper)?)
    }

    pub fn family(&self) -> Family {
        self.family
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn support(&self) -> Support {
        self.support
    }

    /// Maps `x` onto the family's standard variable.
    fn standardize(&self, x: f64) -> f64 {
        let p = &self.params;
        match self.family {
            Family::Normal | Family::StudentT => (x - p[0]) / p[1],
            Family::Gamma => p[1] * (x - self.support.lower),
            Family::Lognormal => x - self.support.lower,
            Family::Beta => (x - self.support.lower) / self.support.width(),
        }
    }

    fn unstandardize(&self, z: f64) -> f64 {
        let p = &self.params;
        match self.family {
            Family::Normal | Family::StudentT => p[0] + p[1] * z,
            Family::Gamma => self.support.lower + z / p[1],
            Family::Lognormal => self.support.lower + z,
            Family::Beta => self.support.lower + self.support.width() * z,
        }
    }

    /// Jacobian of [`Self::standardize`].
    fn scale_factor(&self) -> f64 {
        let p = &self.params;
        match self.family {
            Family::Normal | Family::StudentT => 1.0 / p[1],
            Family::Gamma => p[1],
            Family::Lognormal => 1.0,
            Family::Beta => 1.0 / self.support.width(),
        }
    }

    fn std_cdf(&self, z: f64) -> f64 {
        let p = &self.params;
        match self.family {
            Family::Normal => std_normal_cdf(z),
            Family::StudentT => t_cdf(z, p[2]),
            Family::Gamma => {
                if z <= 0.0 {
                    0.0
                } else {
                    gamma_lr(p[0], z)
                }
            }
            Family::Lognormal => {
                if z <= 0.0 {
                    0.0
                } else {
                    std_normal_cdf((z.ln() - p[0]) / p[1])
                }
            }
            Family::Beta => {
                if z <= 0.0 {
                    0.0
                } else if z >= 1.0 {
                    1.0
                } else {
                    beta_reg(p[0], p[1], z)
                }
            }
        }
    }

    fn std_pdf(&self, z: f64) -> f64 {
        let p = &self.params;
        match self.family {
            Family::Normal => std_normal_pdf(z),
            Family::StudentT => t_pdf(z, p[2]),
            Family::Gamma => {
                if z <= 0.0 {
                    0.0
                } else {
                    ((p[0] - 1.0) * z.ln() - z - ln_gamma(p[0])).exp()
                }
            }
            Family::Lognormal => {
                if z <= 0.0 {
                    0.0
                } else {
                    std_normal_pdf((z.ln() - p[0]) / p[1]) / (z * p[1])
                }
            }
            Family::Beta => {
                if z <= 0.0 || z >= 1.0 {
                    0.0
                } else {
                    ((p[0] - 1.0) * z.ln() + (p[1] - 1.0) * (-z).ln_1p() - ln_beta(p[0], p[1])).exp()
                }
            }
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x.is_nan() {
            return f64::NAN;
        }
        if x <= self.support.lower {
            return 0.0;
        }
        if x >= self.support.upper {
            return 1.0;
        }
        self.std_cdf(self.standardize(x)).clamp(0.0, 1.0)
    }

    pub fn pdf(&self, x: f64) -> f64 {
        if !(x > self.support.lower && x < self.support.upper) {
            return 0.0;
        }
        self.std_pdf(self.standardize(x)) * self.scale_factor()
    }

    /// Inverse CDF for `p` in (0, 1).
    pub fn quantile(&self, p: f64) -> Result<f64, DistError> {
        if !(p > 0.0 && p < 1.0) {
            return Err(DistError::Domain(format!("quantile probability {p} outside (0, 1)")));
        }
        Ok(self.quantile_unchecked(p))
    }

    pub(crate) fn quantile_unchecked(&self, p: f64) -> f64 {
        let q = &self.params;
        let z = match self.family {
            Family::Normal => std_normal_quantile(p),
            Family::Lognormal => (q[0] + q[1] * std_normal_quantile(p)).exp(),
            Family::StudentT => {
                let start = std_normal_quantile(p);
                let mut b = start.abs().max(1.0) * 2.0;
                while t_cdf(-b, q[2]) > p || t_cdf(b, q[2]) < p {
                    b *= 2.0;
                }
                invert_cdf(p, -b, b, start, |z| t_cdf(z, q[2]), |z| t_pdf(z, q[2]))
            }
            Family::Gamma => {
                let shape = q[0];
                let mut hi = shape + 10.0 * shape.sqrt() + 10.0;
                while gamma_lr(shape, hi) < p {
                    hi *= 2.0;
                }
                let start = (shape + shape.sqrt() * std_normal_quantile(p)).max(0.0);
                invert_cdf(p, 0.0, hi, start, |z| self.std_cdf(z), |z| self.std_pdf(z))
            }
            Family::Beta => {
                let (a, b) = (q[0], q[1]);
                let m = a / (a + b);
                let sd = (a * b / ((a + b) * (a + b) * (a + b + 1.0))).sqrt();
                let start = (m + sd * std_normal_quantile(p)).clamp(1e-6, 1.0 - 1e-6);
                invert_cdf(p, 0.0, 1.0, start, |z| self.std_cdf(z), |z| self.std_pdf(z))
            }
        };
        self.unstandardize(z)
    }

    pub fn median(&self) -> f64 {
        self.quantile_unchecked(0.5)
    }

    /// Mean, where finite.
    pub fn mean(&self) -> Option<f64> {
        let p = &self.params;
        match self.family {
            Family::Normal => Some(p[0]),
            Family::StudentT => (p[2] > 1.0).then_some(p[0]),
            Family::Gamma => Some(self.support.lower + p[0] / p[1]),
            Family::Lognormal => Some(self.support.lower + (p[0] + 0.5 * p[1] * p[1]).exp()),
            Family::Beta => Some(self.support.lower + self.support.width() * p[0] / (p[0] + p[1])),
        }
    }

    pub fn sampler(&self) -> Sampler {
        let p = &self.params;
        // Parameters were validated on construction, so the rand_distr
        // constructors cannot fail.
        let kind = match self.family {
            Family::Normal => SamplerKind::Normal(Normal::new(p[0], p[1]).expect("validated")),
            Family::StudentT => SamplerKind::StudentT(StudentT::new(p[2]).expect("validated"), p[0], p[1]),
            Family::Gamma => SamplerKind::Gamma(Gamma::new(p[0], 1.0 / p[1]).expect("validated"), self.support.lower),
            Family::Lognormal => SamplerKind::Lognormal(LogNormal::new(p[0], p[1]).expect("validated"), self.support.lower),
            Family::Beta => SamplerKind::Beta(
                Beta::new(p[0], p[1]).expect("validated"),
                self.support.lower,
                self.support.width(),
            ),
        };
        Sampler { kind }
    }

    /// `n` draws, deterministic in `seed`.
    pub fn sample(&self, n: usize, seed: u64) -> Vec<f64> {
        let s = self.sampler();
        sampling::generate(n, seed, |rng| s.sample(rng))
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.sampler().sample(rng)
    }
}

#[derive(Debug, Clone)]
enum SamplerKind {
    Normal(Normal<f64>),
    StudentT(StudentT<f64>, f64, f64),
    Gamma(Gamma<f64>, f64),
    Lognormal(LogNormal<f64>, f64),
    Beta(Beta<f64>, f64, f64),
}

/// Prepared random-variate generator for a [`FittedDistribution`].
#[derive(Debug, Clone)]
pub struct Sampler {
    kind: SamplerKind,
}

impl Distribution<f64> for Sampler {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match &self.kind {
            SamplerKind::Normal(d) => d.sample(rng),
            SamplerKind::StudentT(d, loc, scale) => loc + scale * d.sample(rng),
            SamplerKind::Gamma(d, lower) => lower + d.sample(rng),
            SamplerKind::Lognormal(d, lower) => lower + d.sample(rng),
            SamplerKind::Beta(d, lower, width) => lower + width * d.sample(rng),
        }
    }
}

fn t_cdf(z: f64, df: f64) -> f64 {
    if z == 0.0 {
        return 0.5;
    }
    let x = df / (df + z * z);
    let tail = 0.5 * beta_reg(0.5 * df, 0.5, x);
    if z > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

fn t_pdf(z: f64, df: f64) -> f64 {
    let ln = ln_gamma(0.5 * (df + 1.0))
        - ln_gamma(0.5 * df)
        - 0.5 * (df * std::f64::consts::PI).ln()
        - 0.5 * (df + 1.0) * (z * z / df).ln_1p();
    ln.exp()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn paper_beta() -> FittedDistribution {
        FittedDistribution::beta(2.81, 3.05, 0.0, 0.70).unwrap()
    }

    #[test]
    fn normal_center() {
        let d = FittedDistribution::normal(0.0, 1.0).unwrap();
        assert_eq!(d.cdf(0.0), 0.5);
        assert_eq!(d.quantile(0.5).unwrap(), 0.0);
    }

    #[test]
    fn beta_endpoints_and_median() {
        let d = paper_beta();
        assert_eq!(d.cdf(0.70), 1.0);
        assert_eq!(d.cdf(0.0), 0.0);
        assert_eq!(d.cdf(-1.0), 0.0);
        assert!((d.cdf(0.334) - 0.5).abs() < 2e-3);
    }

    #[test]
    fn beta_credible_interval() {
        let d = paper_beta();
        assert!((d.quantile(0.05).unwrap() - 0.119).abs() < 1e-3);
        assert!((d.quantile(0.95).unwrap() - 0.558).abs() < 1e-3);
    }

    #[test]
    fn gamma_unit_exponential() {
        let d = FittedDistribution::gamma(1.0, 1.0, 0.0).unwrap();
        let p = 1.0 - (-1.0f64).exp();
        assert!((d.quantile(p).unwrap() - 1.0).abs() < 1e-10);
    }

    #[test]
    fn quantile_domain() {
        let d = paper_beta();
        assert!(matches!(d.quantile(0.0), Err(DistError::Domain(_))));
        assert!(matches!(d.quantile(1.0), Err(DistError::Domain(_))));
        assert!(d.quantile(f64::NAN).is_err());
    }

    #[test]
    fn rejects_bad_parameters() {
        assert!(FittedDistribution::normal(0.0, 0.0).is_err());
        assert!(FittedDistribution::beta(-1.0, 2.0, 0.0, 1.0).is_err());
        assert!(matches!(
            FittedDistribution::new(Family::Beta, vec![1.0, 1.0], Support::REAL_LINE),
            Err(DistError::IncompatibleSupport { .. })
        ));
        assert!(FittedDistribution::new(Family::StudentT, vec![0.0, 1.0], Support::REAL_LINE).is_err());
    }

    #[test]
    fn t_cdf_matches_cauchy() {
        let d = FittedDistribution::student_t(0.0, 1.0, 1.0).unwrap();
        for x in [-3.0f64, -0.5, 0.2, 4.0] {
            let exact = 0.5 + x.atan() / std::f64::consts::PI;
            assert!((d.cdf(x) - exact).abs() < 1e-13);
        }
    }

    #[test]
    fn same_seed_same_draw() {
        let d = paper_beta();
        assert_eq!(d.sample(1, 42), d.sample(1, 42));
        assert_ne!(d.sample(1, 42), d.sample(1, 43));
    }

    #[test]
    fn serde_shape() {
        let d = FittedDistribution::normal(1.0, 2.0).unwrap();
        let v = serde_json::to_value(&d).unwrap();
        assert_eq!(v["family"], "normal");
        assert_eq!(v["params"][1], "2.0");
        assert_eq!(v["support"]["lower"], "-inf");
        let bad = r#"{"family":"normal","params":["0","-1"],"support":{"lower":"-inf","upper":"inf"}}"#;
        assert!(serde_json::from_str::<FittedDistribution>(bad).is_err());
    }
}
