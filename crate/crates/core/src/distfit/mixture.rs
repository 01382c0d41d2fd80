use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DistError, FittedDistribution};
use crate::sampling;

const WEIGHT_TOL: f64 = 1e-9;
const BISECT_WIDTH: f64 = 1e-12;

/// Finite mixture `sum_i w_i F_i`, the linear opinion pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureDistribution {
    components: Vec<FittedDistribution>,
    #[serde(with = "crate::decimal::vec")]
    weights: Vec<f64>,
}

/// Pools `ds` with `weights` (equal weights when `None`).
pub fn linear_pool(ds: &[FittedDistribution], weights: Option<&[f64]>) -> Result<MixtureDistribution, DistError> {
    if ds.is_empty() {
        return Err(DistError::Domain("cannot pool an empty list of distributions".into()));
    }
    let weights = match weights {
        None => vec![1.0 / ds.len() as f64; ds.len()],
        Some(w) => {
            if w.len() != ds.len() {
                return Err(DistError::Domain(format!(
                    "{} weights for {} distributions",
                    w.len(),
                    ds.len()
                )));
            }
            if w.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(DistError::Domain(format!("weights must be non-negative, got {w:?}")));
            }
            let total: f64 = w.iter().sum();
            if (total - 1.0).abs() > WEIGHT_TOL {
                return Err(DistError::Domain(format!("weights sum to {total}, not 1")));
            }
            w.to_vec()
        }
    };
    Ok(MixtureDistribution {
        components: ds.to_vec(),
        weights,
    })
}

impl MixtureDistribution {
    pub fn components(&self) -> &[FittedDistribution] {
        &self.components
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn cdf(&self, x: f64) -> f64 {
        self.components.iter().zip(&self.weights).map(|(d, w)| w * d.cdf(x)).sum()
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.components.iter().zip(&self.weights).map(|(d, w)| w * d.pdf(x)).sum()
    }

    /// Bisection on the mixture CDF; the root lies between the smallest and
    /// largest component quantiles at `p`.
    pub fn quantile(&self, p: f64) -> Result<f64, DistError> {
        if !(p > 0.0 && p < 1.0) {
            return Err(DistError::Domain(format!("quantile probability {p} outside (0, 1)")));
        }
        let qs: Vec<f64> = self.components.iter().map(|d| d.quantile_unchecked(p)).collect();
        let mut lo = qs.iter().copied().fold(f64::INFINITY, f64::min);
        let mut hi = qs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo <= 0.0 {
            return Ok(lo);
        }
        while hi - lo > BISECT_WIDTH * hi.abs().max(lo.abs()).max(1.0) {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.cdf(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    pub fn median(&self) -> f64 {
        self.quantile(0.5).expect("0.5 is a valid probability")
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (d, w) in self.components.iter().zip(&self.weights) {
            acc += w;
            if u < acc {
                return d.draw(rng);
            }
        }
        self.components[self.components.len() - 1].draw(rng)
    }

    pub fn sample(&self, n: usize, seed: u64) -> Vec<f64> {
        let samplers: Vec<_> = self.components.iter().map(|d| d.sampler()).collect();
        let cum: Vec<f64> = self
            .weights
            .iter()
            .scan(0.0, |acc, w| {
                *acc += w;
                Some(*acc)
            })
            .collect();
        sampling::generate(n, seed, |rng| {
            let u: f64 = rng.random();
            let i = cum.iter().position(|&c| u < c).unwrap_or(samplers.len() - 1);
            rand_distr::Distribution::sample(&samplers[i], rng)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_pool_rejected() {
        assert!(matches!(linear_pool(&[], None), Err(DistError::Domain(_))));
    }

    #[test]
    fn symmetric_pool_center() {
        let a = FittedDistribution::normal(-1.0, 1.0).unwrap();
        let b = FittedDistribution::normal(1.0, 1.0).unwrap();
        let pool = linear_pool(&[a, b], None).unwrap();
        assert!((pool.cdf(0.0) - 0.5).abs() < 1e-15);
        assert!(pool.quantile(0.5).unwrap().abs() < 1e-10);
    }

    #[test]
    fn single_component_identity() {
        let d = FittedDistribution::beta(2.0, 5.0, 0.0, 1.0).unwrap();
        let pool = linear_pool(std::slice::from_ref(&d), None).unwrap();
        for i in 1..20 {
            let x = i as f64 / 20.0;
            assert_eq!(pool.cdf(x), d.cdf(x));
        }
        assert!((pool.quantile(0.3).unwrap() - d.quantile(0.3).unwrap()).abs() < 1e-11);
    }

    #[test]
    fn weight_validation() {
        let d = FittedDistribution::normal(0.0, 1.0).unwrap();
        let two = [d.clone(), d];
        assert!(linear_pool(&two, Some(&[0.5, 0.6])).is_err());
        assert!(linear_pool(&two, Some(&[1.0])).is_err());
        assert!(linear_pool(&two, Some(&[1.5, -0.5])).is_err());
        assert!(linear_pool(&two, Some(&[0.25, 0.75])).is_ok());
    }
}
