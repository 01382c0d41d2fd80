//! Gaussian copula joint distributions for two or three quantities, built from
//! fitted marginals and pairwise concordance probabilities.
//!
//! A concordance probability `c` is the probability that both quantities fall
//! on the same side of their medians. Under a Gaussian copula
//! `c = 1/2 + arcsin(rho) / pi`, so `rho = sin(pi (c - 1/2))`.

use std::collections::BTreeSet;
use std::f64::consts::PI;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distfit::{std_normal_cdf, FittedDistribution};
use crate::sampling;

/// Smallest eigenvalue a correlation matrix must exceed.
pub const PD_TOLERANCE: f64 = 1e-10;
pub const MAX_DIMENSION: usize = 3;
pub const PREVIEW_SAMPLES: usize = 10_000;
pub const PREVIEW_SEED: u64 = 0x005E_EDC0_9A1A;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CopulaError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("a copula needs 2 or 3 quantities, got {0}; pairwise concordance judgements do not scale to more")]
    Dimension(usize),
    #[error("invalid judgements: {0}")]
    Judgements(String),
    #[error("correlation matrix is not positive definite, revisit judgements: {0}")]
    NotPositiveDefinite(PdDiagnosis),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFeasibility {
    pub pair: (String, String),
    #[serde(with = "crate::decimal")]
    pub rho: f64,
    /// Interval of rho keeping the matrix positive definite with the other entries fixed.
    #[serde(with = "crate::decimal::pair")]
    pub feasible_rho: (f64, f64),
    #[serde(with = "crate::decimal::pair")]
    pub feasible_concordance: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdDiagnosis {
    #[serde(with = "crate::decimal")]
    pub min_eigenvalue: f64,
    /// Amount the smallest eigenvalue falls short of the tolerance.
    #[serde(with = "crate::decimal")]
    pub shortfall: f64,
    pub pairs: Vec<PairFeasibility>,
}

impl std::fmt::Display for PdDiagnosis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "smallest eigenvalue {:.3e} (short by {:.3e})", self.min_eigenvalue, self.shortfall)?;
        for p in &self.pairs {
            write!(
                f,
                "; {}/{}: concordance must lie in ({:.4}, {:.4})",
                p.pair.0, p.pair.1, p.feasible_concordance.0, p.feasible_concordance.1
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcordanceJudgement {
    pub pair: (String, String),
    #[serde(with = "crate::decimal")]
    pub probability: f64,
}

impl ConcordanceJudgement {
    pub fn new(a: impl Into<String>, b: impl Into<String>, probability: f64) -> Self {
        ConcordanceJudgement {
            pair: (a.into(), b.into()),
            probability,
        }
    }

    fn key(&self) -> (String, String) {
        if self.pair.0 <= self.pair.1 {
            self.pair.clone()
        } else {
            (self.pair.1.clone(), self.pair.0.clone())
        }
    }
}

pub fn concordance_to_rho(c: f64) -> Result<f64, CopulaError> {
    if !(c > 0.0 && c < 1.0) {
        return Err(CopulaError::Domain(format!("concordance probability {c} must lie strictly between 0 and 1")));
    }
    Ok((PI * (c - 0.5)).sin())
}

pub fn rho_to_concordance(rho: f64) -> Result<f64, CopulaError> {
    if !(rho > -1.0 && rho < 1.0) {
        return Err(CopulaError::Domain(format!("correlation {rho} must lie strictly between -1 and 1")));
    }
    Ok(0.5 + rho.asin() / PI)
}

/// Validated Gaussian copula with its marginals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "CopulaModelRepr")]
pub struct CopulaModel {
    pub ids: Vec<String>,
    pub marginals: Vec<FittedDistribution>,
    pub judgements: Vec<ConcordanceJudgement>,
    #[serde(with = "crate::decimal::matrix")]
    pub correlation: Vec<Vec<f64>>,
    #[serde(skip)]
    factor: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
struct CopulaModelRepr {
    ids: Vec<String>,
    marginals: Vec<FittedDistribution>,
    judgements: Vec<ConcordanceJudgement>,
}

impl TryFrom<CopulaModelRepr> for CopulaModel {
    type Error = CopulaError;

    fn try_from(r: CopulaModelRepr) -> Result<Self, Self::Error> {
        build(r.ids, r.marginals, r.judgements)
    }
}

/// Assembles and checks the correlation matrix implied by `judgements`.
/// Every pair of `ids` must be judged exactly once.
pub fn build(
    ids: Vec<String>,
    marginals: Vec<FittedDistribution>,
    judgements: Vec<ConcordanceJudgement>,
) -> Result<CopulaModel, CopulaError> {
    let d = ids.len();
    if !(2..=MAX_DIMENSION).contains(&d) {
        return Err(CopulaError::Dimension(d));
    }
    if marginals.len() != d {
        return Err(CopulaError::Judgements(format!("{} marginals for {d} quantities", marginals.len())));
    }
    if ids.iter().collect::<BTreeSet<_>>().len() != d {
        return Err(CopulaError::Judgements(format!("quantity ids must be distinct: {ids:?}")));
    }
    let index = |id: &str| ids.iter().position(|x| x == id);
    let mut seen = BTreeSet::new();
    let mut corr = vec![vec![0.0; d]; d];
    for (i, row) in corr.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for j in &judgements {
        let (a, b) = (&j.pair.0, &j.pair.1);
        let (Some(ia), Some(ib)) = (index(a), index(b)) else {
            return Err(CopulaError::Judgements(format!("judgement on unknown pair ({a}, {b})")));
        };
        if ia == ib {
            return Err(CopulaError::Judgements(format!("judgement pairs {a} with itself")));
        }
        if !seen.insert(j.key()) {
            return Err(CopulaError::Judgements(format!("pair ({a}, {b}) judged more than once")));
        }
        let rho = concordance_to_rho(j.probability)?;
        corr[ia][ib] = rho;
        corr[ib][ia] = rho;
    }
    let needed = d * (d - 1) / 2;
    if seen.len() != needed {
        return Err(CopulaError::Judgements(format!(
            "{d} quantities need {needed} concordance judgements, got {}",
            seen.len()
        )));
    }

    let m = DMatrix::from_fn(d, d, |i, j| corr[i][j]);
    let min_eig = SymmetricEigen::new(m.clone()).eigenvalues.min();
    if !(min_eig > PD_TOLERANCE) {
        return Err(CopulaError::NotPositiveDefinite(diagnose(&ids, &corr, min_eig)));
    }
    let chol = m
        .cholesky()
        .ok_or_else(|| CopulaError::NotPositiveDefinite(diagnose(&ids, &corr, min_eig)))?;
    let l = chol.l();
    let factor = (0..d).map(|i| (0..d).map(|j| l[(i, j)]).collect()).collect();

    // Judgements stored in id order for a canonical serialization.
    let mut judgements = judgements;
    judgements.sort_by_key(|j| {
        let (a, b) = (index(&j.pair.0).unwrap(), index(&j.pair.1).unwrap());
        (a.min(b), a.max(b))
    });
    Ok(CopulaModel {
        ids,
        marginals,
        judgements,
        correlation: corr,
        factor,
    })
}

fn diagnose(ids: &[String], corr: &[Vec<f64>], min_eig: f64) -> PdDiagnosis {
    let d = ids.len();
    let mut pairs = Vec::new();
    for i in 0..d {
        for j in (i + 1)..d {
            let (lo, hi) = if d == 2 {
                (-1.0, 1.0)
            } else {
                let k = (0..d).find(|&k| k != i && k != j).unwrap();
                let (a, b) = (corr[i][k], corr[j][k]);
                let r = ((1.0 - a * a) * (1.0 - b * b)).max(0.0).sqrt();
                (a * b - r, a * b + r)
            };
            let conc = |r: f64| 0.5 + r.clamp(-1.0, 1.0).asin() / PI;
            pairs.push(PairFeasibility {
                pair: (ids[i].clone(), ids[j].clone()),
                rho: corr[i][j],
                feasible_rho: (lo, hi),
                feasible_concordance: (conc(lo), conc(hi)),
            });
        }
    }
    PdDiagnosis {
        min_eigenvalue: min_eig,
        shortfall: PD_TOLERANCE - min_eig,
        pairs,
    }
}

/// `n x d` sample stored column by column.
#[derive(Debug, Clone, PartialEq)]
pub struct JointSample {
    pub n: usize,
    pub d: usize,
    pub data: Vec<f64>,
}

impl JointSample {
    pub fn column(&self, j: usize) -> &[f64] {
        &self.data[j * self.n..(j + 1) * self.n]
    }

    /// Little-endian f64 bytes in column-major order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

impl CopulaModel {
    pub fn dimension(&self) -> usize {
        self.ids.len()
    }

    fn ensure_factor(&self) -> std::borrow::Cow<'_, [Vec<f64>]> {
        if self.factor.is_empty() {
            let d = self.dimension();
            let m = DMatrix::from_fn(d, d, |i, j| self.correlation[i][j]);
            let l = m.cholesky().expect("validated at build").l();
            std::borrow::Cow::Owned((0..d).map(|i| (0..d).map(|j| l[(i, j)]).collect()).collect())
        } else {
            std::borrow::Cow::Borrowed(&self.factor)
        }
    }

    pub fn rho(&self, a: &str, b: &str) -> Option<f64> {
        let i = self.ids.iter().position(|x| x == a)?;
        let j = self.ids.iter().position(|x| x == b)?;
        Some(self.correlation[i][j])
    }

    /// Draws correlated normals, maps them to uniforms and then through each marginal quantile.
    pub fn sample_joint(&self, n: usize, seed: u64) -> Result<JointSample, CopulaError> {
        if n == 0 {
            return Err(CopulaError::Domain("sample size must be at least 1".into()));
        }
        let d = self.dimension();
        let factor = self.ensure_factor();
        let rows = sampling::generate(n, seed, |rng| self.draw_with(&factor, rng));
        let mut data = vec![0.0; n * d];
        for (r, row) in rows.iter().enumerate() {
            for j in 0..d {
                data[j * n + r] = row[j];
            }
        }
        Ok(JointSample { n, d, data })
    }

    /// One joint draw; entries past the model dimension are zero.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; MAX_DIMENSION] {
        self.draw_with(&self.ensure_factor(), rng)
    }

    fn draw_with<R: Rng + ?Sized>(&self, factor: &[Vec<f64>], rng: &mut R) -> [f64; MAX_DIMENSION] {
        let d = self.dimension();
        let mut z = [0.0; MAX_DIMENSION];
        for v in z.iter_mut().take(d) {
            *v = StandardNormal.sample(rng);
        }
        let mut out = [0.0; MAX_DIMENSION];
        for i in 0..d {
            let x: f64 = (0..=i).map(|k| factor[i][k] * z[k]).sum();
            let u = std_normal_cdf(x).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0);
            out[i] = self.marginals[i].quantile_unchecked(u);
        }
        out
    }

    /// Same marginals with some pair concordances replaced.
    pub fn with_overrides(&self, overrides: &[ConcordanceJudgement]) -> Result<CopulaModel, CopulaError> {
        let mut judgements = self.judgements.clone();
        for o in overrides {
            let slot = judgements
                .iter_mut()
                .find(|j| j.key() == o.key())
                .ok_or_else(|| CopulaError::Judgements(format!("no pair ({}, {}) in the model", o.pair.0, o.pair.1)))?;
            slot.probability = o.probability;
        }
        build(self.ids.clone(), self.marginals.clone(), judgements)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub pair: (String, String),
    #[serde(with = "crate::decimal")]
    pub concordance: f64,
    #[serde(with = "crate::decimal")]
    pub rho: f64,
    #[serde(with = "crate::decimal")]
    pub empirical_concordance: f64,
    #[serde(with = "crate::decimal")]
    pub pearson: f64,
    #[serde(with = "crate::decimal")]
    pub spearman: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreviewSummary {
    pub n: usize,
    pub seed: u64,
    pub ids: Vec<String>,
    #[serde(with = "crate::decimal::vec")]
    pub marginal_medians: Vec<f64>,
    pub pairs: Vec<PairSummary>,
}

#[derive(Debug, Clone)]
pub struct Preview {
    pub model: CopulaModel,
    pub sample: JointSample,
    pub summary: PreviewSummary,
}

/// What-if preview: a fixed-seed sample of [`PREVIEW_SAMPLES`] points with
/// pairwise summaries. The input model is left untouched.
pub fn explore(model: &CopulaModel, overrides: &[ConcordanceJudgement]) -> Result<Preview, CopulaError> {
    explore_sample(model, overrides, PREVIEW_SAMPLES, PREVIEW_SEED)
}

/// [`explore`] with an explicit sample size and seed.
pub fn explore_sample(model: &CopulaModel, overrides: &[ConcordanceJudgement], n: usize, seed: u64) -> Result<Preview, CopulaError> {
    let alt = model.with_overrides(overrides)?;
    let sample = alt.sample_joint(n, seed)?;
    let medians: Vec<f64> = alt.marginals.iter().map(|m| m.median()).collect();
    let d = alt.dimension();
    let mut pairs = Vec::new();
    for i in 0..d {
        for j in (i + 1)..d {
            let (x, y) = (sample.column(i), sample.column(j));
            let c = alt
                .judgements
                .iter()
                .find(|jd| jd.key() == ConcordanceJudgement::new(alt.ids[i].clone(), alt.ids[j].clone(), 0.5).key())
                .map(|jd| jd.probability)
                .unwrap_or(0.5);
            pairs.push(PairSummary {
                pair: (alt.ids[i].clone(), alt.ids[j].clone()),
                concordance: c,
                rho: alt.correlation[i][j],
                empirical_concordance: empirical_concordance(x, y, medians[i], medians[j]),
                pearson: pearson(x, y),
                spearman: spearman(x, y),
            });
        }
    }
    let summary = PreviewSummary {
        n: sample.n,
        seed,
        ids: alt.ids.clone(),
        marginal_medians: medians,
        pairs,
    };
    Ok(Preview { model: alt, sample, summary })
}

/// Two-quantity convenience for [`explore`].
pub fn explore_pair(model: &CopulaModel, alt_c: f64) -> Result<Preview, CopulaError> {
    if model.dimension() != 2 {
        return Err(CopulaError::Judgements("a single concordance override needs a two-quantity model".into()));
    }
    explore(model, &[ConcordanceJudgement::new(model.ids[0].clone(), model.ids[1].clone(), alt_c)])
}

/// Fraction of points on the same side of both medians.
pub fn empirical_concordance(x: &[f64], y: &[f64], mx: f64, my: f64) -> f64 {
    let same = x.iter().zip(y).filter(|(a, b)| (**a > mx) == (**b > my)).count();
    same as f64 / x.len() as f64
}

pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    pearson(&ranks(x), &ranks(y))
}
