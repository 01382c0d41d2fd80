//! Judgements for a single quantity of interest and the individual →
//! discussion → group progression of a workshop.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distfit::{
    fit_candidates, normalize_constraints, DistError, Family, Fit, FitOptions, FittedDistribution,
    MixtureDistribution, ProbabilityConstraint, Support,
};

/// Points on the reveal grid.
pub const REVEAL_GRID_POINTS: usize = 401;
/// Fraction of the pooled plausible range added on each side of the reveal grid.
pub const REVEAL_GRID_MARGIN: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ElicitationError {
    #[error("invalid judgement: {0}")]
    Validation(String),
    #[error("incomplete judgement: {0}")]
    Incomplete(String),
    #[error("invalid quantity of interest: {0}")]
    InvalidQoi(String),
    #[error("stage error: cannot {attempted} while quantity {qoi} is in stage {current}")]
    Stage {
        qoi: String,
        current: Stage,
        attempted: String,
    },
    #[error("fit failed for {qoi}/{assessor}: {source}")]
    Fit {
        qoi: String,
        assessor: String,
        #[source]
        source: DistError,
    },
    #[error("family {family} was not among the successful fits for {qoi}")]
    FamilyUnavailable { qoi: String, family: Family },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scale {
    Raw,
    PercentReduction,
    Difference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantityOfInterest {
    pub id: String,
    pub label: String,
    pub scale: Scale,
    pub support: Support,
    #[serde(default)]
    pub definition: String,
}

impl QuantityOfInterest {
    pub fn validate(&self) -> Result<(), ElicitationError> {
        if self.id.trim().is_empty() {
            return Err(ElicitationError::InvalidQoi("id must not be empty".into()));
        }
        if self.scale == Scale::PercentReduction && self.support.upper > 1.0 {
            return Err(ElicitationError::InvalidQoi(format!(
                "{}: a percent reduction cannot exceed 1, support is {}",
                self.id, self.support
            )));
        }
        Ok(())
    }

    /// Families tried for a judgement, each on the support it is fitted on.
    ///
    /// Beta always uses the judgement's plausible range; gamma and lognormal
    /// need a quantity bounded below only; normal and t an unbounded quantity.
    pub fn candidates(&self, plausible_range: (f64, f64)) -> Vec<(Family, Support)> {
        let mut out = Vec::new();
        if Family::Normal.accepts(&self.support) {
            out.push((Family::Normal, self.support));
            out.push((Family::StudentT, self.support));
        }
        if Family::Gamma.accepts(&self.support) {
            out.push((Family::Gamma, self.support));
            out.push((Family::Lognormal, self.support));
        }
        if let Ok(range) = Support::bounded(plausible_range.0, plausible_range.1) {
            out.push((Family::Beta, range));
        }
        out
    }
}

/// Who a judgement belongs to: an anonymized expert or the group's RIO.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Assessor {
    Expert(String),
    Rio,
}

impl TryFrom<String> for Assessor {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        let t = s.trim();
        if t.is_empty() {
            Err("assessor must not be empty".into())
        } else if t.eq_ignore_ascii_case("rio") {
            Ok(Assessor::Rio)
        } else {
            Ok(Assessor::Expert(t.to_string()))
        }
    }
}

impl From<Assessor> for String {
    fn from(a: Assessor) -> String {
        a.to_string()
    }
}

impl fmt::Display for Assessor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Assessor::Expert(l) => f.write_str(l),
            Assessor::Rio => f.write_str("RIO"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgementSet {
    pub expert: Assessor,
    pub qoi: String,
    #[serde(with = "crate::decimal::pair")]
    pub plausible_range: (f64, f64),
    #[serde(default, with = "crate::decimal::opt", skip_serializing_if = "Option::is_none")]
    pub median: Option<f64>,
    #[serde(default, with = "crate::decimal::opt_pair", skip_serializing_if = "Option::is_none")]
    pub tertiles: Option<(f64, f64)>,
    #[serde(default, with = "crate::decimal::opt_pair", skip_serializing_if = "Option::is_none")]
    pub quartiles: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probability_statements: Option<Vec<ProbabilityConstraint>>,
}

impl JudgementSet {
    pub fn new(expert: Assessor, qoi: impl Into<String>, plausible_range: (f64, f64)) -> Self {
        JudgementSet {
            expert,
            qoi: qoi.into(),
            plausible_range,
            median: None,
            tertiles: None,
            quartiles: None,
            probability_statements: None,
        }
    }

    pub fn with_median(mut self, m: f64) -> Self {
        self.median = Some(m);
        self
    }

    pub fn with_tertiles(mut self, lo: f64, hi: f64) -> Self {
        self.tertiles = Some((lo, hi));
        self
    }

    pub fn with_quartiles(mut self, lo: f64, hi: f64) -> Self {
        self.quartiles = Some((lo, hi));
        self
    }

    pub fn with_statements(mut self, s: Vec<ProbabilityConstraint>) -> Self {
        self.probability_statements = Some(s);
        self
    }

    /// Checks ordering invariants; error messages name the offending pair.
    pub fn validate(&self) -> Result<(), ElicitationError> {
        let bad = |m: String| Err(ElicitationError::Validation(m));
        let (lo, hi) = self.plausible_range;
        if !(lo.is_finite() && hi.is_finite()) {
            return bad(format!("plausible range ({lo}, {hi}) must be finite"));
        }
        if !(lo < hi) {
            return bad(format!("plausible lower bound {lo} must be below upper bound {hi}"));
        }
        let inside = |name: &str, v: f64| -> Result<(), ElicitationError> {
            if v > lo && v < hi {
                Ok(())
            } else {
                Err(ElicitationError::Validation(format!(
                    "{name} {v} must lie strictly inside the plausible range ({lo}, {hi})"
                )))
            }
        };
        if let Some(m) = self.median {
            inside("median", m)?;
        }
        if self.tertiles.is_some() && self.quartiles.is_some() {
            return bad("give tertiles or quartiles, not both".into());
        }
        for (name, pair) in [("tertile", self.tertiles), ("quartile", self.quartiles)] {
            if let Some((a, b)) = pair {
                inside(&format!("lower {name}"), a)?;
                inside(&format!("upper {name}"), b)?;
                if !(a < b) {
                    return bad(format!("lower {name} {a} must be below upper {name} {b}"));
                }
                if let Some(m) = self.median {
                    if !(a < m) {
                        return bad(format!("lower {name} {a} must be below the median {m}"));
                    }
                    if !(m < b) {
                        return bad(format!("median {m} must be below upper {name} {b}"));
                    }
                }
            }
        }
        if let Some(st) = &self.probability_statements {
            for c in st {
                if !(c.value >= lo && c.value <= hi) {
                    return bad(format!(
                        "probability statement at {} lies outside the plausible range ({lo}, {hi})",
                        c.value
                    ));
                }
            }
        }
        Ok(())
    }

    /// Maps the judgements to cumulative-probability constraints, sorted by value.
    pub fn to_constraints(&self) -> Result<Vec<ProbabilityConstraint>, ElicitationError> {
        self.validate()?;
        let mut cs = Vec::new();
        if let Some(m) = self.median {
            cs.push(ProbabilityConstraint::new(m, 0.5));
        }
        if let Some((a, b)) = self.tertiles {
            cs.push(ProbabilityConstraint::new(a, 1.0 / 3.0));
            cs.push(ProbabilityConstraint::new(b, 2.0 / 3.0));
        }
        if let Some((a, b)) = self.quartiles {
            cs.push(ProbabilityConstraint::new(a, 0.25));
            cs.push(ProbabilityConstraint::new(b, 0.75));
        }
        if let Some(st) = &self.probability_statements {
            cs.extend(st.iter().copied());
        }
        let only_median = self.median.is_some() && cs.len() == 1;
        if cs.len() < 2 || only_median {
            return Err(ElicitationError::Incomplete(format!(
                "{} on {}: need a median with tertiles, quartiles or probability statements",
                self.expert, self.qoi
            )));
        }
        normalize_constraints(&cs).map_err(|e| match e {
            DistError::InvalidConstraints(m) => ElicitationError::Validation(m),
            other => ElicitationError::Validation(other.to_string()),
        })
    }
}

/// Fits every candidate family to a judgement, ranked by residual.
pub fn fit_judgement(qoi: &QuantityOfInterest, j: &JudgementSet) -> Result<Vec<Fit>, ElicitationError> {
    let cs = j.to_constraints()?;
    let (lo, hi) = j.plausible_range;
    if !(qoi.support.contains(lo) && qoi.support.contains(hi)) {
        return Err(ElicitationError::Validation(format!(
            "plausible range ({lo}, {hi}) extends beyond the support {} of {}",
            qoi.support, qoi.id
        )));
    }
    fit_candidates(&qoi.candidates(j.plausible_range), &cs, &FitOptions::default()).map_err(|source| {
        ElicitationError::Fit {
            qoi: qoi.id.clone(),
            assessor: j.expert.to_string(),
            source,
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Individual,
    Discussion,
    Group,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Individual => "individual",
            Stage::Discussion => "discussion",
            Stage::Group => "group",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedFit {
    pub family: Family,
    #[serde(with = "crate::decimal")]
    pub residual: f64,
}

fn ranking(fits: &[Fit]) -> Vec<RankedFit> {
    fits.iter()
        .map(|f| RankedFit {
            family: f.distribution.family(),
            residual: f.residual,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualEntry {
    pub judgement: JudgementSet,
    pub fit: Fit,
    pub ranking: Vec<RankedFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusEntry {
    pub fit: Fit,
    /// Family confirmed by the facilitator; `None` means the best-ranked fit was accepted.
    pub facilitator_choice: Option<Family>,
}

/// Everything recorded for one quantity of interest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElicitationRecord {
    pub qoi: String,
    pub stage: Stage,
    pub individual: BTreeMap<String, IndividualEntry>,
    pub pool: Option<MixtureDistribution>,
    pub group: Option<JudgementSet>,
    pub group_fits: Vec<Fit>,
    pub consensus: Option<ConsensusEntry>,
    pub notes: Vec<String>,
}

impl ElicitationRecord {
    pub fn new(qoi: impl Into<String>) -> Self {
        ElicitationRecord {
            qoi: qoi.into(),
            stage: Stage::Individual,
            individual: BTreeMap::new(),
            pool: None,
            group: None,
            group_fits: Vec::new(),
            consensus: None,
            notes: Vec::new(),
        }
    }

    fn stage_error(&self, attempted: &str) -> ElicitationError {
        ElicitationError::Stage {
            qoi: self.qoi.clone(),
            current: self.stage,
            attempted: attempted.into(),
        }
    }

    /// Fits and stores one expert's judgement (best-ranked family).
    pub fn submit_individual(&mut self, qoi: &QuantityOfInterest, j: JudgementSet) -> Result<&IndividualEntry, ElicitationError> {
        let label = match &j.expert {
            Assessor::Expert(l) => l.clone(),
            Assessor::Rio => return Err(ElicitationError::Validation("RIO judgements are group judgements".into())),
        };
        if self.stage != Stage::Individual {
            return Err(self.stage_error("submit an individual judgement"));
        }
        let fits = fit_judgement(qoi, &j)?;
        let entry = IndividualEntry {
            ranking: ranking(&fits),
            fit: fits[0].clone(),
            judgement: j,
        };
        self.individual.insert(label.clone(), entry);
        Ok(&self.individual[&label])
    }

    /// Pools the individual fits with equal weights and opens discussion.
    pub fn reveal(&mut self) -> Result<&MixtureDistribution, ElicitationError> {
        if self.stage == Stage::Group {
            return Err(self.stage_error("reveal"));
        }
        if self.individual.is_empty() {
            return Err(ElicitationError::Incomplete(format!(
                "no individual judgements recorded for {}",
                self.qoi
            )));
        }
        let ds: Vec<FittedDistribution> = self.individual.values().map(|e| e.fit.distribution.clone()).collect();
        let pool = crate::distfit::linear_pool(&ds, None).map_err(|e| ElicitationError::Validation(e.to_string()))?;
        self.stage = Stage::Discussion;
        Ok(self.pool.insert(pool))
    }

    /// Records RIO's judgements and refits every candidate family.
    pub fn submit_group(&mut self, qoi: &QuantityOfInterest, j: JudgementSet) -> Result<&[Fit], ElicitationError> {
        if j.expert != Assessor::Rio {
            return Err(ElicitationError::Validation(format!(
                "group judgements belong to RIO, not {}",
                j.expert
            )));
        }
        if self.stage == Stage::Individual {
            return Err(self.stage_error("submit a group judgement before reveal"));
        }
        let fits = fit_judgement(qoi, &j)?;
        self.group = Some(j);
        self.group_fits = fits;
        self.consensus = None;
        self.stage = Stage::Group;
        Ok(&self.group_fits)
    }

    /// Accepts the consensus distribution, from `family` if given, else the best-ranked fit.
    pub fn fit_consensus(&mut self, family: Option<Family>) -> Result<&ConsensusEntry, ElicitationError> {
        if self.stage != Stage::Group || self.group.is_none() {
            return Err(self.stage_error("fit a consensus distribution without group judgements"));
        }
        if self.individual.is_empty() {
            return Err(ElicitationError::Incomplete(format!(
                "no individual judgements recorded for {}",
                self.qoi
            )));
        }
        let fit = match family {
            None => self.group_fits[0].clone(),
            Some(f) => self
                .group_fits
                .iter()
                .find(|x| x.distribution.family() == f)
                .cloned()
                .ok_or_else(|| ElicitationError::FamilyUnavailable {
                    qoi: self.qoi.clone(),
                    family: f,
                })?,
        };
        Ok(self.consensus.insert(ConsensusEntry {
            fit,
            facilitator_choice: family,
        }))
    }

    /// Facilitator override of the stage machine.
    pub fn override_stage(&mut self, stage: Stage) {
        self.stage = stage;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub label: String,
    pub family: Option<Family>,
    pub params: Vec<f64>,
    pub pdf: Vec<f64>,
    pub cdf: Vec<f64>,
}

/// Overlay-ready comparison of the individual fits and their linear pool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RevealSummary {
    pub qoi: String,
    pub grid: Vec<f64>,
    pub experts: Vec<Curve>,
    pub pool: Curve,
    pub pool_median: f64,
}

/// Evaluates every individual fit and the pool on a common grid spanning the
/// union of plausible ranges, widened by [`REVEAL_GRID_MARGIN`] on each side.
pub fn reveal_summary(record: &ElicitationRecord) -> Result<RevealSummary, ElicitationError> {
    let pool = record
        .pool
        .as_ref()
        .ok_or_else(|| ElicitationError::Incomplete(format!("{} has not been revealed", record.qoi)))?;
    let lo = record
        .individual
        .values()
        .map(|e| e.judgement.plausible_range.0)
        .fold(f64::INFINITY, f64::min);
    let hi = record
        .individual
        .values()
        .map(|e| e.judgement.plausible_range.1)
        .fold(f64::NEG_INFINITY, f64::max);
    let pad = REVEAL_GRID_MARGIN * (hi - lo);
    let (a, b) = (lo - pad, hi + pad);
    let step = (b - a) / (REVEAL_GRID_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..REVEAL_GRID_POINTS).map(|i| a + step * i as f64).collect();

    let experts = record
        .individual
        .iter()
        .map(|(label, e)| {
            let d = &e.fit.distribution;
            Curve {
                label: label.clone(),
                family: Some(d.family()),
                params: d.params().to_vec(),
                pdf: grid.iter().map(|&x| d.pdf(x)).collect(),
                cdf: grid.iter().map(|&x| d.cdf(x)).collect(),
            }
        })
        .collect();
    let pool_curve = Curve {
        label: "linear pool".into(),
        family: None,
        params: pool.weights().to_vec(),
        pdf: grid.iter().map(|&x| pool.pdf(x)).collect(),
        cdf: grid.iter().map(|&x| pool.cdf(x)).collect(),
    };
    Ok(RevealSummary {
        qoi: record.qoi.clone(),
        grid,
        experts,
        pool: pool_curve,
        pool_median: pool.median(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn expert(l: &str) -> Assessor {
        Assessor::Expert(l.into())
    }

    fn qoi_x() -> QuantityOfInterest {
        QuantityOfInterest {
            id: "X".into(),
            label: "exacerbation reduction".into(),
            scale: Scale::PercentReduction,
            support: Support::new(f64::NEG_INFINITY, 1.0).unwrap(),
            definition: String::new(),
        }
    }

    #[test]
    fn tertiles_map_to_thirds() {
        let j = JudgementSet::new(expert("A"), "X", (0.0, 20.0)).with_median(10.0).with_tertiles(7.0, 14.0);
        let cs = j.to_constraints().unwrap();
        let pairs: Vec<_> = cs.iter().map(|c| (c.value, c.cum_prob)).collect();
        assert_eq!(pairs, vec![(7.0, 1.0 / 3.0), (10.0, 0.5), (14.0, 2.0 / 3.0)]);
    }

    #[test]
    fn quartiles_map_to_quarters() {
        let j = JudgementSet::new(expert("A"), "X", (-3.0, 3.0)).with_median(0.0).with_quartiles(-1.0, 1.0);
        let pairs: Vec<_> = j.to_constraints().unwrap().iter().map(|c| (c.value, c.cum_prob)).collect();
        assert_eq!(pairs, vec![(-1.0, 0.25), (0.0, 0.5), (1.0, 0.75)]);
    }

    #[test]
    fn group_statements_pass_through_sorted() {
        let j = JudgementSet::new(Assessor::Rio, "X", (0.0, 0.70)).with_statements(vec![
            ProbabilityConstraint::new(0.25, 0.30),
            ProbabilityConstraint::exceedance(0.40, 0.30),
            ProbabilityConstraint::new(0.35, 0.50),
        ]);
        let cs = j.to_constraints().unwrap();
        let vals: Vec<_> = cs.iter().map(|c| c.value).collect();
        assert_eq!(vals, vec![0.25, 0.35, 0.40]);
        assert!((cs[2].cum_prob - 0.70).abs() < 1e-15);
    }

    #[test]
    fn median_equal_to_tertile_is_rejected() {
        let j = JudgementSet::new(expert("A"), "X", (0.0, 0.7)).with_median(0.3).with_tertiles(0.3, 0.4);
        let err = j.to_constraints().unwrap_err();
        assert!(matches!(&err, ElicitationError::Validation(m) if m.contains("0.3")), "{err}");
    }

    #[test]
    fn tertile_outside_range_and_both_kinds_rejected() {
        let j = JudgementSet::new(expert("A"), "X", (0.0, 0.7)).with_median(0.3).with_tertiles(0.2, 0.8);
        assert!(j.validate().is_err());
        let j = JudgementSet::new(expert("A"), "X", (0.0, 0.7))
            .with_median(0.3)
            .with_tertiles(0.2, 0.4)
            .with_quartiles(0.25, 0.35);
        assert!(j.validate().is_err());
    }

    #[test]
    fn statement_colliding_with_median_names_pair() {
        let j = JudgementSet::new(expert("A"), "X", (0.0, 1.0))
            .with_median(0.5)
            .with_statements(vec![ProbabilityConstraint::new(0.5, 0.6)]);
        let err = j.to_constraints().unwrap_err().to_string();
        assert!(err.contains("0.5") && err.contains("0.6"), "{err}");
    }

    #[test]
    fn median_alone_is_incomplete() {
        let j = JudgementSet::new(expert("A"), "X", (0.0, 1.0)).with_median(0.5);
        assert!(matches!(j.to_constraints(), Err(ElicitationError::Incomplete(_))));
    }

    #[test]
    fn percent_reduction_support_checked() {
        let mut q = qoi_x();
        q.support = Support::new(0.0, 2.0).unwrap();
        assert!(q.validate().is_err());
    }

    #[test]
    fn candidates_follow_support() {
        let fams: Vec<_> = qoi_x().candidates((0.0, 0.7)).into_iter().map(|(f, _)| f).collect();
        assert_eq!(fams, vec![Family::Beta]);
        let mut fev = qoi_x();
        fev.scale = Scale::Difference;
        fev.support = Support::REAL_LINE;
        let fams: Vec<_> = fev.candidates((-50.0, 200.0)).into_iter().map(|(f, _)| f).collect();
        assert_eq!(fams, vec![Family::Normal, Family::StudentT, Family::Beta]);
    }

    #[test]
    fn stage_machine_order() {
        let q = qoi_x();
        let mut r = ElicitationRecord::new("X");
        let rio = JudgementSet::new(Assessor::Rio, "X", (0.0, 0.70)).with_statements(vec![
            ProbabilityConstraint::new(0.25, 0.30),
            ProbabilityConstraint::new(0.35, 0.50),
            ProbabilityConstraint::new(0.40, 0.70),
        ]);
        assert!(matches!(r.submit_group(&q, rio.clone()), Err(ElicitationError::Stage { .. })));
        assert!(r.reveal().is_err());
        let j = JudgementSet::new(expert("A"), "X", (0.0, 0.7)).with_median(0.3).with_tertiles(0.2, 0.4);
        r.submit_individual(&q, j.clone()).unwrap();
        assert!(r.fit_consensus(None).is_err());
        r.reveal().unwrap();
        assert_eq!(r.stage, Stage::Discussion);
        assert!(matches!(r.submit_individual(&q, j), Err(ElicitationError::Stage { .. })));
        r.submit_group(&q, rio).unwrap();
        let c = r.fit_consensus(Some(Family::Beta)).unwrap();
        assert_eq!(c.facilitator_choice, Some(Family::Beta));
        assert!(matches!(
            r.fit_consensus(Some(Family::Normal)),
            Err(ElicitationError::FamilyUnavailable { .. })
        ));
    }

    #[test]
    fn assessor_serializes_as_label() {
        assert_eq!(serde_json::to_string(&Assessor::Rio).unwrap(), "\"RIO\"");
        let a: Assessor = serde_json::from_str("\"C\"").unwrap();
        assert_eq!(a, expert("C"));
    }
}
