//! Probability of success for a confirmatory program.
//!
//! Each simulation draws true effects (exacerbation rate reduction and FEV1
//! difference) from the joint elicited distribution, simulates every pivotal
//! trial on both endpoints, and applies the significance and target product
//! profile (TPP) rules. The trial-level frequencies are then multiplied by
//! benchmark approval, safety and risk factors.
//!
//! Simulation `i` takes its effect draw from one substream and its trial data
//! from another, both derived from `(seed, i)`. Changing a design or rule knob
//! therefore leaves the sampled effects untouched.

use std::fmt::Write as _;
use std::ops::AddAssign;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, Gamma, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::copula::{ConcordanceJudgement, CopulaError, CopulaModel};
use crate::distfit::std_normal_quantile;
use crate::sampling::{self, StreamRng};

pub const DESIGN_SCHEMA: &str = "elicit.design/1";
pub const RULE_SCHEMA: &str = "elicit.rule/1";
pub const RESULT_SCHEMA: &str = "elicit.pos-result/1";

/// Largest tolerated fraction of effect draws outside the endpoint domain.
pub const MAX_REJECTED_FRACTION: f64 = 0.001;

/// Count substituted for an arm with no events when forming the log rate ratio.
const ZERO_COUNT: f64 = 0.5;

const TRIAL_STREAM: u64 = 1 << 63;
const BLOCK: u64 = 4096;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PosError {
    #[error("invalid design: {0}")]
    Design(String),
    #[error("invalid success rule: {0}")]
    Rule(String),
    #[error("invalid benchmarks: {0}")]
    Benchmarks(String),
    #[error("invalid effect source: {0}")]
    Source(String),
    #[error("{rejected} of {n_sims} effect draws fall outside the endpoint domain (reduction >= 1), above the 0.1% limit")]
    TooManyRejected { rejected: u64, n_sims: u64 },
    #[error(transparent)]
    Copula(#[from] CopulaError),
}

fn default_design_schema() -> String {
    DESIGN_SCHEMA.to_string()
}

fn default_rule_schema() -> String {
    RULE_SCHEMA.to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dose {
    pub label: String,
    /// Multiplies the sampled true effects for this dose.
    #[serde(with = "crate::decimal", default = "one")]
    pub effect_ratio: f64,
}

fn one() -> f64 {
    1.0
}

fn two() -> u32 {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExacerbationEndpoint {
    #[serde(with = "crate::decimal")]
    pub follow_up_years: f64,
    /// Annual event rate on placebo.
    #[serde(with = "crate::decimal")]
    pub placebo_rate: f64,
    /// Negative-binomial dispersion: per-patient variance is `m + dispersion * m^2`.
    #[serde(with = "crate::decimal")]
    pub dispersion: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fev1Endpoint {
    /// Patient-level residual standard deviation in mL.
    #[serde(with = "crate::decimal")]
    pub residual_sd: f64,
}

/// Placebo plus doses, replicated over `n_trials` identical trials. Placebo
/// rate and dispersion have no defaults and must be supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialDesign {
    #[serde(default = "default_design_schema")]
    pub schema: String,
    pub doses: Vec<Dose>,
    pub arm_size: u32,
    #[serde(default = "two")]
    pub n_trials: u32,
    pub exacerbation: ExacerbationEndpoint,
    pub fev1: Fev1Endpoint,
}

impl TrialDesign {
    /// Two doses sharing one true effect.
    pub fn two_doses(arm_size: u32, exacerbation: ExacerbationEndpoint, fev1: Fev1Endpoint) -> Self {
        TrialDesign {
            schema: DESIGN_SCHEMA.into(),
            doses: vec![
                Dose { label: "low".into(), effect_ratio: 1.0 },
                Dose { label: "high".into(), effect_ratio: 1.0 },
            ],
            arm_size,
            n_trials: 2,
            exacerbation,
            fev1,
        }
    }

    pub fn validate(&self) -> Result<(), PosError> {
        let bad = |m: String| Err(PosError::Design(m));
        if self.schema != DESIGN_SCHEMA {
            return bad(format!("unsupported schema {:?}, expected {DESIGN_SCHEMA:?}", self.schema));
        }
        if self.doses.is_empty() {
            return bad("at least one dose is required".into());
        }
        if let Some(d) = self.doses.iter().find(|d| !(d.effect_ratio > 0.0 && d.effect_ratio.is_finite())) {
            return bad(format!("dose {} has effect ratio {}", d.label, d.effect_ratio));
        }
        if self.arm_size < 2 {
            return bad(format!("arm size {} is below 2", self.arm_size));
        }
        if self.n_trials == 0 {
            return bad("at least one trial is required".into());
        }
        let e = &self.exacerbation;
        for (name, v) in [
            ("follow_up_years", e.follow_up_years),
            ("placebo_rate", e.placebo_rate),
            ("dispersion", e.dispersion),
            ("residual_sd", self.fev1.residual_sd),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return bad(format!("{name} must be positive, got {v}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Endpoints {
    #[default]
    Both,
    ExacerbationOnly,
    Fev1Only,
}

/// Which significant dose's point estimates are checked against the TPP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TppDose {
    /// The significant dose with the largest estimated exacerbation reduction
    /// (largest FEV1 difference under an FEV1-only rule).
    #[default]
    BestSignificant,
    AnySignificant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tpp {
    /// Minimum estimated relative rate reduction.
    #[serde(with = "crate::decimal::opt", default, skip_serializing_if = "Option::is_none")]
    pub exacerbation: Option<f64>,
    /// Minimum estimated FEV1 difference in mL.
    #[serde(with = "crate::decimal::opt", default, skip_serializing_if = "Option::is_none")]
    pub fev1: Option<f64>,
}

impl Default for Tpp {
    fn default() -> Self {
        Tpp {
            exacerbation: Some(0.40),
            fev1: Some(120.0),
        }
    }
}

/// Success requires, in every trial, at least one dose significant on every
/// required endpoint whose point estimates meet the TPP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessRule {
    #[serde(default = "default_rule_schema")]
    pub schema: String,
    /// One-sided level of every test.
    #[serde(with = "crate::decimal")]
    pub alpha: f64,
    #[serde(default)]
    pub endpoints: Endpoints,
    #[serde(default)]
    pub tpp: Tpp,
    #[serde(default)]
    pub tpp_dose: TppDose,
}

impl Default for SuccessRule {
    fn default() -> Self {
        SuccessRule {
            schema: RULE_SCHEMA.into(),
            alpha: 0.025,
            endpoints: Endpoints::Both,
            tpp: Tpp::default(),
            tpp_dose: TppDose::BestSignificant,
        }
    }
}

impl SuccessRule {
    pub fn significance_only(alpha: f64) -> Self {
        SuccessRule {
            alpha,
            tpp: Tpp {
                exacerbation: None,
                fev1: None,
            },
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), PosError> {
        if self.schema != RULE_SCHEMA {
            return Err(PosError::Rule(format!("unsupported schema {:?}, expected {RULE_SCHEMA:?}", self.schema)));
        }
        if !(self.alpha > 0.0 && self.alpha < 0.5) {
            return Err(PosError::Rule(format!("alpha {} outside (0, 0.5)", self.alpha)));
        }
        if let Some(t) = self.tpp.exacerbation {
            if !(t < 1.0 && t.is_finite()) {
                return Err(PosError::Rule(format!("exacerbation TPP {t} must be a reduction below 1")));
            }
        }
        if let Some(t) = self.tpp.fev1 {
            if !t.is_finite() {
                return Err(PosError::Rule(format!("FEV1 TPP {t} must be finite")));
            }
        }
        Ok(())
    }

    /// Applies a `key=value` override as accepted on the command line.
    pub fn apply_override(&mut self, spec: &str) -> Result<(), PosError> {
        let (k, v) = spec
            .split_once('=')
            .ok_or_else(|| PosError::Rule(format!("override {spec:?} is not key=value")))?;
        let (k, v) = (k.trim(), v.trim());
        let num = || v.parse::<f64>().map_err(|_| PosError::Rule(format!("{k}: {v:?} is not a number")));
        let opt = || -> Result<Option<f64>, PosError> {
            if v == "none" {
                Ok(None)
            } else {
                num().map(Some)
            }
        };
        match k {
            "alpha" => self.alpha = num()?,
            "tpp.exacerbation" | "tpp_exacerbation" => self.tpp.exacerbation = opt()?,
            "tpp.fev1" | "tpp_fev1" => self.tpp.fev1 = opt()?,
            "endpoints" => {
                self.endpoints = serde_json::from_value(serde_json::Value::String(v.into()))
                    .map_err(|_| PosError::Rule(format!("unknown endpoints {v:?}")))?
            }
            "tpp_dose" | "tpp-dose" => {
                self.tpp_dose = serde_json::from_value(serde_json::Value::String(v.into()))
                    .map_err(|_| PosError::Rule(format!("unknown tpp_dose {v:?}")))?
            }
            _ => return Err(PosError::Rule(format!("unknown rule key {k:?}"))),
        }
        self.validate()
    }
}

/// Industry benchmark and adjustment factors. Only the last three enter the PoS;
/// the phase-transition rates are kept for the report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Benchmarks {
    #[serde(with = "crate::decimal")]
    pub p2_success: f64,
    #[serde(with = "crate::decimal")]
    pub p3_given_p2: f64,
    #[serde(with = "crate::decimal")]
    pub approval_given_p3: f64,
    #[serde(with = "crate::decimal")]
    pub safety: f64,
    #[serde(with = "crate::decimal")]
    pub risk_adjustment: f64,
}

impl Default for Benchmarks {
    fn default() -> Self {
        Benchmarks {
            p2_success: 0.24,
            p3_given_p2: 0.60,
            approval_given_p3: 0.94,
            safety: 1.0,
            risk_adjustment: 1.0,
        }
    }
}

impl Benchmarks {
    pub fn neutral() -> Self {
        Benchmarks {
            approval_given_p3: 1.0,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), PosError> {
        for (name, v) in [
            ("p2_success", self.p2_success),
            ("p3_given_p2", self.p3_given_p2),
            ("approval_given_p3", self.approval_given_p3),
            ("safety", self.safety),
            ("risk_adjustment", self.risk_adjustment),
        ] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(PosError::Benchmarks(format!("{name} = {v} outside (0, 1]")));
            }
        }
        Ok(())
    }
}

/// Where true effects come from. Columns index `(reduction, fev1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum EffectSource {
    Copula {
        model: CopulaModel,
        exacerbation: usize,
        fev1: usize,
    },
    PointMass {
        #[serde(with = "crate::decimal")]
        reduction: f64,
        #[serde(with = "crate::decimal")]
        fev1: f64,
    },
    /// Simulation `i` uses pair `i mod len`.
    Samples {
        #[serde(with = "crate::decimal::vec")]
        reduction: Vec<f64>,
        #[serde(with = "crate::decimal::vec")]
        fev1: Vec<f64>,
    },
}

impl EffectSource {
    pub fn point_mass(reduction: f64, fev1: f64) -> Self {
        EffectSource::PointMass { reduction, fev1 }
    }

    fn validate(&self) -> Result<(), PosError> {
        match self {
            EffectSource::Copula { model, exacerbation, fev1 } => {
                let d = model.dimension();
                if *exacerbation >= d || *fev1 >= d || exacerbation == fev1 {
                    return Err(PosError::Source(format!(
                        "columns ({exacerbation}, {fev1}) do not pick two distinct quantities of a {d}-dimensional copula"
                    )));
                }
            }
            EffectSource::PointMass { reduction, fev1 } => {
                if !reduction.is_finite() || !fev1.is_finite() {
                    return Err(PosError::Source("point-mass effects must be finite".into()));
                }
            }
            EffectSource::Samples { reduction, fev1 } => {
                if reduction.is_empty() || reduction.len() != fev1.len() {
                    return Err(PosError::Source(format!(
                        "sample columns must be non-empty and equal length, got {} and {}",
                        reduction.len(),
                        fev1.len()
                    )));
                }
            }
        }
        Ok(())
    }

    fn draw(&self, index: u64, rng: &mut StreamRng) -> (f64, f64) {
        match self {
            EffectSource::Copula { model, exacerbation, fev1 } => {
                let row = model.draw(rng);
                (row[*exacerbation], row[*fev1])
            }
            EffectSource::PointMass { reduction, fev1 } => (*reduction, *fev1),
            EffectSource::Samples { reduction, fev1 } => {
                let i = (index % reduction.len() as u64) as usize;
                (reduction[i], fev1[i])
            }
        }
    }
}

/// Per-dose estimates from one simulated trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoseOutcome {
    pub rate_ratio: f64,
    pub z_exacerbation: f64,
    pub fev1_difference: f64,
    pub z_fev1: f64,
}

impl DoseOutcome {
    pub fn reduction(&self) -> f64 {
        1.0 - self.rate_ratio
    }
}

/// Arm event total for `n` patients with gamma-frailty Poisson counts: the
/// sum of the frailties is Gamma(n / dispersion, rate * dispersion).
fn arm_events<R: Rng + ?Sized>(n: f64, annual_rate: f64, e: &ExacerbationEndpoint, rng: &mut R) -> f64 {
    let shape = n / e.dispersion;
    let scale = annual_rate * e.dispersion;
    let total_rate = Gamma::new(shape, scale).expect("validated design").sample(rng);
    let mean = total_rate * e.follow_up_years;
    if mean <= 0.0 {
        return 0.0;
    }
    Poisson::new(mean).expect("positive mean").sample(rng)
}

/// Simulates one trial given the true effects shared by its doses.
pub fn simulate_trial<R: Rng + ?Sized>(design: &TrialDesign, reduction: f64, fev1: f64, rng: &mut R) -> Vec<DoseOutcome> {
    let n = design.arm_size as f64;
    let e = &design.exacerbation;
    let se_mean = design.fev1.residual_sd / n.sqrt();
    let y_placebo = arm_events(n, e.placebo_rate, e, rng).max(ZERO_COUNT);
    let z: f64 = StandardNormal.sample(rng);
    let fev1_placebo = se_mean * z;
    design
        .doses
        .iter()
        .map(|d| {
            let true_rr = 1.0 - reduction * d.effect_ratio;
            let y = arm_events(n, e.placebo_rate * true_rr, e, rng).max(ZERO_COUNT);
            let rate_ratio = y / y_placebo;
            let var = 1.0 / y + 1.0 / y_placebo + 2.0 * e.dispersion / n;
            let z_exacerbation = -rate_ratio.ln() / var.sqrt();
            let z: f64 = StandardNormal.sample(rng);
            let arm_mean = fev1 * d.effect_ratio + se_mean * z;
            let fev1_difference = arm_mean - fev1_placebo;
            let z_fev1 = fev1_difference / (se_mean * std::f64::consts::SQRT_2);
            DoseOutcome {
                rate_ratio,
                z_exacerbation,
                fev1_difference,
                z_fev1,
            }
        })
        .collect()
}

/// Whether a trial is significant and whether it also meets the TPP.
fn judge_trial(outcomes: &[DoseOutcome], rule: &SuccessRule, critical: f64) -> (bool, bool) {
    let sig = |o: &DoseOutcome| match rule.endpoints {
        Endpoints::Both => o.z_exacerbation > critical && o.z_fev1 > critical,
        Endpoints::ExacerbationOnly => o.z_exacerbation > critical,
        Endpoints::Fev1Only => o.z_fev1 > critical,
    };
    let meets = |o: &DoseOutcome| {
        let ex = rule.endpoints == Endpoints::Fev1Only || rule.tpp.exacerbation.is_none_or(|t| o.reduction() >= t);
        let fv = rule.endpoints == Endpoints::ExacerbationOnly || rule.tpp.fev1.is_none_or(|t| o.fev1_difference >= t);
        ex && fv
    };
    let winners: Vec<&DoseOutcome> = outcomes.iter().filter(|o| sig(o)).collect();
    if winners.is_empty() {
        return (false, false);
    }
    let tpp = match rule.tpp_dose {
        TppDose::AnySignificant => winners.iter().any(|o| meets(o)),
        TppDose::BestSignificant => {
            let key = |o: &DoseOutcome| {
                if rule.endpoints == Endpoints::Fev1Only {
                    o.fev1_difference
                } else {
                    o.reduction()
                }
            };
            let best = winners
                .iter()
                .copied()
                .reduce(|a, b| if key(b) > key(a) { b } else { a })
                .expect("non-empty");
            meets(best)
        }
    };
    (true, tpp)
}

#[derive(Debug, Clone, Default)]
struct Tally {
    accepted: u64,
    rejected: u64,
    trial_success: u64,
    joint_success: u64,
    /// Indexed `[trial][dose][endpoint]`, flattened.
    rejections: Vec<u64>,
}

impl AddAssign for Tally {
    fn add_assign(&mut self, o: Tally) {
        self.accepted += o.accepted;
        self.rejected += o.rejected;
        self.trial_success += o.trial_success;
        self.joint_success += o.joint_success;
        if self.rejections.len() < o.rejections.len() {
            self.rejections.resize(o.rejections.len(), 0);
        }
        for (a, b) in self.rejections.iter_mut().zip(o.rejections) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestRejection {
    pub trial: u32,
    pub dose: String,
    pub endpoint: String,
    #[serde(with = "crate::decimal")]
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Factor {
    pub name: String,
    #[serde(with = "crate::decimal")]
    pub value: f64,
}

/// Multiplicative ledger whose product is the PoS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub factors: Vec<Factor>,
    #[serde(with = "crate::decimal")]
    pub product: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosResult {
    pub schema: String,
    pub n_sims: u64,
    pub seed: u64,
    /// Effect draws discarded for lying outside the endpoint domain.
    pub n_rejected: u64,
    #[serde(with = "crate::decimal")]
    pub p_trial_success: f64,
    #[serde(with = "crate::decimal")]
    pub se_trial_success: f64,
    /// Joint frequency of significance and TPP attainment.
    #[serde(with = "crate::decimal")]
    pub p_tpp_met: f64,
    #[serde(with = "crate::decimal")]
    pub se_tpp_met: f64,
    #[serde(with = "crate::decimal")]
    pub pos: f64,
    pub rejection_rates: Vec<TestRejection>,
    pub benchmarks: Benchmarks,
    pub rule: SuccessRule,
    pub decomposition: Decomposition,
}

impl PosResult {
    pub fn n_effective(&self) -> u64 {
        self.n_sims - self.n_rejected
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Probability of success");
        let _ = writeln!(s, "  simulations: {} (seed {}, {} rejected)", self.n_sims, self.seed, self.n_rejected);
        let _ = writeln!(
            s,
            "  trial success:        {:.4} (MC SE {:.4})",
            self.p_trial_success, self.se_trial_success
        );
        let _ = writeln!(s, "  success and TPP met:  {:.4} (MC SE {:.4})", self.p_tpp_met, self.se_tpp_met);
        let _ = writeln!(s, "  decomposition:");
        for f in &self.decomposition.factors {
            let _ = writeln!(s, "    {:<22} {:.6}", f.name, f.value);
        }
        let _ = writeln!(s, "    {:<22} {:.6}", "product", self.decomposition.product);
        let _ = writeln!(s, "  PoS: {:.4}", self.pos);
        s
    }
}

/// Builds the factor table for a result: trial success, TPP attainment given
/// success, approval, safety and risk adjustment.
pub fn decompose(p_trial: f64, p_joint: f64, b: &Benchmarks) -> Decomposition {
    let tpp_given_trial = if p_trial > 0.0 { p_joint / p_trial } else { 1.0 };
    let factors = vec![
        Factor { name: "trial_success".into(), value: p_trial },
        Factor { name: "tpp_given_success".into(), value: tpp_given_trial },
        Factor { name: "approval".into(), value: b.approval_given_p3 },
        Factor { name: "safety".into(), value: b.safety },
        Factor { name: "risk_adjustment".into(), value: b.risk_adjustment },
    ];
    let product = factors.iter().map(|f| f.value).product();
    Decomposition { factors, product }
}

pub fn simulate_program(
    source: &EffectSource,
    design: &TrialDesign,
    rule: &SuccessRule,
    benchmarks: &Benchmarks,
    n_sims: u64,
    seed: u64,
) -> Result<PosResult, PosError> {
    run_program(source, design, rule, benchmarks, n_sims, seed, None)
}

/// [`simulate_program`] that adds finished simulations to `done` as it goes.
#[allow(clippy::too_many_arguments)]
pub fn simulate_program_with_progress(
    source: &EffectSource,
    design: &TrialDesign,
    rule: &SuccessRule,
    benchmarks: &Benchmarks,
    n_sims: u64,
    seed: u64,
    done: &AtomicU64,
) -> Result<PosResult, PosError> {
    run_program(source, design, rule, benchmarks, n_sims, seed, Some(done))
}

const PROGRESS_EVERY: u64 = 4096;

#[allow(clippy::too_many_arguments)]
fn run_program(
    source: &EffectSource,
    design: &TrialDesign,
    rule: &SuccessRule,
    benchmarks: &Benchmarks,
    n_sims: u64,
    seed: u64,
    done: Option<&AtomicU64>,
) -> Result<PosResult, PosError> {
    design.validate()?;
    rule.validate()?;
    benchmarks.validate()?;
    source.validate()?;
    if n_sims == 0 {
        return Err(PosError::Design("at least one simulation is required".into()));
    }
    let critical = std_normal_quantile(1.0 - rule.alpha);
    let n_doses = design.doses.len();
    let n_tests = design.n_trials as usize * n_doses * 2;

    let tally = sampling::fold_indexed(
        n_sims,
        BLOCK,
        || Tally {
            rejections: vec![0; n_tests],
            ..Default::default()
        },
        |acc: &mut Tally, i| {
            if let Some(d) = done {
                if (i + 1) % PROGRESS_EVERY == 0 {
                    d.fetch_add(PROGRESS_EVERY, Ordering::Relaxed);
                }
            }
            let mut effect_rng = sampling::substream(seed, i);
            let (reduction, fev1) = source.draw(i, &mut effect_rng);
            let max_ratio = design.doses.iter().map(|d| d.effect_ratio).fold(0.0, f64::max);
            if !(reduction * max_ratio < 1.0) || !fev1.is_finite() {
                acc.rejected += 1;
                return;
            }
            acc.accepted += 1;
            let mut trial_rng = sampling::substream(seed, TRIAL_STREAM | i);
            let (mut all_sig, mut all_tpp) = (true, true);
            for t in 0..design.n_trials as usize {
                let outcomes = simulate_trial(design, reduction, fev1, &mut trial_rng);
                for (d, o) in outcomes.iter().enumerate() {
                    let base = (t * n_doses + d) * 2;
                    acc.rejections[base] += u64::from(o.z_exacerbation > critical);
                    acc.rejections[base + 1] += u64::from(o.z_fev1 > critical);
                }
                let (sig, tpp) = judge_trial(&outcomes, rule, critical);
                all_sig &= sig;
                all_tpp &= tpp;
            }
            acc.trial_success += u64::from(all_sig);
            acc.joint_success += u64::from(all_sig && all_tpp);
        },
    );

    if let Some(d) = done {
        d.store(n_sims, Ordering::Relaxed);
    }
    if tally.rejected as f64 > MAX_REJECTED_FRACTION * n_sims as f64 || tally.accepted == 0 {
        return Err(PosError::TooManyRejected {
            rejected: tally.rejected,
            n_sims,
        });
    }
    let m = tally.accepted as f64;
    let p_trial = tally.trial_success as f64 / m;
    let p_joint = tally.joint_success as f64 / m;
    let se = |p: f64| (p * (1.0 - p) / m).sqrt();
    let mut rejection_rates = Vec::with_capacity(n_tests);
    for t in 0..design.n_trials as usize {
        for (d, dose) in design.doses.iter().enumerate() {
            for (k, endpoint) in ["exacerbation", "fev1"].iter().enumerate() {
                rejection_rates.push(TestRejection {
                    trial: t as u32 + 1,
                    dose: dose.label.clone(),
                    endpoint: endpoint.to_string(),
                    rate: tally.rejections[(t * n_doses + d) * 2 + k] as f64 / m,
                });
            }
        }
    }
    let pos = p_joint * benchmarks.approval_given_p3 * benchmarks.safety * benchmarks.risk_adjustment;
    Ok(PosResult {
        schema: RESULT_SCHEMA.into(),
        n_sims,
        seed,
        n_rejected: tally.rejected,
        p_trial_success: p_trial,
        se_trial_success: se(p_trial),
        p_tpp_met: p_joint,
        se_tpp_met: se(p_joint),
        pos,
        rejection_rates,
        benchmarks: benchmarks.clone(),
        rule: rule.clone(),
        decomposition: decompose(p_trial, p_joint, benchmarks),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "knob", content = "values", rename_all = "kebab-case")]
pub enum Knob {
    TppExacerbation(#[serde(with = "crate::decimal::vec")] Vec<f64>),
    TppFev1(#[serde(with = "crate::decimal::vec")] Vec<f64>),
    Alpha(#[serde(with = "crate::decimal::vec")] Vec<f64>),
    ArmSize(Vec<u32>),
    /// Concordance between the two effect columns of a copula source.
    Concordance(#[serde(with = "crate::decimal::vec")] Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityRow {
    #[serde(with = "crate::decimal")]
    pub value: f64,
    pub result: PosResult,
}

/// Re-runs the simulation across knob values with the same seed, so the rows
/// share random numbers.
pub fn sensitivity(
    source: &EffectSource,
    design: &TrialDesign,
    rule: &SuccessRule,
    benchmarks: &Benchmarks,
    knob: &Knob,
    n_sims: u64,
    seed: u64,
) -> Result<Vec<SensitivityRow>, PosError> {
    let run = |s: &EffectSource, d: &TrialDesign, r: &SuccessRule, value: f64| {
        simulate_program(s, d, r, benchmarks, n_sims, seed).map(|result| SensitivityRow { value, result })
    };
    match knob {
        Knob::TppExacerbation(vs) => vs
            .iter()
            .map(|&v| {
                let mut r = rule.clone();
                r.tpp.exacerbation = Some(v);
                run(source, design, &r, v)
            })
            .collect(),
        Knob::TppFev1(vs) => vs
            .iter()
            .map(|&v| {
                let mut r = rule.clone();
                r.tpp.fev1 = Some(v);
                run(source, design, &r, v)
            })
            .collect(),
        Knob::Alpha(vs) => vs
            .iter()
            .map(|&v| {
                let mut r = rule.clone();
                r.alpha = v;
                run(source, design, &r, v)
            })
            .collect(),
        Knob::ArmSize(vs) => vs
            .iter()
            .map(|&v| {
                let mut d = design.clone();
                d.arm_size = v;
                run(source, &d, rule, v as f64)
            })
            .collect(),
        Knob::Concordance(vs) => {
            let EffectSource::Copula { model, exacerbation, fev1 } = source else {
                return Err(PosError::Source("the concordance knob needs a copula effect source".into()));
            };
            vs.iter()
                .map(|&v| {
                    let pair = ConcordanceJudgement::new(model.ids[*exacerbation].clone(), model.ids[*fev1].clone(), v);
                    let s = EffectSource::Copula {
                        model: model.with_overrides(&[pair])?,
                        exacerbation: *exacerbation,
                        fev1: *fev1,
                    };
                    run(&s, design, rule, v)
                })
                .collect()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn design(arm_size: u32) -> TrialDesign {
        TrialDesign::two_doses(
            arm_size,
            ExacerbationEndpoint {
                follow_up_years: 1.0,
                placebo_rate: 0.9,
                dispersion: 0.5,
            },
            Fev1Endpoint { residual_sd: 400.0 },
        )
    }

    fn outcome(reduction: f64, z_ex: f64, fev1: f64, z_fev1: f64) -> DoseOutcome {
        DoseOutcome {
            rate_ratio: 1.0 - reduction,
            z_exacerbation: z_ex,
            fev1_difference: fev1,
            z_fev1,
        }
    }

    #[test]
    fn best_dose_convention() {
        let rule = SuccessRule::default();
        let c = 1.96;
        // Best significant dose has the larger reduction but misses the FEV1 target.
        let o = [outcome(0.45, 3.0, 150.0, 3.0), outcome(0.50, 3.5, 110.0, 2.5)];
        assert_eq!(judge_trial(&o, &rule, c), (true, false));
        let any = SuccessRule {
            tpp_dose: TppDose::AnySignificant,
            ..rule.clone()
        };
        assert_eq!(judge_trial(&o, &any, c), (true, true));
        // Non-significant doses are never considered.
        let o = [outcome(0.45, 3.0, 150.0, 3.0), outcome(0.60, 1.0, 200.0, 2.5)];
        assert_eq!(judge_trial(&o, &rule, c), (true, true));
        let o = [outcome(0.45, 1.0, 150.0, 3.0)];
        assert_eq!(judge_trial(&o, &rule, c), (false, false));
    }

    #[test]
    fn exacerbation_only_ignores_fev1() {
        let rule = SuccessRule {
            endpoints: Endpoints::ExacerbationOnly,
            tpp: Tpp {
                exacerbation: Some(0.30),
                fev1: Some(120.0),
            },
            ..Default::default()
        };
        let o = [outcome(0.35, 3.0, -50.0, -1.0)];
        assert_eq!(judge_trial(&o, &rule, 1.96), (true, true));
    }

    #[test]
    fn validation() {
        assert!(design(1).validate().is_err());
        let mut d = design(100);
        d.exacerbation.dispersion = 0.0;
        assert!(d.validate().is_err());
        assert!(SuccessRule::significance_only(0.5).validate().is_err());
        let b = Benchmarks {
            safety: 0.0,
            ..Default::default()
        };
        assert!(b.validate().is_err());
    }

    #[test]
    fn design_requires_rate_and_dispersion() {
        let json = r#"{"doses":[{"label":"450mg"}],"arm_size":300,"exacerbation":{"follow_up_years":"1"},"fev1":{"residual_sd":"400"}}"#;
        assert!(serde_json::from_str::<TrialDesign>(json).is_err());
        let json = r#"{"doses":[{"label":"450mg"}],"arm_size":300,"exacerbation":{"follow_up_years":1,"placebo_rate":0.9,"dispersion":0.5},"fev1":{"residual_sd":400}}"#;
        let d: TrialDesign = serde_json::from_str(json).unwrap();
        assert_eq!(d.n_trials, 2);
        assert_eq!(d.schema, DESIGN_SCHEMA);
        d.validate().unwrap();
    }

    #[test]
    fn overrides() {
        let mut r = SuccessRule::default();
        r.apply_override("tpp.exacerbation=0.3").unwrap();
        r.apply_override("endpoints=exacerbation-only").unwrap();
        r.apply_override("tpp.fev1=none").unwrap();
        assert_eq!(r.tpp.exacerbation, Some(0.3));
        assert_eq!(r.tpp.fev1, None);
        assert_eq!(r.endpoints, Endpoints::ExacerbationOnly);
        assert!(r.apply_override("alpha=0.7").is_err());
        assert!(r.apply_override("colour=red").is_err());
    }

    #[test]
    fn decomposition_identity() {
        let b = Benchmarks {
            safety: 0.9,
            risk_adjustment: 0.8,
            ..Default::default()
        };
        let d = decompose(0.37, 0.21, &b);
        assert!((d.product - 0.21 * 0.94 * 0.9 * 0.8).abs() < 1e-12);
        let d = decompose(0.0, 0.0, &b);
        assert_eq!(d.product, 0.0);
    }

    #[test]
    fn rejected_effects_fail_the_run() {
        let s = EffectSource::Samples {
            reduction: vec![0.3, 1.2],
            fev1: vec![100.0, 100.0],
        };
        let err = simulate_program(&s, &design(50), &SuccessRule::default(), &Benchmarks::default(), 100, 1);
        assert!(matches!(err, Err(PosError::TooManyRejected { rejected: 50, .. })));
    }

    #[test]
    fn zero_events_handled() {
        let mut d = design(5);
        d.exacerbation.placebo_rate = 1e-6;
        let r = simulate_program(&EffectSource::point_mass(0.5, 0.0), &d, &SuccessRule::default(), &Benchmarks::default(), 500, 3).unwrap();
        assert!(r.pos.is_finite());
    }
}
