//! Extension method: a conditional model for X given Y built from the
//! distribution of X at one conditioning point (the anchor) and elicited
//! conditional medians elsewhere, marginalized over Y by Monte Carlo.
//!
//! With transform `T`, the conditional law at `y` is the law of
//!
//! ```text
//! T^-1( T(m(y)) + k(y) * (T(X_anchor) - T(median(X_anchor))) )
//! ```
//!
//! where `k(y) = 1` for a constant spread on the transformed scale and
//! `k(y) = m(y) / m(anchor)` for a spread scaled with the median. Mass pushed
//! outside the X support is truncated and the remainder renormalized.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::Distribution;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distfit::{fit_best, DistError, Fit, FittedDistribution, MixtureDistribution, ProbabilityConstraint, Support};
use crate::sampling;

/// Truncated mass above which a conditional carries a warning.
pub const TRUNCATION_WARNING_MASS: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExtensionError {
    #[error("schedule error: {0}")]
    Schedule(String),
    #[error("transform error: {0}")]
    Transform(String),
    #[error("median function error: {0}")]
    MedianFunction(String),
    #[error("model error: {0}")]
    Model(String),
    #[error(transparent)]
    Dist(#[from] DistError),
}

// ---------------------------------------------------------------------------
// Y marginal
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Atom {
    #[serde(with = "crate::decimal")]
    pub value: f64,
    #[serde(with = "crate::decimal")]
    pub prob: f64,
}

/// Distribution of the conditioning quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum YMarginal {
    Fitted { distribution: FittedDistribution },
    Pool { mixture: MixtureDistribution },
    /// Finite distribution; used for discretized checks.
    Atoms { atoms: Vec<Atom> },
}

impl YMarginal {
    pub fn atoms(atoms: Vec<(f64, f64)>) -> Result<Self, ExtensionError> {
        if atoms.is_empty() {
            return Err(ExtensionError::Model("a discrete Y marginal needs at least one atom".into()));
        }
        let total: f64 = atoms.iter().map(|a| a.1).sum();
        if atoms.iter().any(|a| !(a.1 > 0.0) || !a.0.is_finite()) || (total - 1.0).abs() > 1e-9 {
            return Err(ExtensionError::Model(format!("atom probabilities must be positive and sum to 1, got {atoms:?}")));
        }
        let mut atoms: Vec<Atom> = atoms.into_iter().map(|(value, prob)| Atom { value, prob }).collect();
        atoms.sort_by(|a, b| a.value.total_cmp(&b.value));
        Ok(YMarginal::Atoms { atoms })
    }

    pub fn point_mass(y: f64) -> Self {
        YMarginal::Atoms {
            atoms: vec![Atom { value: y, prob: 1.0 }],
        }
    }

    pub fn quantile(&self, p: f64) -> Result<f64, ExtensionError> {
        if !(p > 0.0 && p < 1.0) {
            return Err(DistError::Domain(format!("quantile probability {p} outside (0, 1)")).into());
        }
        match self {
            YMarginal::Fitted { distribution } => Ok(distribution.quantile(p)?),
            YMarginal::Pool { mixture } => Ok(mixture.quantile(p)?),
            YMarginal::Atoms { atoms } => {
                let mut acc = 0.0;
                for a in atoms {
                    acc += a.prob;
                    if acc >= p {
                        return Ok(a.value);
                    }
                }
                Ok(atoms[atoms.len() - 1].value)
            }
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            YMarginal::Fitted { distribution } => distribution.draw(rng),
            YMarginal::Pool { mixture } => mixture.draw(rng),
            YMarginal::Atoms { atoms } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                for a in atoms {
                    acc += a.prob;
                    if u < acc {
                        return a.value;
                    }
                }
                atoms[atoms.len() - 1].value
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Conditioning schedule
// ---------------------------------------------------------------------------

/// Values of Y at which conditional judgements are elicited.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditioningSchedule {
    /// Strictly increasing.
    #[serde(with = "crate::decimal::vec")]
    pub points: Vec<f64>,
    /// Y-marginal probability each point came from.
    #[serde(with = "crate::decimal::vec")]
    pub probabilities: Vec<f64>,
    pub provenance: Vec<String>,
    /// Indices into `points` in the order they are put to the experts:
    /// the median point first, then the remaining points from the outside in.
    pub elicitation_order: Vec<usize>,
    pub median_index: usize,
}

impl ConditioningSchedule {
    pub fn median_point(&self) -> f64 {
        self.points[self.median_index]
    }

    pub fn ordered_points(&self) -> Vec<f64> {
        self.elicitation_order.iter().map(|&i| self.points[i]).collect()
    }
}

/// Takes quantiles of the Y marginal (the median is always included), rounds
/// them to multiples of `step` (no rounding when `step` is 0) and attaches the
/// elicitation order.
pub fn schedule_from_marginal(
    y: &YMarginal,
    quantiles: &[f64],
    step: f64,
) -> Result<ConditioningSchedule, ExtensionError> {
    if !(step >= 0.0 && step.is_finite()) {
        return Err(ExtensionError::Schedule(format!("rounding step {step} must be non-negative")));
    }
    let mut probs: Vec<f64> = quantiles.to_vec();
    if let Some(p) = probs.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(ExtensionError::Schedule(format!("quantile {p} outside (0, 1)")));
    }
    if !probs.contains(&0.5) {
        probs.push(0.5);
    }
    probs.sort_by(f64::total_cmp);
    probs.dedup();

    let mut points = Vec::with_capacity(probs.len());
    for &p in &probs {
        let q = y.quantile(p)?;
        let v = if step > 0.0 {
            let r = (q / step).round() * step;
            (r * 1e12).round() / 1e12
        } else {
            q
        };
        points.push(v);
    }
    for i in 1..points.len() {
        if !(points[i] > points[i - 1]) {
            return Err(ExtensionError::Schedule(format!(
                "quantiles {} and {} both map to {} after rounding to {step}",
                probs[i - 1], probs[i], points[i]
            )));
        }
    }
    let median_index = probs.iter().position(|&p| p == 0.5).expect("median inserted above");
    let mut rest: Vec<usize> = (0..probs.len()).filter(|&i| i != median_index).collect();
    rest.sort_by(|&a, &b| {
        let da = (probs[a] - 0.5).abs();
        let db = (probs[b] - 0.5).abs();
        db.total_cmp(&da).then(probs[a].total_cmp(&probs[b]))
    });
    let mut elicitation_order = vec![median_index];
    elicitation_order.extend(rest);

    Ok(ConditioningSchedule {
        provenance: probs.iter().map(|p| format!("q{:.0}", p * 100.0)).collect(),
        points,
        probabilities: probs,
        elicitation_order,
        median_index,
    })
}

// ---------------------------------------------------------------------------
// Median function
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Transform {
    Identity,
    Log,
    Logit,
}

impl Transform {
    pub fn apply(self, x: f64) -> Result<f64, ExtensionError> {
        let t = match self {
            Transform::Identity => x,
            Transform::Log => {
                if !(x > 0.0) {
                    return Err(ExtensionError::Transform(format!("log transform needs a positive value, got {x}")));
                }
                x.ln()
            }
            Transform::Logit => {
                if !(x > 0.0 && x < 1.0) {
                    return Err(ExtensionError::Transform(format!("logit transform needs a value in (0, 1), got {x}")));
                }
                (x / (1.0 - x)).ln()
            }
        };
        Ok(t)
    }

    /// Like [`Self::apply`] but maps boundary values to +-inf.
    fn apply_extended(self, x: f64) -> f64 {
        match self {
            Transform::Identity => x,
            Transform::Log => {
                if x <= 0.0 {
                    f64::NEG_INFINITY
                } else {
                    x.ln()
                }
            }
            Transform::Logit => {
                if x <= 0.0 {
                    f64::NEG_INFINITY
                } else if x >= 1.0 {
                    f64::INFINITY
                } else {
                    (x / (1.0 - x)).ln()
                }
            }
        }
    }

    pub fn inverse(self, t: f64) -> f64 {
        match self {
            Transform::Identity => t,
            Transform::Log => t.exp(),
            Transform::Logit => 1.0 / (1.0 + (-t).exp()),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Transform::Identity => 1.0,
            Transform::Log => 1.0 / x,
            Transform::Logit => 1.0 / (x * (1.0 - x)),
        }
    }

    fn inverse_derivative(self, t: f64) -> f64 {
        match self {
            Transform::Identity => 1.0,
            Transform::Log => t.exp(),
            Transform::Logit => {
                let s = 1.0 / (1.0 + (-t).exp());
                s * (1.0 - s)
            }
        }
    }

    /// Log for quantities bounded below at zero, identity otherwise.
    pub fn default_for(support: &Support) -> Transform {
        if support.lower == 0.0 {
            Transform::Log
        } else {
            Transform::Identity
        }
    }

    fn check_support(self, support: &Support) -> Result<(), ExtensionError> {
        let ok = match self {
            Transform::Identity => true,
            Transform::Log => support.lower >= 0.0,
            Transform::Logit => support.lower >= 0.0 && support.upper <= 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(ExtensionError::Transform(format!("{self:?} transform is not finite on support {support}")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum MedianKind {
    PiecewiseLinear,
    Polynomial { degree: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Extrapolation {
    /// Tangent line at the end knot.
    #[default]
    LinearContinuation,
    Clamp,
}

/// Median of X as a function of y, represented on the transformed scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MedianFunction {
    pub kind: MedianKind,
    pub transform: Transform,
    pub extrapolation: Extrapolation,
    /// Conditioning points, strictly increasing.
    #[serde(with = "crate::decimal::vec")]
    pub knots: Vec<f64>,
    /// Elicited medians on the X scale.
    #[serde(with = "crate::decimal::vec")]
    pub medians: Vec<f64>,
    /// Polynomial coefficients in powers of `(y - origin)`, constant term first.
    #[serde(with = "crate::decimal::vec", default)]
    pub coefficients: Vec<f64>,
    #[serde(with = "crate::decimal", default)]
    pub origin: f64,
}

/// Fits `m(y)` to elicited `(y, median_x)` points. Piecewise-linear fits
/// interpolate on the transformed scale; polynomial fits are least squares.
pub fn fit_median_function(
    points: &[(f64, f64)],
    transform: Transform,
    kind: MedianKind,
) -> Result<MedianFunction, ExtensionError> {
    build_median_function(points, None, transform, kind)
}

/// As [`fit_median_function`], with a polynomial constrained to pass through `anchor`.
pub fn fit_median_function_anchored(
    points: &[(f64, f64)],
    anchor: (f64, f64),
    transform: Transform,
    kind: MedianKind,
) -> Result<MedianFunction, ExtensionError> {
    let mut all = points.to_vec();
    match all.iter().find(|p| p.0 == anchor.0) {
        Some(p) if (p.1 - anchor.1).abs() > 1e-12 * anchor.1.abs().max(1.0) => {
            return Err(ExtensionError::MedianFunction(format!(
                "median {} at the anchor point {} disagrees with the anchor distribution median {}",
                p.1, anchor.0, anchor.1
            )));
        }
        Some(_) => all.retain(|p| p.0 != anchor.0),
        None => {}
    }
    all.push(anchor);
    build_median_function(&all, Some(anchor), transform, kind)
}

fn build_median_function(
    points: &[(f64, f64)],
    anchor: Option<(f64, f64)>,
    transform: Transform,
    kind: MedianKind,
) -> Result<MedianFunction, ExtensionError> {
    if points.len() < 2 {
        return Err(ExtensionError::MedianFunction(format!("need at least 2 points, got {}", points.len())));
    }
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    for w in pts.windows(2) {
        if !(w[1].0 > w[0].0) {
            return Err(ExtensionError::MedianFunction(format!("conditioning points must be distinct, {} repeats", w[0].0)));
        }
    }
    if pts.iter().any(|p| !p.0.is_finite() || !p.1.is_finite()) {
        return Err(ExtensionError::MedianFunction("points must be finite".into()));
    }
    let transformed: Vec<f64> = pts.iter().map(|p| transform.apply(p.1)).collect::<Result<_, _>>()?;
    let knots: Vec<f64> = pts.iter().map(|p| p.0).collect();

    let (coefficients, origin) = match kind {
        MedianKind::PiecewiseLinear => (Vec::new(), 0.0),
        MedianKind::Polynomial { degree } => {
            if degree == 0 || degree >= pts.len() {
                return Err(ExtensionError::MedianFunction(format!(
                    "polynomial degree {degree} needs between 1 and {} for {} points",
                    pts.len() - 1,
                    pts.len()
                )));
            }
            match anchor {
                Some((ay, ax)) => {
                    let at = transform.apply(ax)?;
                    let rows = pts.len();
                    let a = DMatrix::from_fn(rows, degree, |i, j| (knots[i] - ay).powi(j as i32 + 1));
                    let b = DVector::from_fn(rows, |i, _| transformed[i] - at);
                    let c = a
                        .svd(true, true)
                        .solve(&b, 1e-14)
                        .map_err(|e| ExtensionError::MedianFunction(e.to_string()))?;
                    let mut coef = vec![at];
                    coef.extend(c.iter());
                    (coef, ay)
                }
                None => {
                    let origin = knots.iter().sum::<f64>() / knots.len() as f64;
                    let a = DMatrix::from_fn(pts.len(), degree + 1, |i, j| (knots[i] - origin).powi(j as i32));
                    let b = DVector::from_vec(transformed.clone());
                    let c = a
                        .svd(true, true)
                        .solve(&b, 1e-14)
                        .map_err(|e| ExtensionError::MedianFunction(e.to_string()))?;
                    (c.iter().copied().collect(), origin)
                }
            }
        }
    };

    Ok(MedianFunction {
        kind,
        transform,
        extrapolation: Extrapolation::default(),
        knots,
        medians: pts.iter().map(|p| p.1).collect(),
        coefficients,
        origin,
    })
}

impl MedianFunction {
    pub fn with_extrapolation(mut self, e: Extrapolation) -> Self {
        self.extrapolation = e;
        self
    }

    pub fn y_range(&self) -> (f64, f64) {
        (self.knots[0], self.knots[self.knots.len() - 1])
    }

    pub fn is_extrapolated(&self, y: f64) -> bool {
        let (a, b) = self.y_range();
        y < a || y > b
    }

    fn poly(&self, y: f64) -> f64 {
        let d = y - self.origin;
        self.coefficients.iter().rev().fold(0.0, |acc, c| acc * d + c)
    }

    fn poly_slope(&self, y: f64) -> f64 {
        let d = y - self.origin;
        self.coefficients
            .iter()
            .enumerate()
            .skip(1)
            .rev()
            .fold(0.0, |acc, (k, c)| acc * d + k as f64 * c)
    }

    /// Median on the transformed scale.
    pub fn eval_transformed(&self, y: f64) -> f64 {
        let n = self.knots.len();
        let (a, b) = self.y_range();
        let t = |i: usize| self.transform.apply(self.medians[i]).expect("validated at fit");
        match self.kind {
            MedianKind::PiecewiseLinear => {
                if let Some(i) = self.knots.iter().position(|&k| k == y) {
                    return t(i);
                }
                let seg = if y < a {
                    if self.extrapolation == Extrapolation::Clamp {
                        return t(0);
                    }
                    0
                } else if y > b {
                    if self.extrapolation == Extrapolation::Clamp {
                        return t(n - 1);
                    }
                    n - 2
                } else {
                    self.knots.windows(2).position(|w| y >= w[0] && y <= w[1]).unwrap_or(n - 2)
                };
                let (y0, y1) = (self.knots[seg], self.knots[seg + 1]);
                let (t0, t1) = (t(seg), t(seg + 1));
                t0 + (t1 - t0) * (y - y0) / (y1 - y0)
            }
            MedianKind::Polynomial { .. } => {
                let edge = if y < a {
                    Some(a)
                } else if y > b {
                    Some(b)
                } else {
                    None
                };
                match (edge, self.extrapolation) {
                    (None, _) => self.poly(y),
                    (Some(e), Extrapolation::Clamp) => self.poly(e),
                    (Some(e), Extrapolation::LinearContinuation) => self.poly(e) + self.poly_slope(e) * (y - e),
                }
            }
        }
    }

    /// Median on the X scale.
    pub fn eval(&self, y: f64) -> f64 {
        self.transform.inverse(self.eval_transformed(y))
    }
}

// ---------------------------------------------------------------------------
// Conditional model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpreadRule {
    #[default]
    ConstantOnTransformedScale,
    ScaledWithMedian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionalModel {
    pub y_marginal: YMarginal,
    /// Distribution of X at `anchor_y`.
    pub anchor: FittedDistribution,
    #[serde(with = "crate::decimal")]
    pub anchor_y: f64,
    pub median_fn: MedianFunction,
    pub spread_rule: SpreadRule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub schedule: Option<ConditioningSchedule>,
}

impl ConditionalModel {
    /// Builds the model from elicited medians away from the anchor; the anchor
    /// knot `(anchor_y, median(anchor))` is inserted automatically.
    pub fn build(
        y_marginal: YMarginal,
        anchor: FittedDistribution,
        anchor_y: f64,
        elicited: &[(f64, f64)],
        transform: Transform,
        kind: MedianKind,
        spread_rule: SpreadRule,
    ) -> Result<Self, ExtensionError> {
        let median_fn = fit_median_function_anchored(elicited, (anchor_y, anchor.median()), transform, kind)?;
        Self::new(y_marginal, anchor, anchor_y, median_fn, spread_rule)
    }

    pub fn new(
        y_marginal: YMarginal,
        anchor: FittedDistribution,
        anchor_y: f64,
        median_fn: MedianFunction,
        spread_rule: SpreadRule,
    ) -> Result<Self, ExtensionError> {
        median_fn.transform.check_support(&anchor.support())?;
        let at_anchor = median_fn.eval(anchor_y);
        let med = anchor.median();
        if (at_anchor - med).abs() > 1e-9 * med.abs().max(1.0) {
            return Err(ExtensionError::Model(format!(
                "median function gives {at_anchor} at the anchor point {anchor_y}, anchor median is {med}"
            )));
        }
        if spread_rule == SpreadRule::ScaledWithMedian && med == 0.0 {
            return Err(ExtensionError::Model("spread cannot scale with a zero anchor median".into()));
        }
        Ok(ConditionalModel {
            y_marginal,
            anchor,
            anchor_y,
            median_fn,
            spread_rule,
            schedule: None,
        })
    }

    pub fn with_schedule(mut self, schedule: ConditioningSchedule) -> Self {
        self.schedule = Some(schedule);
        self
    }

    pub fn x_support(&self) -> Support {
        self.anchor.support()
    }

    /// Conditional distribution of X given `Y = y`.
    pub fn conditional(&self, y: f64) -> ConditionalDistribution<'_> {
        let transform = self.median_fn.transform;
        let support = self.x_support();
        let anchor_t = transform.apply_extended(self.median_fn.eval(self.anchor_y));
        // Capped so the conditional median stays inside the X support.
        let lo_t = transform.apply_extended(support.lower);
        let hi_t = transform.apply_extended(support.upper);
        let target_t = self.median_fn.eval_transformed(y).clamp(lo_t, hi_t);
        let spread = match self.spread_rule {
            SpreadRule::ConstantOnTransformedScale => 1.0,
            SpreadRule::ScaledWithMedian => {
                let k = transform.inverse(target_t) / transform.inverse(anchor_t);
                if k > 0.0 {
                    k
                } else {
                    f64::MIN_POSITIVE
                }
            }
        };
        let mut c = ConditionalDistribution {
            anchor: &self.anchor,
            transform,
            support,
            y,
            anchor_t,
            target_t,
            spread,
            lower_mass: 0.0,
            upper_mass: 0.0,
            extrapolated: self.median_fn.is_extrapolated(y),
        };
        c.set_shift(target_t);
        if c.truncated_mass() > 0.0 && target_t > lo_t && target_t < hi_t {
            c.recentre(target_t);
        }
        c
    }

    /// Draws `(y, x)` pairs and summarizes the X marginal.
    pub fn marginalize_x(&self, n: usize, seed: u64) -> Result<MarginalSample, ExtensionError> {
        if n == 0 {
            return Err(ExtensionError::Model("sample size must be at least 1".into()));
        }
        let draws = sampling::generate(n, seed, |rng| {
            let y = self.y_marginal.draw(rng);
            let c = self.conditional(y);
            let x = c.draw(rng);
            (x, c.extrapolated, c.truncation_warning(), c.truncated_mass())
        });
        let mut samples = Vec::with_capacity(n);
        let mut extrapolated = 0usize;
        let mut truncation_warnings = 0usize;
        let mut max_truncated_mass: f64 = 0.0;
        for (x, e, w, m) in draws {
            samples.push(x);
            extrapolated += usize::from(e);
            truncation_warnings += usize::from(w);
            max_truncated_mass = max_truncated_mass.max(m);
        }
        let summary = MarginalSummary::from_samples(&samples, seed, extrapolated, truncation_warnings, max_truncated_mass);
        Ok(MarginalSample {
            samples,
            summary,
            support: self.x_support(),
        })
    }
}

/// X given one value of Y; borrows the anchor from its model.
#[derive(Debug, Clone)]
pub struct ConditionalDistribution<'a> {
    anchor: &'a FittedDistribution,
    transform: Transform,
    support: Support,
    pub y: f64,
    anchor_t: f64,
    target_t: f64,
    spread: f64,
    lower_mass: f64,
    upper_mass: f64,
    pub extrapolated: bool,
}

impl ConditionalDistribution<'_> {
    /// Image of an anchor value.
    fn forward(&self, xa: f64) -> f64 {
        let t = self.transform.apply_extended(xa);
        self.transform.inverse(self.target_t + self.spread * (t - self.anchor_t))
    }

    /// Anchor value mapping to `x`.
    fn backward(&self, x: f64) -> f64 {
        let t = self.transform.apply_extended(x);
        self.transform.inverse(self.anchor_t + (t - self.target_t) / self.spread)
    }

    /// Untruncated conditional CDF at a bound of the X support.
    fn anchor_cdf_at(&self, bound: f64) -> f64 {
        if !bound.is_finite() {
            return if bound < 0.0 { 0.0 } else { 1.0 };
        }
        self.anchor.cdf(self.backward(bound))
    }

    fn set_shift(&mut self, target_t: f64) {
        self.target_t = target_t;
        self.lower_mass = self.anchor_cdf_at(self.support.lower);
        self.upper_mass = 1.0 - self.anchor_cdf_at(self.support.upper);
    }

    /// Moves the shift until the truncated, renormalized law has its median at
    /// `median_t`, so elicited medians hold exactly even near a support bound.
    fn recentre(&mut self, median_t: f64) {
        let m = self.transform.inverse(median_t);
        // Positive while the truncated median lies below m; decreasing in the shift.
        let h = |c: &mut Self, s: f64| {
            c.set_shift(s);
            2.0 * c.anchor.cdf(c.backward(m)) - 1.0 - c.lower_mass + c.upper_mass
        };
        let h0 = h(self, median_t);
        if h0 == 0.0 {
            return;
        }
        let dir = h0.signum();
        let (mut a, mut fa) = (median_t, h0);
        let mut step = 0.05 * self.spread.max(1e-3);
        let (mut b, mut fb) = (a + dir * step, h(self, a + dir * step));
        let mut tries = 0;
        while fb.signum() == dir && tries < 60 {
            a = b;
            fa = fb;
            step *= 2.0;
            b = a + dir * step;
            fb = h(self, b);
            tries += 1;
        }
        if fb.signum() == dir {
            self.set_shift(median_t);
            return;
        }
        // Illinois regula falsi.
        let mut side = 0;
        for _ in 0..200 {
            let s = (a * fb - b * fa) / (fb - fa);
            let fs = h(self, s);
            if fs == 0.0 || (b - a).abs() <= 1e-14 * s.abs().max(1.0) {
                a = s;
                b = s;
                break;
            }
            if fs.signum() == fb.signum() {
                b = s;
                fb = fs;
                if side == -1 {
                    fa *= 0.5;
                }
                side = -1;
            } else {
                a = s;
                fa = fs;
                if side == 1 {
                    fb *= 0.5;
                }
                side = 1;
            }
        }
        self.set_shift(0.5 * (a + b));
    }

    pub fn truncated_mass(&self) -> f64 {
        self.lower_mass + self.upper_mass
    }

    pub fn truncation_warning(&self) -> bool {
        self.truncated_mass() > TRUNCATION_WARNING_MASS
    }

    fn kept_mass(&self) -> f64 {
        1.0 - self.lower_mass - self.upper_mass
    }

    pub fn cdf(&self, x: f64) -> f64 {
        if x <= self.support.lower {
            return 0.0;
        }
        if x >= self.support.upper {
            return 1.0;
        }
        let raw = self.anchor.cdf(self.backward(x));
        ((raw - self.lower_mass) / self.kept_mass()).clamp(0.0, 1.0)
    }

    pub fn pdf(&self, x: f64) -> f64 {
        if !(x > self.support.lower && x < self.support.upper) {
            return 0.0;
        }
        let xa = self.backward(x);
        let inner = self.anchor_t + (self.transform.apply_extended(x) - self.target_t) / self.spread;
        let jac = self.transform.inverse_derivative(inner) * self.transform.derivative(x) / self.spread;
        self.anchor.pdf(xa) * jac / self.kept_mass()
    }

    pub fn quantile(&self, p: f64) -> Result<f64, DistError> {
        if !(p > 0.0 && p < 1.0) {
            return Err(DistError::Domain(format!("quantile probability {p} outside (0, 1)")));
        }
        let r = self.lower_mass + p * self.kept_mass();
        let xa = self.anchor.quantile(r.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON))?;
        Ok(self.forward(xa).clamp(self.support.lower, self.support.upper))
    }

    pub fn median(&self) -> f64 {
        self.quantile(0.5).expect("0.5 is a valid probability")
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.truncated_mass() == 0.0 {
            return self.forward(self.anchor.sampler().sample(rng));
        }
        let u: f64 = rng.random_range(self.lower_mass..(1.0 - self.upper_mass).max(self.lower_mass + f64::EPSILON));
        let xa = self
            .anchor
            .quantile(u.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON))
            .expect("clamped into (0, 1)");
        self.forward(xa).clamp(self.support.lower, self.support.upper)
    }
}

// ---------------------------------------------------------------------------
// Marginal summary
// ---------------------------------------------------------------------------

pub const REPORT_INTERVALS: [f64; 4] = [0.5, 0.8, 0.9, 0.95];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentralInterval {
    #[serde(with = "crate::decimal")]
    pub prob: f64,
    #[serde(with = "crate::decimal")]
    pub lower: f64,
    #[serde(with = "crate::decimal")]
    pub upper: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalSummary {
    pub n: usize,
    pub seed: u64,
    #[serde(with = "crate::decimal")]
    pub median: f64,
    #[serde(with = "crate::decimal")]
    pub mean: f64,
    pub intervals: Vec<CentralInterval>,
    /// Draws whose Y fell outside the conditioning points.
    pub extrapolated: usize,
    /// Draws whose conditional lost more than 1% of its mass to truncation.
    pub truncation_warnings: usize,
    #[serde(with = "crate::decimal")]
    pub max_truncated_mass: f64,
}

fn empirical_quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

impl MarginalSummary {
    fn from_samples(samples: &[f64], seed: u64, extrapolated: usize, truncation_warnings: usize, max_truncated_mass: f64) -> Self {
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let intervals = REPORT_INTERVALS
            .iter()
            .map(|&prob| CentralInterval {
                prob,
                lower: empirical_quantile(&sorted, 0.5 - prob / 2.0),
                upper: empirical_quantile(&sorted, 0.5 + prob / 2.0),
            })
            .collect();
        MarginalSummary {
            n: samples.len(),
            seed,
            median: empirical_quantile(&sorted, 0.5),
            mean: samples.iter().sum::<f64>() / samples.len() as f64,
            intervals,
            extrapolated,
            truncation_warnings,
            max_truncated_mass,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Monte Carlo marginal of X");
        let _ = writeln!(s, "  samples: {}  seed: {}", self.n, self.seed);
        let _ = writeln!(s, "  median:  {:.4}", self.median);
        let _ = writeln!(s, "  mean:    {:.4}", self.mean);
        for iv in &self.intervals {
            let _ = writeln!(s, "  {:>4.0}% interval: [{:.4}, {:.4}]", iv.prob * 100.0, iv.lower, iv.upper);
        }
        let _ = writeln!(s, "  extrapolated draws: {}", self.extrapolated);
        let _ = writeln!(
            s,
            "  truncation warnings: {} (max truncated mass {:.4})",
            self.truncation_warnings, self.max_truncated_mass
        );
        s
    }
}

#[derive(Debug, Clone)]
pub struct MarginalSample {
    pub samples: Vec<f64>,
    pub summary: MarginalSummary,
    pub support: Support,
}

/// Probabilities at which the implied distribution is matched to the sample.
pub const IMPLIED_FIT_PROBS: [f64; 7] = [0.05, 0.1, 0.25, 0.5, 0.75, 0.9, 0.95];

impl MarginalSample {
    /// Fits the supported families to empirical quantiles of the sample.
    pub fn implied_fits(&self) -> Result<Vec<Fit>, ExtensionError> {
        let mut sorted = self.samples.clone();
        sorted.sort_by(f64::total_cmp);
        let mut cs: Vec<ProbabilityConstraint> = Vec::new();
        for &p in &IMPLIED_FIT_PROBS {
            let v = empirical_quantile(&sorted, p);
            if cs.last().is_none_or(|c| v > c.value) {
                cs.push(ProbabilityConstraint::new(v, p));
            }
        }
        Ok(fit_best(self.support, &cs)?)
    }

    pub fn empirical_cdf(&self, x: f64) -> f64 {
        self.samples.iter().filter(|&&s| s <= x).count() as f64 / self.samples.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn anchor() -> FittedDistribution {
        FittedDistribution::beta(2.81, 3.05, 0.0, 0.70).unwrap()
    }

    #[test]
    fn log_midpoint() {
        let (a, b) = (0.2, 0.45);
        let m = fit_median_function(&[(0.5, a), (0.75, b)], Transform::Log, MedianKind::PiecewiseLinear).unwrap();
        let expect = ((a.ln() + b.ln()) / 2.0).exp();
        assert!((m.eval(0.625) - expect).abs() < 1e-15);
    }

    #[test]
    fn knots_are_exact() {
        let pts = [(0.5, 0.2), (0.6, 0.28), (0.65, 0.334), (0.7, 0.37), (0.75, 0.40)];
        let m = fit_median_function(&pts, Transform::Log, MedianKind::PiecewiseLinear).unwrap();
        for (y, x) in pts {
            assert_eq!(m.eval_transformed(y), x.ln());
        }
        assert!((m.eval(0.65) - 0.334).abs() < 1e-15);
    }

    #[test]
    fn nonpositive_median_under_log() {
        let err = fit_median_function(&[(0.5, 0.0), (0.7, 0.3)], Transform::Log, MedianKind::PiecewiseLinear).unwrap_err();
        assert!(matches!(err, ExtensionError::Transform(_)));
    }

    #[test]
    fn median_function_needs_distinct_points() {
        assert!(fit_median_function(&[(0.5, 0.1)], Transform::Identity, MedianKind::PiecewiseLinear).is_err());
        assert!(fit_median_function(&[(0.5, 0.1), (0.5, 0.2)], Transform::Identity, MedianKind::PiecewiseLinear).is_err());
        assert!(fit_median_function(&[(0.5, 0.1), (0.6, 0.2)], Transform::Identity, MedianKind::Polynomial { degree: 2 }).is_err());
    }

    #[test]
    fn linear_extrapolation_and_clamp() {
        let m = fit_median_function(&[(0.0, 1.0), (1.0, 2.0)], Transform::Identity, MedianKind::PiecewiseLinear).unwrap();
        assert!((m.eval(2.0) - 3.0).abs() < 1e-15);
        assert!(m.is_extrapolated(2.0));
        let c = m.with_extrapolation(Extrapolation::Clamp);
        assert_eq!(c.eval(2.0), 2.0);
        assert_eq!(c.eval(-1.0), 1.0);
    }

    #[test]
    fn polynomial_least_squares_recovers_quadratic() {
        let pts: Vec<_> = (0..6).map(|i| {
            let y = i as f64 * 0.1;
            (y, 1.0 + 2.0 * y - 3.0 * y * y)
        }).collect();
        let m = fit_median_function(&pts, Transform::Identity, MedianKind::Polynomial { degree: 2 }).unwrap();
        assert!((m.eval(0.33) - (1.0 + 0.66 - 3.0 * 0.33 * 0.33)).abs() < 1e-10);
    }

    #[test]
    fn anchored_polynomial_passes_through_anchor() {
        let pts = [(0.5, 0.2), (0.6, 0.31), (0.7, 0.33), (0.75, 0.45)];
        let m = fit_median_function_anchored(&pts, (0.65, 0.334), Transform::Log, MedianKind::Polynomial { degree: 2 }).unwrap();
        assert!((m.eval(0.65) - 0.334).abs() < 1e-14);
    }

    #[test]
    fn anchor_conflict_rejected() {
        let err = fit_median_function_anchored(&[(0.65, 0.3), (0.7, 0.4)], (0.65, 0.334), Transform::Log, MedianKind::PiecewiseLinear);
        assert!(err.is_err());
    }

    #[test]
    fn schedule_rounds_median() {
        let y = YMarginal::Fitted {
            distribution: FittedDistribution::normal(0.66, 0.08).unwrap(),
        };
        let s = schedule_from_marginal(&y, &[0.5], 0.05).unwrap();
        assert!((s.median_point() - 0.65).abs() < 1e-12);
        let raw = schedule_from_marginal(&y, &[0.25, 0.5], 0.0).unwrap();
        assert_eq!(raw.points[1], 0.66);
        assert_eq!(raw.points[0], y.quantile(0.25).unwrap());
    }

    #[test]
    fn schedule_collision() {
        let y = YMarginal::Fitted {
            distribution: FittedDistribution::normal(0.66, 0.01).unwrap(),
        };
        assert!(matches!(schedule_from_marginal(&y, &[0.4, 0.5], 0.05), Err(ExtensionError::Schedule(_))));
        assert!(schedule_from_marginal(&y, &[1.5], 0.05).is_err());
    }

    #[test]
    fn elicitation_order_median_then_outside_in() {
        let y = YMarginal::Fitted {
            distribution: FittedDistribution::normal(0.0, 1.0).unwrap(),
        };
        let s = schedule_from_marginal(&y, &[0.1, 0.25, 0.5, 0.75, 0.9], 0.0).unwrap();
        let probs: Vec<f64> = s.elicitation_order.iter().map(|&i| s.probabilities[i]).collect();
        assert_eq!(probs, vec![0.5, 0.1, 0.9, 0.25, 0.75]);
    }

    #[test]
    fn conditional_at_anchor_is_anchor() {
        let model = ConditionalModel::build(
            YMarginal::point_mass(0.65),
            anchor(),
            0.65,
            &[(0.5, 0.2), (0.75, 0.4)],
            Transform::Log,
            MedianKind::PiecewiseLinear,
            SpreadRule::ConstantOnTransformedScale,
        )
        .unwrap();
        let c = model.conditional(0.65);
        for i in 1..100 {
            let x = 0.7 * i as f64 / 100.0;
            assert!((c.cdf(x) - anchor().cdf(x)).abs() < 1e-9);
        }
        assert!(!c.extrapolated);
    }

    #[test]
    fn truncation_flagged_when_shift_leaves_support() {
        let model = ConditionalModel::build(
            YMarginal::point_mass(0.75),
            anchor(),
            0.65,
            &[(0.5, 0.2), (0.75, 0.5)],
            Transform::Log,
            MedianKind::PiecewiseLinear,
            SpreadRule::ConstantOnTransformedScale,
        )
        .unwrap();
        let c = model.conditional(0.75);
        assert!(c.truncation_warning(), "mass {}", c.truncated_mass());
        assert_eq!(c.cdf(0.70), 1.0);
        assert!(c.quantile(0.999).unwrap() <= 0.70);
        let s = model.marginalize_x(1000, 3).unwrap();
        assert_eq!(s.summary.truncation_warnings, 1000);
        assert!(s.samples.iter().all(|&x| (0.0..=0.70).contains(&x)));
    }

    #[test]
    fn scaled_spread_widens_with_median() {
        let build = |rule| {
            ConditionalModel::build(
                YMarginal::point_mass(0.65),
                FittedDistribution::normal(10.0, 2.0).unwrap(),
                0.65,
                &[(0.5, 5.0), (0.75, 20.0)],
                Transform::Identity,
                MedianKind::PiecewiseLinear,
                rule,
            )
            .unwrap()
        };
        let scaled = build(SpreadRule::ScaledWithMedian);
        let c = scaled.conditional(0.75);
        let width = c.quantile(0.75).unwrap() - c.quantile(0.25).unwrap();
        let anchor_width = 2.0 * 2.0 * 0.674_489_750_196_081_7;
        assert!((width - 2.0 * anchor_width).abs() < 1e-8);
        let constant = build(SpreadRule::ConstantOnTransformedScale);
        let c = constant.conditional(0.75);
        let width = c.quantile(0.75).unwrap() - c.quantile(0.25).unwrap();
        assert!((width - anchor_width).abs() < 1e-8);
    }

    #[test]
    fn zero_samples_rejected() {
        let model = ConditionalModel::build(
            YMarginal::point_mass(0.65),
            anchor(),
            0.65,
            &[(0.5, 0.2)],
            Transform::Log,
            MedianKind::PiecewiseLinear,
            SpreadRule::default(),
        )
        .unwrap();
        assert!(model.marginalize_x(0, 1).is_err());
    }

    #[test]
    fn summary_text_mentions_seed() {
        let model = ConditionalModel::build(
            YMarginal::point_mass(0.65),
            anchor(),
            0.65,
            &[(0.5, 0.2)],
            Transform::Log,
            MedianKind::PiecewiseLinear,
            SpreadRule::default(),
        )
        .unwrap();
        let s = model.marginalize_x(2000, 77).unwrap();
        assert!(s.summary.to_text().contains("seed: 77"));
        let json = serde_json::to_value(&s.summary).unwrap();
        assert_eq!(json["seed"], 77);
    }
}
