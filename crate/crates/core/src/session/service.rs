//! Workshop actions over a [`SessionStore`], shared by the HTTP server and the CLI.
//!
//! Mutating actions go through [`Service::append`]; previews only read.

use std::sync::atomic::AtomicU64;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{
    expert_labels, now, Appended, Event, ExtensionConfig, ExtensionState, PosRequest, Report, Result, Session,
    SessionError, SessionState, SessionStore,
};
use crate::copula::{self, ConcordanceJudgement, CopulaModel, Preview};
use crate::distfit::{Family, Fit};
use crate::elicitation::{fit_judgement, reveal_summary, JudgementSet, QuantityOfInterest, RevealSummary, Stage};
use crate::extension::{ConditionalModel, MarginalSummary};
use crate::pos::{self, EffectSource, Knob, PosResult, SensitivityRow};

pub const DEFAULT_EXTENSION_SAMPLES: usize = 100_000;

/// Conditional quantiles tabulated by the extension preview.
pub const FAN_PROBS: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];
const MEDIAN_CURVE_POINTS: usize = 101;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CreateSession {
    pub title: String,
    /// Explicit labels; otherwise `n_experts` letters starting at A.
    #[serde(default)]
    pub experts: Option<Vec<String>>,
    #[serde(default)]
    pub n_experts: Option<usize>,
}

impl CreateSession {
    pub fn labels(&self) -> Result<Vec<String>> {
        match (&self.experts, self.n_experts) {
            (Some(e), _) => Ok(e.clone()),
            (None, Some(n)) => Ok(expert_labels(n)),
            (None, None) => Err(SessionError::Validation("give expert labels or a number of experts".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FanRow {
    #[serde(with = "crate::decimal")]
    pub y: f64,
    pub extrapolated: bool,
    #[serde(with = "crate::decimal")]
    pub truncated_mass: f64,
    /// Pairs `(p, x)` over [`FAN_PROBS`].
    #[serde(with = "crate::decimal::pairs")]
    pub quantiles: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtensionPreview {
    pub model: ConditionalModel,
    pub summary: MarginalSummary,
    pub implied: Vec<Fit>,
    /// Conditional quantiles at each conditioning point.
    pub fan: Vec<FanRow>,
    /// `(y, m(y))` over the Y range, for plotting the median function.
    #[serde(with = "crate::decimal::pairs")]
    pub median_curve: Vec<(f64, f64)>,
}

#[derive(Debug)]
pub struct Service {
    store: SessionStore,
    // Serializes writers inside one process; the lock file guards across processes.
    writer: Mutex<()>,
}

impl Service {
    pub fn new(store: SessionStore) -> Self {
        Service {
            store,
            writer: Mutex::new(()),
        }
    }

    pub fn store(&self) -> &SessionStore {
        &self.store
    }

    pub fn create_session(&self, req: &CreateSession) -> Result<Session> {
        let _w = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        self.store.create(&req.title, req.labels()?)
    }

    pub fn session(&self, id: &str) -> Result<Session> {
        self.store.load(id)
    }

    pub fn list(&self) -> Result<Vec<String>> {
        self.store.list()
    }

    /// Appends one event and persists it before returning.
    pub fn append(&self, id: &str, event: Event, client_token: Option<String>) -> Result<(Appended, Session)> {
        let _w = self.writer.lock().unwrap_or_else(|e| e.into_inner());
        self.store.update(id, |s| {
            let a = s.append(event, now(), client_token)?;
            Ok((a, s.clone()))
        })
    }

    pub fn define_qoi(&self, id: &str, qoi: QuantityOfInterest, token: Option<String>) -> Result<(Appended, Session)> {
        self.append(id, Event::QoiDefined { qoi }, token)
    }

    pub fn submit_judgement(&self, id: &str, judgement: JudgementSet, token: Option<String>) -> Result<(Appended, Session)> {
        self.append(id, Event::JudgementSubmitted { judgement }, token)
    }

    pub fn reveal(&self, id: &str, qoi: &str, token: Option<String>) -> Result<(Appended, RevealSummary)> {
        let (a, s) = self.append(id, Event::Revealed { qoi: qoi.into() }, token)?;
        Ok((a, reveal_summary(s.state().record(qoi)?)?))
    }

    pub fn add_note(&self, id: &str, qoi: &str, text: &str, token: Option<String>) -> Result<(Appended, Session)> {
        self.append(
            id,
            Event::NoteAdded {
                qoi: qoi.into(),
                text: text.into(),
            },
            token,
        )
    }

    /// Ranked fits for a judgement that is not recorded (live refit).
    pub fn fit_preview(&self, id: &str, judgement: &JudgementSet) -> Result<Vec<Fit>> {
        let s = self.store.load(id)?;
        Ok(fit_judgement(s.state().qoi(&judgement.qoi)?, judgement)?)
    }

    pub fn fit_consensus(&self, id: &str, qoi: &str, family: Option<Family>, token: Option<String>) -> Result<(Appended, Session)> {
        self.append(
            id,
            Event::ConsensusFitted {
                qoi: qoi.into(),
                family,
            },
            token,
        )
    }

    pub fn override_stage(&self, id: &str, qoi: &str, stage: Stage, reason: &str, token: Option<String>) -> Result<(Appended, Session)> {
        self.append(
            id,
            Event::StageOverridden {
                qoi: qoi.into(),
                stage,
                reason: reason.into(),
            },
            token,
        )
    }

    pub fn configure_extension(&self, id: &str, config: ExtensionConfig, token: Option<String>) -> Result<(Appended, ExtensionState)> {
        let x = config.x_qoi.clone();
        let (a, s) = self.append(id, Event::ExtensionConfigured { config }, token)?;
        Ok((a, s.state().extensions[&x].clone()))
    }

    pub fn elicit_conditional_median(
        &self,
        id: &str,
        x_qoi: &str,
        y: f64,
        median: f64,
        token: Option<String>,
    ) -> Result<(Appended, ExtensionState)> {
        let (a, s) = self.append(
            id,
            Event::ConditionalMedianElicited {
                x_qoi: x_qoi.into(),
                y,
                median,
            },
            token,
        )?;
        Ok((a, s.state().extensions[x_qoi].clone()))
    }

    /// Monte Carlo preview of the extension model. `what_if` medians replace
    /// or add to the recorded ones without being stored.
    pub fn extension_preview(&self, id: &str, x_qoi: &str, what_if: &[(f64, f64)], n: usize, seed: u64) -> Result<ExtensionPreview> {
        let s = self.store.load(id)?;
        let mut ext = extension_state(s.state(), x_qoi)?.clone();
        for &(y, m) in what_if {
            ext.medians.retain(|p| p.0 != y);
            ext.medians.push((y, m));
        }
        ext.medians.sort_by(|a, b| a.0.total_cmp(&b.0));
        let model = ext.model()?;
        let sample = model.marginalize_x(n, seed)?;
        let mut fan = Vec::new();
        for &y in &ext.schedule.points {
            let c = model.conditional(y);
            let quantiles = FAN_PROBS
                .iter()
                .map(|&p| c.quantile(p).map(|x| (p, x)))
                .collect::<Result<Vec<_>, _>>()
                .map_err(crate::extension::ExtensionError::from)?;
            fan.push(FanRow {
                y,
                extrapolated: c.extrapolated,
                truncated_mass: c.truncated_mass(),
                quantiles,
            });
        }
        let (lo, hi) = curve_range(&ext)?;
        let median_curve = (0..MEDIAN_CURVE_POINTS)
            .map(|i| {
                let y = lo + (hi - lo) * i as f64 / (MEDIAN_CURVE_POINTS - 1) as f64;
                (y, model.median_fn.eval(y))
            })
            .collect();
        Ok(ExtensionPreview {
            implied: sample.implied_fits().unwrap_or_default(),
            summary: sample.summary,
            model,
            fan,
            median_curve,
        })
    }

    pub fn commit_extension(&self, id: &str, x_qoi: &str, n: usize, seed: u64, token: Option<String>) -> Result<(Appended, ExtensionState)> {
        let (a, s) = self.append(
            id,
            Event::ExtensionCommitted {
                x_qoi: x_qoi.into(),
                n,
                seed,
            },
            token,
        )?;
        Ok((a, s.state().extensions[x_qoi].clone()))
    }

    /// What-if joint sample of [`copula::PREVIEW_SAMPLES`] points; nothing is recorded.
    pub fn copula_explore(&self, id: &str, qois: &[String], judgements: &[ConcordanceJudgement]) -> Result<Preview> {
        self.copula_explore_sample(id, qois, judgements, copula::PREVIEW_SAMPLES, copula::PREVIEW_SEED)
    }

    pub fn copula_explore_sample(
        &self,
        id: &str,
        qois: &[String],
        judgements: &[ConcordanceJudgement],
        n: usize,
        seed: u64,
    ) -> Result<Preview> {
        let s = self.store.load(id)?;
        let model = copula_model(s.state(), qois, judgements)?;
        Ok(copula::explore_sample(&model, &[], n, seed)?)
    }

    pub fn commit_copula(
        &self,
        id: &str,
        qois: Vec<String>,
        judgements: Vec<ConcordanceJudgement>,
        token: Option<String>,
    ) -> Result<(Appended, CopulaModel)> {
        let (a, s) = self.append(id, Event::CopulaCommitted { qois, judgements }, token)?;
        Ok((a, s.state().copula.clone().expect("copula just committed")))
    }

    /// Runs the trial simulation and records the result. A retried client
    /// token returns the recorded result without simulating again.
    pub fn run_pos(&self, id: &str, request: PosRequest, token: Option<String>) -> Result<(Appended, PosResult)> {
        self.run_pos_with_progress(id, request, token, None)
    }

    /// [`Service::run_pos`] reporting finished simulations through `progress`.
    pub fn run_pos_with_progress(
        &self,
        id: &str,
        request: PosRequest,
        token: Option<String>,
        progress: Option<&AtomicU64>,
    ) -> Result<(Appended, PosResult)> {
        let s = self.store.load(id)?;
        if let Some(t) = &token {
            if let Some(prev) = s.events().iter().find(|e| e.client_token.as_ref() == Some(t)) {
                return match &prev.event {
                    Event::PosRecorded { request: r, result } if *r == request => Ok((
                        Appended {
                            seq: prev.seq,
                            duplicate: true,
                        },
                        result.clone(),
                    )),
                    _ => Err(SessionError::TokenConflict(t.clone())),
                };
            }
        }
        let result = simulate(s.state(), &request, progress)?;
        let (a, _) = self.append(
            id,
            Event::PosRecorded {
                request,
                result: result.clone(),
            },
            token,
        )?;
        Ok((a, result))
    }

    /// Re-runs the simulation over one knob; nothing is recorded.
    pub fn pos_sensitivity(&self, id: &str, request: &PosRequest, knob: &Knob) -> Result<Vec<SensitivityRow>> {
        sensitivity_on(self.store.load(id)?.state(), request, knob)
    }

    pub fn export(&self, id: &str) -> Result<Report> {
        super::export_report(&self.store.load(id)?)
    }
}

fn extension_state<'a>(st: &'a SessionState, x_qoi: &str) -> Result<&'a ExtensionState> {
    st.extensions
        .get(x_qoi)
        .ok_or_else(|| SessionError::Validation(format!("no extension configured for {x_qoi:?}")))
}

fn curve_range(ext: &ExtensionState) -> Result<(f64, f64)> {
    let y = &ext.config.y_marginal;
    let lo = y.quantile(0.005)?.min(ext.schedule.points[0]);
    let hi = y.quantile(0.995)?.max(*ext.schedule.points.last().expect("schedule is non-empty"));
    Ok((lo, hi))
}

/// Copula over `qois` using the session's marginals.
pub fn copula_model(st: &SessionState, qois: &[String], judgements: &[ConcordanceJudgement]) -> Result<CopulaModel> {
    let marginals = qois.iter().map(|q| st.marginal(q)).collect::<Result<Vec<_>>>()?;
    Ok(copula::build(qois.to_vec(), marginals, judgements.to_vec())?)
}

/// Joint effect distribution for a PoS run, from the committed copula.
pub fn effect_source(st: &SessionState, request: &PosRequest) -> Result<EffectSource> {
    let model = st
        .copula
        .clone()
        .ok_or_else(|| SessionError::Validation("no joint distribution committed".into()))?;
    let index = |name: &Option<String>, default: usize| -> Result<usize> {
        match name {
            Some(q) => model
                .ids
                .iter()
                .position(|i| i == q)
                .ok_or_else(|| SessionError::Validation(format!("{q:?} is not part of the joint distribution"))),
            None if default < model.ids.len() => Ok(default),
            None => Err(SessionError::Validation("the joint distribution needs two quantities".into())),
        }
    };
    let exacerbation = index(&request.exacerbation_qoi, 0)?;
    let fev1 = index(&request.fev1_qoi, 1)?;
    if exacerbation == fev1 {
        return Err(SessionError::Validation("the two endpoints need different quantities".into()));
    }
    Ok(EffectSource::Copula {
        model,
        exacerbation,
        fev1,
    })
}

/// Runs a PoS request against a session state without recording it.
pub fn simulate(st: &SessionState, request: &PosRequest, progress: Option<&AtomicU64>) -> Result<PosResult> {
    let source = effect_source(st, request)?;
    let r = &request;
    Ok(match progress {
        Some(p) => pos::simulate_program_with_progress(&source, &r.design, &r.rule, &r.benchmarks, r.n_sims, r.seed, p)?,
        None => pos::simulate_program(&source, &r.design, &r.rule, &r.benchmarks, r.n_sims, r.seed)?,
    })
}

/// Knob sweep against a session state; nothing is recorded.
pub fn sensitivity_on(st: &SessionState, request: &PosRequest, knob: &Knob) -> Result<Vec<SensitivityRow>> {
    let source = effect_source(st, request)?;
    let r = request;
    Ok(pos::sensitivity(&source, &r.design, &r.rule, &r.benchmarks, knob, r.n_sims, r.seed)?)
}
