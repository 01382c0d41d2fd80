//! Workshop sessions as an append-only event log.
//!
//! Every mutation is an [`Event`]; the derived [`SessionState`] is a fold over
//! the log, recomputed on load, so replaying a session file reproduces every
//! fitted parameter and its state hash. Numbers in the session file are decimal
//! strings so the hash is stable across platforms.

mod report;
mod service;
mod store;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::copula::{self, ConcordanceJudgement, CopulaError, CopulaModel};
use crate::distfit::{Family, Fit, FittedDistribution};
use crate::elicitation::{Assessor, ElicitationError, ElicitationRecord, JudgementSet, QuantityOfInterest, Stage};
use crate::extension::{
    schedule_from_marginal, ConditionalModel, ConditioningSchedule, ExtensionError, Extrapolation, MarginalSummary,
    MedianKind, SpreadRule, Transform, YMarginal,
};
use crate::pos::{Benchmarks, PosError, PosResult, SuccessRule, TrialDesign};

pub use report::{export_report, Report};
pub use service::*;
pub use store::{SessionLock, SessionStore, DATA_DIR_ENV};

pub const SESSION_SCHEMA: &str = "elicit.session/1";

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SessionError {
    #[error("session {0} not found")]
    NotFound(String),
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Elicitation(#[from] ElicitationError),
    #[error(transparent)]
    Extension(#[from] ExtensionError),
    #[error(transparent)]
    Copula(#[from] CopulaError),
    #[error(transparent)]
    Pos(#[from] PosError),
    #[error("session {0} is locked by another writer")]
    Locked(String),
    #[error("client token {0} was already used for a different event")]
    TokenConflict(String),
    #[error("session file is corrupt: {0}")]
    Corrupt(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl SessionError {
    /// Stable machine-readable code for error envelopes.
    pub fn code(&self) -> &'static str {
        match self {
            SessionError::NotFound(_) => "not_found",
            SessionError::Validation(_) => "validation",
            SessionError::Elicitation(ElicitationError::Stage { .. }) => "stage_violation",
            SessionError::Elicitation(ElicitationError::Fit { .. }) => "fit_failure",
            SessionError::Elicitation(_) => "validation",
            SessionError::Extension(ExtensionError::Schedule(_)) => "schedule_error",
            SessionError::Extension(ExtensionError::Transform(_)) => "transform_error",
            SessionError::Extension(_) => "extension_error",
            SessionError::Copula(CopulaError::NotPositiveDefinite(_)) => "not_positive_definite",
            SessionError::Copula(_) => "copula_error",
            SessionError::Pos(PosError::TooManyRejected { .. }) => "effects_out_of_domain",
            SessionError::Pos(_) => "invalid_pos_config",
            SessionError::Locked(_) => "locked",
            SessionError::TokenConflict(_) => "token_conflict",
            SessionError::Corrupt(_) => "corrupt_session",
            SessionError::Io(_) => "io_error",
        }
    }

    /// Structured context for error envelopes.
    pub fn details(&self) -> serde_json::Value {
        match self {
            SessionError::Elicitation(ElicitationError::Stage { qoi, current, attempted }) => {
                json!({"qoi": qoi, "current_stage": current, "attempted": attempted})
            }
            SessionError::Elicitation(ElicitationError::Fit { qoi, assessor, source }) => {
                json!({"qoi": qoi, "assessor": assessor, "cause": source.to_string()})
            }
            SessionError::Copula(CopulaError::NotPositiveDefinite(d)) => serde_json::to_value(d).unwrap_or_default(),
            SessionError::Pos(PosError::TooManyRejected { rejected, n_sims }) => {
                json!({"rejected": rejected, "n_sims": n_sims})
            }
            SessionError::NotFound(id) | SessionError::Locked(id) => json!({"session": id}),
            _ => json!({}),
        }
    }
}

impl From<std::io::Error> for SessionError {
    fn from(e: std::io::Error) -> Self {
        SessionError::Io(e.to_string())
    }
}

pub type Result<T, E = SessionError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtensionConfig {
    /// Quantity elicited through the extension method.
    pub x_qoi: String,
    /// Label of the conditioning quantity.
    pub y_label: String,
    pub y_marginal: YMarginal,
    #[serde(with = "crate::decimal::vec")]
    pub quantiles: Vec<f64>,
    #[serde(with = "crate::decimal")]
    pub rounding: f64,
    /// Defaults to log for quantities bounded below at zero.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transform: Option<Transform>,
    #[serde(default = "default_kind")]
    pub kind: MedianKind,
    #[serde(default)]
    pub spread_rule: SpreadRule,
    #[serde(default)]
    pub extrapolation: Extrapolation,
}

fn default_kind() -> MedianKind {
    MedianKind::PiecewiseLinear
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosRequest {
    pub design: TrialDesign,
    pub rule: SuccessRule,
    #[serde(default)]
    pub benchmarks: Benchmarks,
    pub n_sims: u64,
    pub seed: u64,
    /// Copula quantity holding the exacerbation reduction; defaults to the first.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exacerbation_qoi: Option<String>,
    /// Copula quantity holding the FEV1 difference; defaults to the second.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fev1_qoi: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
#[allow(clippy::large_enum_variant)]
pub enum Event {
    SessionCreated {
        title: String,
        experts: Vec<String>,
    },
    QoiDefined {
        qoi: QuantityOfInterest,
    },
    /// Individual judgement for an expert, group judgement for RIO.
    JudgementSubmitted {
        judgement: JudgementSet,
    },
    Revealed {
        qoi: String,
    },
    NoteAdded {
        qoi: String,
        text: String,
    },
    ConsensusFitted {
        qoi: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        family: Option<Family>,
    },
    StageOverridden {
        qoi: String,
        stage: Stage,
        reason: String,
    },
    ExtensionConfigured {
        config: ExtensionConfig,
    },
    ConditionalMedianElicited {
        x_qoi: String,
        #[serde(with = "crate::decimal")]
        y: f64,
        #[serde(with = "crate::decimal")]
        median: f64,
    },
    ExtensionCommitted {
        x_qoi: String,
        n: usize,
        seed: u64,
    },
    CopulaCommitted {
        qois: Vec<String>,
        judgements: Vec<ConcordanceJudgement>,
    },
    PosRecorded {
        request: PosRequest,
        result: PosResult,
    },
}

impl Event {
    pub fn kind(&self) -> &'static str {
        match self {
            Event::SessionCreated { .. } => "session-created",
            Event::QoiDefined { .. } => "qoi-defined",
            Event::JudgementSubmitted { .. } => "judgement-submitted",
            Event::Revealed { .. } => "revealed",
            Event::NoteAdded { .. } => "note-added",
            Event::ConsensusFitted { .. } => "consensus-fitted",
            Event::StageOverridden { .. } => "stage-overridden",
            Event::ExtensionConfigured { .. } => "extension-configured",
            Event::ConditionalMedianElicited { .. } => "conditional-median-elicited",
            Event::ExtensionCommitted { .. } => "extension-committed",
            Event::CopulaCommitted { .. } => "copula-committed",
            Event::PosRecorded { .. } => "pos-recorded",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventEnvelope {
    pub seq: u64,
    /// RFC 3339 timestamp.
    pub at: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_token: Option<String>,
    pub event: Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtensionCommit {
    pub n: usize,
    pub seed: u64,
    pub model: ConditionalModel,
    pub summary: MarginalSummary,
    /// Best parametric fit to the Monte Carlo marginal.
    pub implied: Option<Fit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtensionState {
    pub config: ExtensionConfig,
    pub schedule: ConditioningSchedule,
    /// Distribution of X at the median conditioning point.
    pub anchor: FittedDistribution,
    /// Elicited `(y, median)` pairs away from the anchor, sorted by y.
    #[serde(with = "crate::decimal::pairs")]
    pub medians: Vec<(f64, f64)>,
    pub committed: Option<ExtensionCommit>,
}

impl ExtensionState {
    /// Conditioning points still waiting for a median, in elicitation order.
    pub fn pending(&self) -> Vec<f64> {
        self.schedule
            .elicitation_order
            .iter()
            .filter(|&&i| i != self.schedule.median_index)
            .map(|&i| self.schedule.points[i])
            .filter(|y| !self.medians.iter().any(|m| m.0 == *y))
            .collect()
    }

    pub fn model(&self) -> Result<ConditionalModel> {
        let transform = self
            .config
            .transform
            .unwrap_or_else(|| Transform::default_for(&self.anchor.support()));
        let mut model = ConditionalModel::build(
            self.config.y_marginal.clone(),
            self.anchor.clone(),
            self.schedule.median_point(),
            &self.medians,
            transform,
            self.config.kind,
            self.config.spread_rule,
        )?;
        model.median_fn = model.median_fn.with_extrapolation(self.config.extrapolation);
        Ok(model.with_schedule(self.schedule.clone()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosRecord {
    pub seq: u64,
    pub request: PosRequest,
    pub result: PosResult,
}

/// Everything derived from the event log.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SessionState {
    pub title: String,
    pub experts: Vec<String>,
    pub created_at: String,
    pub updated_at: String,
    pub last_seq: u64,
    /// In definition order.
    pub qois: Vec<QuantityOfInterest>,
    pub records: BTreeMap<String, ElicitationRecord>,
    pub extensions: BTreeMap<String, ExtensionState>,
    pub copula: Option<CopulaModel>,
    pub pos_runs: Vec<PosRecord>,
}

impl SessionState {
    pub fn qoi(&self, id: &str) -> Result<&QuantityOfInterest> {
        self.qois
            .iter()
            .find(|q| q.id == id)
            .ok_or_else(|| SessionError::Validation(format!("unknown quantity of interest {id:?}")))
    }

    pub fn record(&self, id: &str) -> Result<&ElicitationRecord> {
        self.qoi(id)?;
        Ok(&self.records[id])
    }

    fn record_mut(&mut self, id: &str) -> Result<&mut ElicitationRecord> {
        self.qoi(id)?;
        Ok(self.records.get_mut(id).expect("record created with qoi"))
    }

    pub fn consensus(&self, id: &str) -> Result<&Fit> {
        self.record(id)?
            .consensus
            .as_ref()
            .map(|c| &c.fit)
            .ok_or_else(|| SessionError::Validation(format!("no consensus distribution for {id:?} yet")))
    }

    /// Marginal used downstream: the extension's implied fit when committed,
    /// else the consensus fit.
    pub fn marginal(&self, id: &str) -> Result<FittedDistribution> {
        if let Some(fit) = self
            .extensions
            .get(id)
            .and_then(|e| e.committed.as_ref())
            .and_then(|c| c.implied.as_ref())
        {
            return Ok(fit.distribution.clone());
        }
        Ok(self.consensus(id)?.distribution.clone())
    }

    /// Canonical JSON used for hashing.
    pub fn canonical_json(&self) -> String {
        serde_json::to_string(self).expect("state serializes")
    }

    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }

    fn apply(&mut self, env: &EventEnvelope) -> Result<()> {
        let first = env.seq == 1;
        match (&env.event, first) {
            (Event::SessionCreated { .. }, false) => {
                return Err(SessionError::Validation("a session can only be created once".into()));
            }
            (Event::SessionCreated { title, experts }, true) => {
                if experts.is_empty() {
                    return Err(SessionError::Validation("a session needs at least one expert".into()));
                }
                let mut sorted = experts.clone();
                sorted.sort();
                sorted.dedup();
                if sorted.len() != experts.len() || experts.iter().any(|e| e.is_empty() || e == "RIO") {
                    return Err(SessionError::Validation(format!("expert labels must be distinct and non-empty: {experts:?}")));
                }
                self.title = title.clone();
                self.experts = experts.clone();
                self.created_at = env.at.clone();
            }
            (_, true) => return Err(SessionError::Validation("the first event must create the session".into())),
            (Event::QoiDefined { qoi }, _) => {
                qoi.validate()?;
                if self.qois.iter().any(|q| q.id == qoi.id) {
                    return Err(SessionError::Validation(format!("quantity of interest {:?} already defined", qoi.id)));
                }
                self.records.insert(qoi.id.clone(), ElicitationRecord::new(qoi.id.clone()));
                self.qois.push(qoi.clone());
            }
            (Event::JudgementSubmitted { judgement }, _) => {
                let qoi = self.qoi(&judgement.qoi)?.clone();
                if let Assessor::Expert(label) = &judgement.expert {
                    if !self.experts.contains(label) {
                        return Err(SessionError::Validation(format!("unknown expert {label:?}")));
                    }
                }
                let rec = self.record_mut(&qoi.id)?;
                match judgement.expert {
                    Assessor::Rio => {
                        rec.submit_group(&qoi, judgement.clone())?;
                    }
                    Assessor::Expert(_) => {
                        rec.submit_individual(&qoi, judgement.clone())?;
                    }
                }
            }
            (Event::Revealed { qoi }, _) => {
                self.record_mut(qoi)?.reveal()?;
            }
            (Event::NoteAdded { qoi, text }, _) => {
                self.record_mut(qoi)?.notes.push(text.clone());
            }
            (Event::ConsensusFitted { qoi, family }, _) => {
                self.record_mut(qoi)?.fit_consensus(*family)?;
            }
            (Event::StageOverridden { qoi, stage, reason }, _) => {
                if reason.trim().is_empty() {
                    return Err(SessionError::Validation("a stage override needs a reason".into()));
                }
                let rec = self.record_mut(qoi)?;
                rec.override_stage(*stage);
                rec.notes.push(format!("stage override to {stage}: {reason}"));
            }
            (Event::ExtensionConfigured { config }, _) => {
                let anchor = self.consensus(&config.x_qoi)?.distribution.clone();
                let schedule = schedule_from_marginal(&config.y_marginal, &config.quantiles, config.rounding)?;
                let state = ExtensionState {
                    config: config.clone(),
                    schedule,
                    anchor,
                    medians: Vec::new(),
                    committed: None,
                };
                // Checks the transform against the anchor support up front.
                let transform = config.transform.unwrap_or_else(|| Transform::default_for(&state.anchor.support()));
                transform.apply(state.anchor.median())?;
                self.extensions.insert(config.x_qoi.clone(), state);
            }
            (Event::ConditionalMedianElicited { x_qoi, y, median }, _) => {
                let ext = self
                    .extensions
                    .get_mut(x_qoi)
                    .ok_or_else(|| SessionError::Validation(format!("no extension configured for {x_qoi:?}")))?;
                if !ext.schedule.points.contains(y) {
                    return Err(SessionError::Validation(format!(
                        "{y} is not a conditioning point; expected one of {:?}",
                        ext.schedule.points
                    )));
                }
                if *y == ext.schedule.median_point() {
                    return Err(SessionError::Validation(format!(
                        "{y} is the anchor point; its distribution is the consensus fit"
                    )));
                }
                if !ext.anchor.support().contains(*median) {
                    return Err(SessionError::Validation(format!("median {median} lies outside the support of {x_qoi}")));
                }
                ext.medians.retain(|m| m.0 != *y);
                ext.medians.push((*y, *median));
                ext.medians.sort_by(|a, b| a.0.total_cmp(&b.0));
                ext.committed = None;
            }
            (Event::ExtensionCommitted { x_qoi, n, seed }, _) => {
                let ext = self
                    .extensions
                    .get_mut(x_qoi)
                    .ok_or_else(|| SessionError::Validation(format!("no extension configured for {x_qoi:?}")))?;
                let pending = ext.pending();
                if !pending.is_empty() {
                    return Err(SessionError::Validation(format!("conditional medians still missing at {pending:?}")));
                }
                let model = ext.model()?;
                let sample = model.marginalize_x(*n, *seed)?;
                let implied = sample.implied_fits().ok().and_then(|f| f.into_iter().next());
                ext.committed = Some(ExtensionCommit {
                    n: *n,
                    seed: *seed,
                    model,
                    summary: sample.summary,
                    implied,
                });
            }
            (Event::CopulaCommitted { qois, judgements }, _) => {
                let marginals = qois.iter().map(|q| self.marginal(q)).collect::<Result<Vec<_>>>()?;
                self.copula = Some(copula::build(qois.clone(), marginals, judgements.clone())?);
            }
            (Event::PosRecorded { request, result }, _) => {
                if self.copula.is_none() {
                    return Err(SessionError::Validation("no joint distribution committed".into()));
                }
                if result.seed != request.seed || result.n_sims != request.n_sims {
                    return Err(SessionError::Validation("result does not belong to the request".into()));
                }
                self.pos_runs.push(PosRecord {
                    seq: env.seq,
                    request: request.clone(),
                    result: result.clone(),
                });
            }
        }
        self.last_seq = env.seq;
        self.updated_at = env.at.clone();
        Ok(())
    }
}

/// Stored session document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionFile {
    pub schema: String,
    pub id: String,
    pub events: Vec<EventEnvelope>,
    /// Hash of the derived state when the file was written.
    pub state_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    id: String,
    events: Vec<EventEnvelope>,
    state: SessionState,
}

/// What happened to an appended event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Appended {
    pub seq: u64,
    /// True when a retried client token matched an existing event.
    pub duplicate: bool,
}

impl Session {
    pub fn create(id: impl Into<String>, title: impl Into<String>, experts: Vec<String>, at: impl Into<String>) -> Result<Self> {
        let mut s = Session {
            id: id.into(),
            events: Vec::new(),
            state: SessionState::default(),
        };
        s.append(
            Event::SessionCreated {
                title: title.into(),
                experts,
            },
            at,
            None,
        )?;
        Ok(s)
    }

    /// Rebuilds the derived state from a log.
    pub fn replay(id: impl Into<String>, events: Vec<EventEnvelope>) -> Result<Self> {
        let mut state = SessionState::default();
        for (i, env) in events.iter().enumerate() {
            if env.seq != i as u64 + 1 {
                return Err(SessionError::Corrupt(format!("event {} has sequence number {}", i + 1, env.seq)));
            }
            state
                .apply(env)
                .map_err(|e| SessionError::Corrupt(format!("event {} ({}) does not replay: {e}", env.seq, env.event.kind())))?;
        }
        Ok(Session {
            id: id.into(),
            events,
            state,
        })
    }

    pub fn from_file(file: SessionFile) -> Result<Self> {
        if file.schema != SESSION_SCHEMA {
            return Err(SessionError::Corrupt(format!("unsupported schema {:?}", file.schema)));
        }
        let s = Session::replay(file.id, file.events)?;
        if s.state_hash() != file.state_hash {
            return Err(SessionError::Corrupt("derived state hash does not match the stored hash".into()));
        }
        Ok(s)
    }

    /// Reads and replays a session file outside any store.
    pub fn read(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => SessionError::NotFound(path.display().to_string()),
            _ => e.into(),
        })?;
        let file: SessionFile = serde_json::from_str(&text).map_err(|e| SessionError::Corrupt(e.to_string()))?;
        Session::from_file(file)
    }

    pub fn to_file(&self) -> SessionFile {
        SessionFile {
            schema: SESSION_SCHEMA.into(),
            id: self.id.clone(),
            events: self.events.clone(),
            state_hash: self.state_hash(),
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn events(&self) -> &[EventEnvelope] {
        &self.events
    }

    pub fn state(&self) -> &SessionState {
        &self.state
    }

    pub fn state_hash(&self) -> String {
        self.state.hash()
    }

    /// Validates `event` against the current state and appends it. A retried
    /// `client_token` returns the original sequence number without appending.
    pub fn append(&mut self, event: Event, at: impl Into<String>, client_token: Option<String>) -> Result<Appended> {
        if let Some(token) = &client_token {
            if let Some(prev) = self.events.iter().find(|e| e.client_token.as_ref() == Some(token)) {
                if prev.event != event {
                    return Err(SessionError::TokenConflict(token.clone()));
                }
                return Ok(Appended {
                    seq: prev.seq,
                    duplicate: true,
                });
            }
        }
        let env = EventEnvelope {
            seq: self.events.len() as u64 + 1,
            at: at.into(),
            client_token,
            event,
        };
        let mut next = self.state.clone();
        next.apply(&env)?;
        self.state = next;
        let seq = env.seq;
        self.events.push(env);
        Ok(Appended { seq, duplicate: false })
    }
}

pub fn now() -> String {
    chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true)
}

/// Anonymized expert labels `A`, `B`, ...
pub fn expert_labels(n: usize) -> Vec<String> {
    (0..n)
        .map(|i| {
            let mut s = String::new();
            let mut k = i;
            loop {
                s.insert(0, (b'A' + (k % 26) as u8) as char);
                if k < 26 {
                    break;
                }
                k = k / 26 - 1;
            }
            s
        })
        .collect()
}
