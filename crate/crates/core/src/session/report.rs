//! Meeting report: judgement tables, fitted parameters, notes and the data
//! behind the figures, as JSON and as plain text.

use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{PosRecord, Result, Session, SessionError};
use crate::copula::ConcordanceJudgement;
use crate::distfit::{Fit, FittedDistribution};
use crate::elicitation::{reveal_summary, ConsensusEntry, JudgementSet, RankedFit, RevealSummary, Stage};
use crate::extension::{ConditioningSchedule, MarginalSummary};

pub const REPORT_SCHEMA: &str = "elicit.report/1";

/// Quantiles tabulated for every consensus distribution.
const REPORT_QUANTILES: [f64; 5] = [0.05, 0.25, 0.5, 0.75, 0.95];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndividualRow {
    pub expert: String,
    pub judgement: JudgementSet,
    pub fit: Fit,
    pub ranking: Vec<RankedFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusSection {
    #[serde(flatten)]
    pub entry: ConsensusEntry,
    #[serde(with = "crate::decimal::pairs")]
    pub quantiles: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QoiSection {
    pub id: String,
    pub label: String,
    pub definition: String,
    pub stage: Stage,
    pub individual: Vec<IndividualRow>,
    pub group: Option<JudgementSet>,
    pub group_fits: Vec<Fit>,
    pub consensus: Option<ConsensusSection>,
    /// Discussion notes; empty when none were taken.
    pub notes: Vec<String>,
    /// Curves for the reveal overlay.
    pub reveal: Option<RevealSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtensionSection {
    pub x_qoi: String,
    pub y_label: String,
    pub schedule: ConditioningSchedule,
    pub anchor: FittedDistribution,
    #[serde(with = "crate::decimal::pairs")]
    pub medians: Vec<(f64, f64)>,
    pub marginal: Option<MarginalSummary>,
    pub implied: Option<Fit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CopulaSection {
    pub ids: Vec<String>,
    pub judgements: Vec<ConcordanceJudgement>,
    #[serde(with = "crate::decimal::matrix")]
    pub correlation: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub session_id: String,
    pub title: String,
    pub experts: Vec<String>,
    pub created_at: String,
    pub updated_at: String,
    pub events: usize,
    pub state_hash: String,
    pub qois: Vec<QoiSection>,
    pub extensions: Vec<ExtensionSection>,
    pub copula: Option<CopulaSection>,
    pub pos_runs: Vec<PosRecord>,
}

impl Report {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "ELICITATION MEETING REPORT");
        let _ = writeln!(s, "{}", self.title);
        let _ = writeln!(s, "Session {} ({} events, state {})", self.session_id, self.events, &self.state_hash[..12]);
        let _ = writeln!(s, "Opened {}, last change {}", self.created_at, self.updated_at);
        let _ = writeln!(s, "Experts: {}", self.experts.join(", "));
        for q in &self.qois {
            let _ = writeln!(s, "\n== {} ({}) ==", q.label, q.id);
            if !q.definition.is_empty() {
                let _ = writeln!(s, "Definition: {}", q.definition);
            }
            let _ = writeln!(s, "Stage: {}", q.stage);
            let _ = writeln!(s, "\nIndividual judgements");
            if q.individual.is_empty() {
                let _ = writeln!(s, "  (none)");
            }
            for r in &q.individual {
                let _ = writeln!(s, "  {}: {}; fit {}", r.expert, judgement_text(&r.judgement), describe(&r.fit));
            }
            let _ = writeln!(s, "\nGroup judgements");
            match &q.group {
                Some(g) => {
                    let _ = writeln!(s, "  {}", judgement_text(g));
                    for f in &q.group_fits {
                        let _ = writeln!(s, "    candidate {}", describe(f));
                    }
                }
                None => {
                    let _ = writeln!(s, "  (none)");
                }
            }
            let _ = writeln!(s, "\nConsensus distribution");
            match &q.consensus {
                Some(c) => {
                    let chosen = match c.entry.facilitator_choice {
                        Some(f) => format!("family chosen by facilitator: {f}"),
                        None => "best-ranked family".to_string(),
                    };
                    let _ = writeln!(s, "  {} ({chosen})", describe(&c.entry.fit));
                    let qs: Vec<String> = c.quantiles.iter().map(|(p, x)| format!("q{:.0}={x:.4}", p * 100.0)).collect();
                    let _ = writeln!(s, "  {}", qs.join("  "));
                }
                None => {
                    let _ = writeln!(s, "  (not agreed)");
                }
            }
            let _ = writeln!(s, "\nDiscussion notes");
            if q.notes.is_empty() {
                let _ = writeln!(s, "  (none)");
            }
            for n in &q.notes {
                let _ = writeln!(s, "  - {n}");
            }
        }
        for e in &self.extensions {
            let _ = writeln!(s, "\n== Extension: {} given {} ==", e.x_qoi, e.y_label);
            let _ = writeln!(s, "Anchor at {} = {}: {}", e.y_label, e.schedule.median_point(), dist_text(&e.anchor));
            for (y, m) in &e.medians {
                let _ = writeln!(s, "  median of {} given {} = {y}: {m}", e.x_qoi, e.y_label);
            }
            if let Some(m) = &e.marginal {
                let _ = write!(s, "{}", m.to_text());
            }
            if let Some(f) = &e.implied {
                let _ = writeln!(s, "  implied marginal: {}", describe(f));
            }
        }
        if let Some(c) = &self.copula {
            let _ = writeln!(s, "\n== Dependence ==");
            for j in &c.judgements {
                let _ = writeln!(s, "  P(concordance {}, {}) = {}", j.pair.0, j.pair.1, j.probability);
            }
            for (i, row) in c.correlation.iter().enumerate() {
                let cells: Vec<String> = row.iter().map(|r| format!("{r:8.4}")).collect();
                let _ = writeln!(s, "  {:>16} {}", c.ids[i], cells.join(" "));
            }
        }
        for run in &self.pos_runs {
            let _ = writeln!(s, "\n== PoS run (event {}) ==", run.seq);
            let _ = write!(s, "{}", run.result.to_text());
        }
        s
    }
}

fn dist_text(d: &FittedDistribution) -> String {
    let name = match d.family().name() {
        "student-t" => "Student-t".to_string(),
        n => {
            let mut c = n.chars();
            c.next().map(|f| f.to_ascii_uppercase().to_string() + c.as_str()).unwrap_or_default()
        }
    };
    let params: Vec<String> = d.params().iter().map(|p| format!("{p:.2}")).collect();
    format!("{name}({}) on {}", params.join(", "), d.support())
}

fn describe(f: &Fit) -> String {
    format!("{} [residual {:.2e}]", dist_text(&f.distribution), f.residual)
}

fn judgement_text(j: &JudgementSet) -> String {
    let mut parts = vec![format!("range [{}, {}]", j.plausible_range.0, j.plausible_range.1)];
    if let Some(m) = j.median {
        parts.push(format!("median {m}"));
    }
    if let Some((a, b)) = j.tertiles {
        parts.push(format!("tertiles {a}, {b}"));
    }
    if let Some((a, b)) = j.quartiles {
        parts.push(format!("quartiles {a}, {b}"));
    }
    if let Some(st) = &j.probability_statements {
        for c in st {
            parts.push(format!("P(X < {}) = {}", c.value, c.cum_prob));
        }
    }
    parts.join(", ")
}

/// Builds the report. Needs at least one agreed consensus distribution.
pub fn export_report(session: &Session) -> Result<Report> {
    let st = session.state();
    if !st.records.values().any(|r| r.consensus.is_some()) {
        return Err(SessionError::Validation("the report needs at least one consensus distribution".into()));
    }
    let mut qois = Vec::new();
    for q in &st.qois {
        let r = &st.records[&q.id];
        let consensus = r.consensus.as_ref().map(|c| ConsensusSection {
            entry: c.clone(),
            quantiles: REPORT_QUANTILES
                .iter()
                .filter_map(|&p| c.fit.distribution.quantile(p).ok().map(|x| (p, x)))
                .collect(),
        });
        qois.push(QoiSection {
            id: q.id.clone(),
            label: q.label.clone(),
            definition: q.definition.clone(),
            stage: r.stage,
            individual: r
                .individual
                .iter()
                .map(|(e, x)| IndividualRow {
                    expert: e.clone(),
                    judgement: x.judgement.clone(),
                    fit: x.fit.clone(),
                    ranking: x.ranking.clone(),
                })
                .collect(),
            group: r.group.clone(),
            group_fits: r.group_fits.clone(),
            consensus,
            notes: r.notes.clone(),
            reveal: reveal_summary(r).ok(),
        });
    }
    let extensions = st
        .extensions
        .iter()
        .map(|(id, e)| ExtensionSection {
            x_qoi: id.clone(),
            y_label: e.config.y_label.clone(),
            schedule: e.schedule.clone(),
            anchor: e.anchor.clone(),
            medians: e.medians.clone(),
            marginal: e.committed.as_ref().map(|c| c.summary.clone()),
            implied: e.committed.as_ref().and_then(|c| c.implied.clone()),
        })
        .collect();
    Ok(Report {
        schema: REPORT_SCHEMA.into(),
        session_id: session.id().into(),
        title: st.title.clone(),
        experts: st.experts.clone(),
        created_at: st.created_at.clone(),
        updated_at: st.updated_at.clone(),
        events: session.events().len(),
        state_hash: session.state_hash(),
        qois,
        extensions,
        copula: st.copula.as_ref().map(|c| CopulaSection {
            ids: c.ids.clone(),
            judgements: c.judgements.clone(),
            correlation: c.correlation.clone(),
        }),
        pos_runs: st.pos_runs.clone(),
    })
}
