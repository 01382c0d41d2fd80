//! A scripted workshop: five experts, the exacerbation reduction agreed through
//! group probability judgements, a synthetic FEV1 effect, extension and copula.

use elicit::distfit::{FittedDistribution, ProbabilityConstraint, Support};
use elicit::elicitation::{Assessor, JudgementSet, QuantityOfInterest, Scale};
use elicit::extension::{MedianKind, SpreadRule, YMarginal};
use elicit::session::{CreateSession, ExtensionConfig, Service, SessionStore};

pub const EXAC: &str = "exacerbation";
pub const FEV1: &str = "fev1";

pub fn service() -> (tempfile::TempDir, Service) {
    let dir = tempfile::tempdir().unwrap();
    let store = SessionStore::new(dir.path()).unwrap();
    (dir, Service::new(store))
}

pub fn exacerbation_qoi() -> QuantityOfInterest {
    QuantityOfInterest {
        id: EXAC.into(),
        label: "Reduction in exacerbation rate".into(),
        scale: Scale::PercentReduction,
        support: Support::bounded(0.0, 1.0).unwrap(),
        definition: "Relative reduction versus placebo at 52 weeks".into(),
    }
}

pub fn fev1_qoi() -> QuantityOfInterest {
    QuantityOfInterest {
        id: FEV1.into(),
        label: "FEV1 difference (mL)".into(),
        scale: Scale::Difference,
        support: Support::REAL_LINE,
        definition: String::new(),
    }
}

/// Individual tertile judgements, one per expert A to E.
pub fn individual(qoi: &str, expert: &str) -> JudgementSet {
    let a = Assessor::Expert(expert.into());
    let k = (expert.as_bytes()[0] - b'A') as f64;
    if qoi == EXAC {
        let m = 0.28 + 0.02 * k;
        JudgementSet::new(a, qoi, (0.0, 0.70)).with_median(m).with_tertiles(m - 0.06, m + 0.06)
    } else {
        let m = 50.0 + 5.0 * k;
        JudgementSet::new(a, qoi, (-100.0, 250.0)).with_median(m).with_tertiles(m - 20.0, m + 20.0)
    }
}

/// RIO's group judgements; the exacerbation statements are the workshop's.
pub fn group(qoi: &str) -> JudgementSet {
    if qoi == EXAC {
        JudgementSet::new(Assessor::Rio, qoi, (0.0, 0.70)).with_statements(vec![
            ProbabilityConstraint::new(0.25, 0.30),
            ProbabilityConstraint::new(0.35, 0.50),
            ProbabilityConstraint::new(0.40, 0.70),
        ])
    } else {
        JudgementSet::new(Assessor::Rio, qoi, (-100.0, 250.0)).with_median(60.0).with_quartiles(30.0, 90.0)
    }
}

pub fn extension_config() -> ExtensionConfig {
    ExtensionConfig {
        x_qoi: EXAC.into(),
        y_label: "sputum eosinophil reduction".into(),
        y_marginal: YMarginal::Fitted {
            distribution: FittedDistribution::normal(0.65, 0.08).unwrap(),
        },
        quantiles: vec![0.1, 0.25, 0.5, 0.75, 0.9],
        rounding: 0.05,
        transform: None,
        kind: MedianKind::PiecewiseLinear,
        spread_rule: SpreadRule::ConstantOnTransformedScale,
        extrapolation: Default::default(),
    }
}

pub const CONDITIONAL_MEDIANS: [(f64, f64); 4] = [(0.55, 0.24), (0.60, 0.30), (0.70, 0.36), (0.75, 0.40)];

/// Creates a session and walks both quantities to consensus.
pub fn consensus_session(svc: &Service) -> String {
    let s = svc
        .create_session(&CreateSession {
            title: "Phase 3 elicitation".into(),
            experts: None,
            n_experts: Some(5),
        })
        .unwrap();
    let id = s.id().to_string();
    for q in [exacerbation_qoi(), fev1_qoi()] {
        let qid = q.id.clone();
        svc.define_qoi(&id, q, None).unwrap();
        for e in ["A", "B", "C", "D", "E"] {
            svc.submit_judgement(&id, individual(&qid, e), None).unwrap();
        }
        svc.reveal(&id, &qid, None).unwrap();
        svc.submit_judgement(&id, group(&qid), None).unwrap();
    }
    svc.fit_consensus(&id, EXAC, Some(elicit::Family::Beta), None).unwrap();
    svc.fit_consensus(&id, FEV1, Some(elicit::Family::Normal), None).unwrap();
    id
}
