//! The HTTP surface driven in-process.

#[path = "../../core/tests/common/workshop.rs"]
#[allow(dead_code)]
mod workshop;

use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use elicit::copula::ConcordanceJudgement;
use elicit::pos::{ExacerbationEndpoint, Fev1Endpoint, TrialDesign};
use elicit::session::{Service, SessionStore};
use elicit_server::{router, AppState};
use workshop::*;

struct Api {
    _dir: tempfile::TempDir,
    app: Router,
}

struct Reply {
    status: StatusCode,
    headers: axum::http::HeaderMap,
    bytes: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.bytes)))
    }
}

impl Api {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let svc = Service::new(SessionStore::new(dir.path()).unwrap());
        Api {
            _dir: dir,
            app: router(AppState::new(svc)),
        }
    }

    async fn send(&self, req: Request<Body>) -> Reply {
        let res = self.app.clone().oneshot(req).await.unwrap();
        let status = res.status();
        let headers = res.headers().clone();
        let bytes = res.into_body().collect().await.unwrap().to_bytes().to_vec();
        Reply { status, headers, bytes }
    }

    async fn get(&self, path: &str) -> Reply {
        self.send(Request::get(path).body(Body::empty()).unwrap()).await
    }

    async fn post(&self, path: &str, body: Value) -> Reply {
        self.send(
            Request::post(path)
                .header(header::CONTENT_TYPE, "application/json")
                .body(Body::from(body.to_string()))
                .unwrap(),
        )
        .await
    }

    async fn ok(&self, path: &str, body: Value) -> Value {
        let r = self.post(path, body).await;
        assert!(r.status.is_success(), "{path}: {} {}", r.status, String::from_utf8_lossy(&r.bytes));
        r.json()
    }

    async fn event_count(&self, id: &str) -> usize {
        self.get(&format!("/v1/sessions/{id}/events")).await.json()["events"].as_array().unwrap().len()
    }

    /// Walks both quantities to consensus over HTTP.
    async fn consensus_session(&self) -> String {
        let s = self.ok("/v1/sessions", json!({"title": "Phase 3 elicitation", "n_experts": 5})).await;
        let id = s["id"].as_str().unwrap().to_string();
        for q in [exacerbation_qoi(), fev1_qoi()] {
            let qid = q.id.clone();
            self.ok(&format!("/v1/sessions/{id}/qois"), json!({ "qoi": q })).await;
            for e in ["A", "B", "C", "D", "E"] {
                self.ok(&format!("/v1/sessions/{id}/judgements"), json!({"judgement": individual(&qid, e)})).await;
            }
            self.ok(&format!("/v1/sessions/{id}/qois/{qid}/reveal"), json!({})).await;
            self.ok(&format!("/v1/sessions/{id}/judgements"), json!({"judgement": group(&qid)})).await;
        }
        self.ok(&format!("/v1/sessions/{id}/qois/{EXAC}/fit"), json!({"family": "beta"})).await;
        self.ok(&format!("/v1/sessions/{id}/qois/{FEV1}/fit"), json!({"family": "normal"})).await;
        id
    }
}

fn concordance() -> Value {
    json!({"qois": [EXAC, FEV1], "judgements": [ConcordanceJudgement::new(EXAC, FEV1, 0.7)]})
}

fn pos_request(n_sims: u64) -> Value {
    let design = TrialDesign::two_doses(
        200,
        ExacerbationEndpoint {
            follow_up_years: 1.0,
            placebo_rate: 0.9,
            dispersion: 0.5,
        },
        Fev1Endpoint { residual_sd: 400.0 },
    );
    json!({"design": design, "rule": elicit::pos::SuccessRule::default(), "n_sims": n_sims, "seed": 11})
}

#[tokio::test]
async fn unknown_session_gives_not_found_envelope() {
    let api = Api::new();
    let r = api.get("/v1/sessions/nope").await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    let v = r.json();
    assert_eq!(v["schema"], "elicit.error/1");
    assert_eq!(v["code"], "not_found");
    assert!(v["message"].is_string());
    assert!(v["details"].is_object());
    assert_eq!(api.get("/v1/sessions/nope/export").await.json()["code"], "not_found");
    assert_eq!(api.get("/v1/jobs/nope").await.json()["code"], "not_found");
}

#[tokio::test]
async fn malformed_body_is_bad_request() {
    let api = Api::new();
    let r = api
        .send(Request::post("/v1/sessions").body(Body::from("{not json")).unwrap())
        .await;
    assert_eq!(r.status, StatusCode::BAD_REQUEST);
    assert_eq!(r.json()["code"], "bad_request");
}

#[tokio::test]
async fn group_fit_before_reveal_is_a_stage_error() {
    let api = Api::new();
    let id = api.ok("/v1/sessions", json!({"title": "t", "n_experts": 2})).await["id"].as_str().unwrap().to_string();
    api.ok(&format!("/v1/sessions/{id}/qois"), json!({"qoi": exacerbation_qoi()})).await;
    let before = api.event_count(&id).await;
    let r = api.post(&format!("/v1/sessions/{id}/judgements"), json!({"judgement": group(EXAC)})).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    let v = r.json();
    assert_eq!(v["code"], "stage_violation");
    assert_eq!(v["details"]["current_stage"], "individual");
    assert_eq!(api.event_count(&id).await, before);
}

#[tokio::test]
async fn explore_is_read_only_and_commit_appends_once() {
    let api = Api::new();
    let id = api.consensus_session().await;
    let before = api.get(&format!("/v1/sessions/{id}")).await.json();
    let mut explore = concordance();
    explore["seed"] = json!(5);
    explore["n"] = json!(2000);
    let mut first = None;
    for _ in 0..5 {
        let v = api.ok(&format!("/v1/sessions/{id}/copula/explore"), explore.clone()).await;
        assert_eq!(v["schema"], "elicit.copula-preview/1");
        assert_eq!(v["sample"]["columns"].as_array().unwrap().len(), 2);
        first.get_or_insert(v["summary"].clone());
        assert_eq!(Some(&v["summary"]), first.as_ref());
    }
    let after = api.get(&format!("/v1/sessions/{id}")).await.json();
    assert_eq!(before["state_hash"], after["state_hash"]);
    assert_eq!(before["events"], after["events"]);

    let mut commit = concordance();
    commit["client_token"] = json!("commit-1");
    let a = api.ok(&format!("/v1/sessions/{id}/copula/commit"), commit.clone()).await;
    let b = api.ok(&format!("/v1/sessions/{id}/copula/commit"), commit).await;
    assert_eq!(a["duplicate"], false);
    assert_eq!(b["duplicate"], true);
    assert_eq!(a["seq"], b["seq"]);
    let events = api.get(&format!("/v1/sessions/{id}/events")).await.json();
    let copula_events = events["events"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|e| e["event"]["type"] == "copula-committed")
        .count();
    assert_eq!(copula_events, 1);
}

#[tokio::test]
async fn idempotency_header_is_honoured() {
    let api = Api::new();
    let id = api.consensus_session().await;
    let send = || {
        Request::post(format!("/v1/sessions/{id}/copula/commit"))
            .header("idempotency-key", "k1")
            .body(Body::from(concordance().to_string()))
            .unwrap()
    };
    let n = api.event_count(&id).await;
    assert_eq!(api.send(send()).await.status, StatusCode::OK);
    assert_eq!(api.send(send()).await.json()["duplicate"], true);
    assert_eq!(api.event_count(&id).await, n + 1);
}

#[tokio::test]
async fn binary_explore_is_column_major_le() {
    let api = Api::new();
    let id = api.consensus_session().await;
    let mut body = concordance();
    body["seed"] = json!(9);
    body["n"] = json!(500);
    let req = |accept: &str| {
        Request::post(format!("/v1/sessions/{id}/copula/explore"))
            .header(header::ACCEPT, accept)
            .body(Body::from(body.to_string()))
            .unwrap()
    };
    let bin = api.send(req("application/octet-stream")).await;
    assert_eq!(bin.status, StatusCode::OK);
    assert_eq!(bin.headers["content-type"], "application/octet-stream");
    assert_eq!(bin.headers["x-elicit-rows"], "500");
    assert_eq!(bin.headers["x-elicit-columns"], "2");
    assert_eq!(bin.headers["x-elicit-ids"], format!("{EXAC},{FEV1}"));
    assert_eq!(bin.bytes.len(), 500 * 2 * 8);
    let values: Vec<f64> = bin.bytes.chunks(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let json = api.send(req("application/json")).await.json();
    let cols = json["sample"]["columns"].as_array().unwrap();
    for (j, col) in cols.iter().enumerate() {
        for (i, v) in col.as_array().unwrap().iter().enumerate() {
            let parsed: f64 = v.as_str().unwrap().parse().unwrap();
            assert_eq!(parsed, values[j * 500 + i]);
        }
    }
    assert!(values[..500].iter().all(|&x| (0.0..=0.7).contains(&x)));
}

#[tokio::test]
async fn pd_rejection_envelope_carries_diagnosis() {
    let api = Api::new();
    let id = api.consensus_session().await;
    let third = elicit::elicitation::QuantityOfInterest {
        id: "fev1-late".into(),
        ..fev1_qoi()
    };
    let r = api
        .post(&format!("/v1/sessions/{id}/copula/commit"), json!({"qois": [EXAC, FEV1, "fev1-late"], "judgements": []}))
        .await;
    assert_eq!(r.json()["code"], "validation", "unknown quantity");
    api.ok(&format!("/v1/sessions/{id}/qois"), json!({ "qoi": third })).await;
    for e in ["A", "B", "C", "D", "E"] {
        api.ok(&format!("/v1/sessions/{id}/judgements"), json!({"judgement": individual("fev1-late", e)})).await;
    }
    api.ok(&format!("/v1/sessions/{id}/qois/fev1-late/reveal"), json!({})).await;
    api.ok(&format!("/v1/sessions/{id}/judgements"), json!({"judgement": group("fev1-late")})).await;
    api.ok(&format!("/v1/sessions/{id}/qois/fev1-late/fit"), json!({})).await;

    let n = api.event_count(&id).await;
    let judgements = [
        ConcordanceJudgement::new(EXAC, FEV1, 0.99),
        ConcordanceJudgement::new(EXAC, "fev1-late", 0.99),
        ConcordanceJudgement::new(FEV1, "fev1-late", 0.01),
    ];
    let body = json!({"qois": [EXAC, FEV1, "fev1-late"], "judgements": judgements});
    let r = api.post(&format!("/v1/sessions/{id}/copula/commit"), body.clone()).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    let v = r.json();
    assert_eq!(v["code"], "not_positive_definite");
    assert!(!v["details"]["pairs"].as_array().unwrap().is_empty(), "{v}");
    assert_eq!(api.event_count(&id).await, n);
    // Explore reports the same failure without touching the log.
    let mut explore = body;
    explore["seed"] = json!(1);
    assert_eq!(api.post(&format!("/v1/sessions/{id}/copula/explore"), explore).await.json()["code"], "not_positive_definite");
}

#[tokio::test]
async fn pos_run_is_a_polled_job_and_records_once() {
    let api = Api::new();
    let id = api.consensus_session().await;

    // Without a committed copula the request fails before any job starts.
    let r = api.post(&format!("/v1/sessions/{id}/pos/runs"), pos_request(1000)).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r.json()["code"], "validation");

    api.ok(&format!("/v1/sessions/{id}/copula/commit"), concordance()).await;
    let mut req = pos_request(20_000);
    req["client_token"] = json!("run-1");
    let started = api.post(&format!("/v1/sessions/{id}/pos/runs"), req.clone()).await;
    assert_eq!(started.status, StatusCode::ACCEPTED);
    let job = started.json();
    assert_eq!(job["schema"], "elicit.job/1");
    let job_id = job["job_id"].as_str().unwrap().to_string();
    let done = loop {
        let v = api.get(&format!("/v1/jobs/{job_id}")).await.json();
        let p = v["progress"].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&p));
        match v["status"].as_str().unwrap() {
            "running" => tokio::time::sleep(Duration::from_millis(20)).await,
            "done" => break v,
            other => panic!("job ended {other}: {v}"),
        }
    };
    assert_eq!(done["progress"], 1.0);
    assert_eq!(done["completed"], 20_000);
    let pos: f64 = done["result"]["pos"].as_str().unwrap().parse().unwrap();
    assert!((0.0..=1.0).contains(&pos));

    // Same token again: the recorded result comes back and nothing is appended.
    let n = api.event_count(&id).await;
    let again = api.post(&format!("/v1/sessions/{id}/pos/runs"), req).await.json();
    let again_id = again["job_id"].as_str().unwrap().to_string();
    let v = loop {
        let v = api.get(&format!("/v1/jobs/{again_id}")).await.json();
        if v["status"] != "running" {
            break v;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    };
    assert_eq!(v["duplicate"], true);
    assert_eq!(v["result"], done["result"]);
    assert_eq!(api.event_count(&id).await, n);
    let runs = api.get(&format!("/v1/sessions/{id}/pos/runs")).await.json();
    assert_eq!(runs["runs"].as_array().unwrap().len(), 1);
}

#[tokio::test]
async fn sensitivity_is_read_only() {
    let api = Api::new();
    let id = api.consensus_session().await;
    api.ok(&format!("/v1/sessions/{id}/copula/commit"), concordance()).await;
    let n = api.event_count(&id).await;
    let mut req = pos_request(2000);
    req["knob"] = json!({"knob": "alpha", "values": ["0.01", "0.05"]});
    let v = api.ok(&format!("/v1/sessions/{id}/pos/sensitivity"), req).await;
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    let p = |r: &Value| r["result"]["p_trial_success"].as_str().unwrap().parse::<f64>().unwrap();
    assert!(p(&rows[0]) <= p(&rows[1]));
    assert_eq!(api.event_count(&id).await, n);
}

#[tokio::test]
async fn extension_flow_over_http() {
    let api = Api::new();
    let id = api.consensus_session().await;
    let v = api.ok(&format!("/v1/sessions/{id}/extension"), json!({"config": extension_config()})).await;
    let pending: Vec<&str> = v["pending"].as_array().unwrap().iter().map(|p| p.as_str().unwrap()).collect();
    assert_eq!(pending, ["0.55", "0.75", "0.6", "0.7"]);
    let n = api.event_count(&id).await;
    let preview = api
        .ok(
            &format!("/v1/sessions/{id}/extension/{EXAC}/preview"),
            json!({"what_if": [["0.55", "0.24"], ["0.6", "0.3"], ["0.7", "0.36"], ["0.75", "0.4"]], "n": 5000, "seed": 3}),
        )
        .await;
    assert_eq!(preview["schema"], "elicit.extension-preview/1");
    assert_eq!(api.event_count(&id).await, n);
    for (y, m) in CONDITIONAL_MEDIANS {
        api.ok(&format!("/v1/sessions/{id}/extension/{EXAC}/medians"), json!({"y": y, "median": m})).await;
    }
    let c = api.ok(&format!("/v1/sessions/{id}/extension/{EXAC}/commit"), json!({"n": 5000, "seed": 3})).await;
    assert!(c["extension"]["committed"].is_object());
    let shown = api.get(&format!("/v1/sessions/{id}/extension/{EXAC}")).await.json();
    assert_eq!(shown["pending"].as_array().unwrap().len(), 0);
}

#[tokio::test]
async fn export_json_and_text() {
    let api = Api::new();
    let id = api.consensus_session().await;
    let a = api.get(&format!("/v1/sessions/{id}/export")).await;
    let b = api.get(&format!("/v1/sessions/{id}/export")).await;
    assert_eq!(a.status, StatusCode::OK);
    assert_eq!(a.bytes, b.bytes);
    assert_eq!(a.json()["schema"], "elicit.report/1");
    let t = api.get(&format!("/v1/sessions/{id}/export?format=text")).await;
    assert!(String::from_utf8(t.bytes).unwrap().contains("Beta(2.81, 3.05)"));
    assert_eq!(api.get(&format!("/v1/sessions/{id}/export?format=pdf")).await.status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn unknown_route_uses_envelope() {
    let api = Api::new();
    let r = api.get("/v2/anything").await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
    assert_eq!(r.json()["schema"], "elicit.error/1");
}
