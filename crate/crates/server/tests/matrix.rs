//! Every (role, mutating endpoint) pair against a fresh stack, visited in a
//! shuffled order. A refused call must leave no trace in state or audit.

mod common;

use std::collections::BTreeMap;

use axum::http::StatusCode;
use common::{App, PLAYBOOK};
use deployguard_core::incident::{AfterActionReview, CorrectionOrder, IncidentOp, Severity};
use deployguard_core::role::Role;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use serde_json::{json, Value};

struct Call {
    method: &'static str,
    path: String,
    body: String,
}

fn post(path: String, body: Value) -> Call {
    Call { method: "POST", path, body: body.to_string() }
}

fn incident(app: &App) -> String {
    app.stack.open_manual_incident("model-a", "matrix", Severity::High, Role::Analyst).unwrap().id
}

fn order(template: &str) -> CorrectionOrder {
    CorrectionOrder { template: Some(template.into()), ..Default::default() }
}

fn approved() -> AfterActionReview {
    AfterActionReview {
        root_cause: "rc".into(),
        why_not_caught_earlier: "gap".into(),
        approved: true,
        ..Default::default()
    }
}

/// Builds the prerequisite state for one endpoint and returns the call.
fn setup(endpoint: &str, app: &App) -> Call {
    match endpoint {
        "ingest" => post("/internal/events".into(), json!({"kind": "external_report", "deployment": "model-a"})),
        "triage" => {
            let a = app.raise_alert();
            post(format!("/alerts/{a}/triage"), json!({"outcome": "TruePositive"}))
        }
        "open" => post("/incidents".into(), json!({"model_id": "model-a", "report": "r", "severity": "High"})),
        "escalate" => post(format!("/incidents/{}/escalate", incident(app)), json!({"to": "CEO", "emergency": true})),
        "transition" => post(format!("/incidents/{}/transition", incident(app)), json!({"op": "begin_analysis"})),
        "severity" => post(format!("/incidents/{}/severity", incident(app)), json!({"severity": "Critical"})),
        "throttle" => post(format!("/incidents/{}/corrections", incident(app)), json!({"template": "throttle"})),
        "allowlist" => post(
            format!("/incidents/{}/corrections", incident(app)),
            json!({"kind": "AllowlistMode", "scope": "Global"}),
        ),
        "power-off" => post(format!("/incidents/{}/corrections", incident(app)), json!({"template": "power-off"})),
        "decommission" => post(
            format!("/incidents/{}/corrections", incident(app)),
            json!({"kind": "Decommission", "scope": "Global"}),
        ),
        "review" => {
            let id = incident(app);
            app.stack.execute_correction(&id, &order("throttle"), Role::Analyst).unwrap();
            for op in [IncidentOp::MarkContained, IncidentOp::BeginRemediation, IncidentOp::BeginRecovery] {
                app.stack.transition(&id, op, Role::Analyst).unwrap();
            }
            post(format!("/incidents/{id}/review"), serde_json::to_value(approved()).unwrap())
        }
        "notify" => post(format!("/incidents/{}/notify", incident(app)), json!({"message": "m"})),
        "stakeholders" => post(
            format!("/incidents/{}/stakeholders", incident(app)),
            json!({"audiences": ["Regulator"], "summary": "s"}),
        ),
        "redeploy" => {
            let id = incident(app);
            app.stack.execute_correction(&id, &order("market-removal"), Role::Ciso).unwrap();
            for op in [IncidentOp::MarkContained, IncidentOp::BeginRemediation, IncidentOp::BeginRecovery] {
                app.stack.transition(&id, op, Role::Ciso).unwrap();
            }
            app.stack.submit_review(&id, approved(), Role::Ciso).unwrap();
            post("/deployments/model-a/redeploy-approval".into(), json!({"incident_id": id}))
        }
        "revoke-throttle" | "revoke-power-off" => {
            let id = incident(app);
            let t = endpoint.trim_start_matches("revoke-");
            let p = app.stack.execute_correction(&id, &order(t), Role::Ceo).unwrap().policy.id;
            Call { method: "DELETE", path: format!("/policies/{p}"), body: String::new() }
        }
        "playbook" => Call { method: "POST", path: "/playbooks".into(), body: PLAYBOOK.into() },
        other => panic!("no setup for {other}"),
    }
}

/// Expected status per caller role: Analyst, SOCLead, CISO, CEO.
fn expected() -> BTreeMap<&'static str, [u16; 4]> {
    BTreeMap::from([
        ("ingest", [202, 202, 202, 202]),
        ("triage", [200, 200, 200, 200]),
        ("open", [201, 201, 201, 201]),
        // an emergency may skip steps; nobody sits above the CEO
        ("escalate", [200, 200, 200, 422]),
        ("transition", [200, 200, 200, 200]),
        ("severity", [200, 200, 200, 200]),
        ("throttle", [201, 201, 201, 201]),
        ("allowlist", [403, 201, 201, 201]),
        ("power-off", [403, 403, 201, 201]),
        ("decommission", [403, 403, 403, 201]),
        ("review", [200, 200, 200, 200]),
        ("notify", [403, 200, 200, 200]),
        ("stakeholders", [403, 200, 200, 200]),
        ("redeploy", [403, 403, 200, 200]),
        ("revoke-throttle", [200, 200, 200, 200]),
        ("revoke-power-off", [403, 403, 200, 200]),
        ("playbook", [403, 403, 201, 201]),
    ])
}

/// Everything a refused call must leave untouched.
fn fingerprint(app: &App) -> Value {
    json!({
        "audit": app.stack.audit.records().len(),
        "policies": app.stack.policies(),
        "incidents": app.stack.incidents.list(),
        "status": app.stack.status(),
        "playbook": app.stack.playbook().id,
        "feed": app.stack.feed.last_id(),
    })
}

#[tokio::test]
async fn role_endpoint_matrix() {
    let table = expected();
    let mut pairs: Vec<(&str, usize)> = table.keys().flat_map(|e| (0..4).map(move |r| (*e, r))).collect();
    pairs.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(0x5eed));
    let mut failures = Vec::new();
    for (endpoint, r) in pairs {
        let role = Role::HUMAN[r];
        let app = App::new();
        let call = setup(endpoint, &app);

        // no token never gets past authentication
        let (st, v) = app.raw(call.method, &call.path, None, &call.body).await;
        assert_eq!(st, StatusCode::UNAUTHORIZED, "{endpoint}: {v}");

        let before = fingerprint(&app);
        let (st, v) = app.raw(call.method, &call.path, Some(common::token(role)), &call.body).await;
        let want = table[endpoint][r];
        if st.as_u16() != want {
            failures.push(format!("{endpoint} as {role}: got {st} want {want}: {v}"));
            continue;
        }
        if st == StatusCode::FORBIDDEN {
            common::assert_error_shape(&v);
            assert_eq!(fingerprint(&app), before, "{endpoint} as {role} mutated state while refused");
        } else if st.is_success() && endpoint != "ingest" {
            // ingested metrics sit in the window until the next tick
            assert_ne!(fingerprint(&app), before, "{endpoint} as {role} succeeded without effect");
        }
    }
    assert!(failures.is_empty(), "{}", failures.join("\n"));
}
