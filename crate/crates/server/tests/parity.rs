//! The same operation scripts driven through HTTP and through direct `Stack`
//! calls must produce the same outcomes and byte-identical audit traces.

mod common;

use std::sync::Arc;
use std::time::Duration;

use axum::http::StatusCode;
use common::{new_stack, App, START};
use deployguard_core::clock::VirtualClock;
use deployguard_core::comms::{Audience, NotifyMode};
use deployguard_core::gateway::{GatewayError, InferenceRequest};
use deployguard_core::incident::{AfterActionReview, Approvals, CorrectionOrder, IncidentOp, Severity};
use deployguard_core::monitor::{PendingMetric, TriageOutcome};
use deployguard_core::policy::PolicyId;
use deployguard_core::role::Role;
use deployguard_core::stack::{FeedbackRequest, Stack, StackError};
use deployguard_server::api::status_of;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

#[derive(Debug, Clone)]
enum Op {
    Advance(u64),
    Tick,
    Report,
    Infer(&'static str),
    Feedback(&'static str, bool),
    Triage(u64, TriageOutcome, Role),
    Open(Role),
    Correct(u64, &'static str, Role),
    Escalate(u64, Role, Role, bool),
    Ack(u64, Role),
    Transition(u64, IncidentOp, Role),
    Review(u64, Role),
    Redeploy(u64, Role),
    Revoke(u64, Role),
    Notify(u64, Role),
    Stakeholders(u64, Role),
}

const PRINCIPALS: [&str; 5] = ["grid-operator", "clinic-net", "acme-apps", "jo", "stranger"];
const TEMPLATES: [&str; 4] = ["throttle", "market-removal", "power-off", "missing"];
const MOVES: [IncidentOp; 5] = [
    IncidentOp::BeginAnalysis,
    IncidentOp::MarkContained,
    IncidentOp::BeginRemediation,
    IncidentOp::BeginRecovery,
    IncidentOp::Close,
];

fn inc_id(n: u64) -> String {
    format!("inc-{n:04}")
}

fn alert_id(n: u64) -> String {
    format!("alert-{n:04}")
}

fn review() -> AfterActionReview {
    AfterActionReview {
        root_cause: "rc".into(),
        why_not_caught_earlier: "gap".into(),
        reviewed_by: vec![Role::Ciso],
        approved: true,
        ..Default::default()
    }
}

fn order(t: &str) -> CorrectionOrder {
    CorrectionOrder { template: Some(t.into()), ..Default::default() }
}

fn infer_req(p: &str) -> InferenceRequest {
    InferenceRequest::new(p, &format!("s-{p}"), "model-a", "hello")
}

type Outcome = Result<(), (u16, String)>;

fn classify<T>(r: Result<T, StackError>) -> Outcome {
    r.map(|_| ()).map_err(|e| {
        let (code, class) = e.classify();
        (status_of(class).as_u16(), code.to_owned())
    })
}

fn direct(stack: &Stack, clock: &VirtualClock, op: &Op) -> Outcome {
    match op {
        Op::Advance(s) => {
            clock.advance(Duration::from_secs(*s));
            Ok(())
        }
        Op::Tick => classify(stack.tick()),
        Op::Report => classify(stack.ingest_now(report())),
        Op::Infer(p) => match stack.handle(&infer_req(p)) {
            Ok(_) => Ok(()),
            Err(GatewayError::Denied(d)) if d.reason_code.is_shutdown() => Err((503, "Denied".into())),
            Err(GatewayError::Denied(_)) => Err((403, "Denied".into())),
            Err(e) => classify::<()>(Err(e.into())),
        },
        Op::Feedback(p, u) => classify(stack.feedback(&FeedbackRequest {
            principal_id: p.to_string(),
            model_id: "model-a".into(),
            request_id: None,
            unsatisfactory: *u,
        })),
        Op::Triage(a, o, r) => classify(stack.triage(&alert_id(*a), *o, *r)),
        Op::Open(r) => classify(stack.open_manual_incident("model-a", "parity", Severity::High, *r)),
        Op::Correct(i, t, r) => classify(stack.execute_correction(&inc_id(*i), &order(t), *r)),
        Op::Escalate(i, f, t, e) => classify(stack.escalate(&inc_id(*i), *f, *t, *e)),
        Op::Ack(i, r) => classify(stack.acknowledge(&inc_id(*i), *r)),
        Op::Transition(i, o, r) => classify(stack.transition(&inc_id(*i), *o, *r)),
        Op::Review(i, r) => classify(stack.submit_review(&inc_id(*i), review(), *r)),
        Op::Redeploy(i, r) => {
            classify(stack.approve_redeployment(&inc_id(*i), None, &Approvals { roles: vec![*r], external_signoff: None }, *r))
        }
        Op::Revoke(p, r) => classify(stack.revoke_policy(&PolicyId::from_counter(*p), *r)),
        Op::Notify(i, r) => {
            if *r < Role::SocLead {
                return Err((403, "UnauthorizedActor".into()));
            }
            classify(stack.notify(&inc_id(*i), None, NotifyMode::Standard, "notice"))
        }
        Op::Stakeholders(i, r) => {
            if *r < Role::SocLead {
                return Err((403, "UnauthorizedActor".into()));
            }
            classify(stack.alert_stakeholders(&inc_id(*i), &[Audience::Regulator], "summary"))
        }
    }
}

fn report() -> PendingMetric {
    serde_json::from_value(json!({"kind": "external_report", "deployment": "model-a"})).unwrap()
}

async fn over_http(app: &App, op: &Op) -> Outcome {
    let (st, v) = match op {
        Op::Advance(s) => {
            app.clock.advance(Duration::from_secs(*s));
            return Ok(());
        }
        // the monitor loop is not an endpoint
        Op::Tick => return classify(app.stack.tick()),
        Op::Report => app.call("POST", "/internal/events", Some(Role::Analyst), Some(json!(report()))).await,
        Op::Infer(p) => app.call("POST", "/v1/infer", None, Some(json!(infer_req(p)))).await,
        Op::Feedback(p, u) => {
            app.call("POST", "/v1/feedback", None, Some(json!({"principal_id": p, "model_id": "model-a", "unsatisfactory": u})))
                .await
        }
        Op::Triage(a, o, r) => {
            app.call("POST", &format!("/alerts/{}/triage", alert_id(*a)), Some(*r), Some(json!({"outcome": o}))).await
        }
        Op::Open(r) => {
            app.call("POST", "/incidents", Some(*r), Some(json!({"model_id": "model-a", "report": "parity", "severity": "High"})))
                .await
        }
        Op::Correct(i, t, r) => {
            app.call("POST", &format!("/incidents/{}/corrections", inc_id(*i)), Some(*r), Some(json!({"template": t}))).await
        }
        Op::Escalate(i, f, t, e) => {
            app.call("POST", &format!("/incidents/{}/escalate", inc_id(*i)), Some(*f), Some(json!({"to": t, "emergency": e})))
                .await
        }
        Op::Ack(i, r) => app.call("POST", &format!("/incidents/{}/acknowledge", inc_id(*i)), Some(*r), None).await,
        Op::Transition(i, o, r) => {
            app.call("POST", &format!("/incidents/{}/transition", inc_id(*i)), Some(*r), Some(json!({"op": o}))).await
        }
        Op::Review(i, r) => app.call("POST", &format!("/incidents/{}/review", inc_id(*i)), Some(*r), Some(json!(review()))).await,
        Op::Redeploy(i, r) => {
            app.call("POST", "/deployments/model-a/redeploy-approval", Some(*r), Some(json!({"incident_id": inc_id(*i)}))).await
        }
        Op::Revoke(p, r) => app.call("DELETE", &format!("/policies/{}", PolicyId::from_counter(*p)), Some(*r), None).await,
        Op::Notify(i, r) => {
            app.call("POST", &format!("/incidents/{}/notify", inc_id(*i)), Some(*r), Some(json!({"message": "notice"}))).await
        }
        Op::Stakeholders(i, r) => {
            app.call(
                "POST",
                &format!("/incidents/{}/stakeholders", inc_id(*i)),
                Some(*r),
                Some(json!({"audiences": ["Regulator"], "summary": "summary"})),
            )
            .await
        }
    };
    if st.is_success() {
        return Ok(());
    }
    let code = match v.get("reason_code") {
        Some(_) if st == StatusCode::FORBIDDEN || st == StatusCode::SERVICE_UNAVAILABLE => "Denied".to_owned(),
        _ => v["code"].as_str().unwrap_or_default().to_owned(),
    };
    Err((st.as_u16(), code))
}

fn trace(stack: &Stack) -> Vec<Value> {
    stack.audit.records().iter().map(|r| serde_json::to_value(r).unwrap()).collect()
}

async fn check(script: &[Op]) -> Vec<Outcome> {
    let app = App::new();
    let clock = Arc::new(VirtualClock::new(START));
    let stack = new_stack(clock.clone());
    let mut outcomes = Vec::new();
    for (n, op) in script.iter().enumerate() {
        let a = over_http(&app, op).await;
        let b = direct(&stack, &clock, op);
        assert_eq!(a, b, "step {n} {op:?}");
        outcomes.push(a);
    }
    assert_eq!(trace(&app.stack), trace(&stack));
    assert_eq!(app.stack.status(), stack.status());
    assert_eq!(app.stack.live_state(), stack.live_state());
    assert_eq!(app.stack.feed.since(0), stack.feed.since(0));
    outcomes
}

#[tokio::test]
async fn scripted_incident_lifecycle_has_identical_traces() {
    use Op::*;
    use Role::*;
    let script = vec![
        Infer("jo"),
        Report,
        Advance(10),
        Tick,
        Triage(1, TriageOutcome::TruePositive, Analyst),
        Transition(1, IncidentOp::BeginAnalysis, Analyst),
        Escalate(1, Analyst, SocLead, false),
        Ack(1, SocLead),
        Correct(1, "throttle", SocLead),
        Correct(1, "market-removal", SocLead),
        Escalate(1, SocLead, Ciso, true),
        Ack(1, Ciso),
        Correct(1, "market-removal", Ciso),
        Infer("grid-operator"),
        Notify(1, Analyst),
        Notify(1, SocLead),
        Stakeholders(1, Ciso),
        Transition(1, IncidentOp::MarkContained, Ciso),
        Transition(1, IncidentOp::BeginRemediation, Ciso),
        Revoke(1, Analyst),
        Transition(1, IncidentOp::BeginRecovery, Ciso),
        Redeploy(1, Ciso),
        Review(1, Ciso),
        Redeploy(1, SocLead),
        Redeploy(1, Ciso),
        Infer("acme-apps"),
        Feedback("acme-apps", true),
    ];
    let out = check(&script).await;
    let refused: Vec<usize> = out.iter().enumerate().filter(|(_, o)| o.is_err()).map(|(i, _)| i).collect();
    // SOCLead market removal, grid-operator while removed, Analyst notify,
    // redeploy before review, SOCLead redeploy
    assert_eq!(refused, vec![9, 13, 14, 21, 23]);
    assert_eq!(out[13], Err((503, "Denied".into())));
}

fn random_op(rng: &mut ChaCha8Rng) -> Op {
    let role = Role::HUMAN[rng.random_range(0..4)];
    let other = Role::HUMAN[rng.random_range(0..4)];
    let inc = rng.random_range(1..=3);
    match rng.random_range(0..16) {
        0 => Op::Advance(rng.random_range(1..4000)),
        1 => Op::Tick,
        2 => Op::Report,
        3 => Op::Infer(PRINCIPALS[rng.random_range(0..PRINCIPALS.len())]),
        4 => Op::Feedback(PRINCIPALS[rng.random_range(0..4)], rng.random_bool(0.5)),
        5 => Op::Triage(rng.random_range(1..=3), TriageOutcome::TruePositive, role),
        6 => Op::Open(role),
        7 => Op::Correct(inc, TEMPLATES[rng.random_range(0..TEMPLATES.len())], role),
        8 => Op::Escalate(inc, role, other, rng.random_bool(0.5)),
        9 => Op::Ack(inc, role),
        10 | 11 => Op::Transition(inc, MOVES[rng.random_range(0..MOVES.len())], role),
        12 => Op::Review(inc, role),
        13 => Op::Redeploy(inc, role),
        14 => Op::Revoke(rng.random_range(1..=4), role),
        _ => {
            if rng.random_bool(0.5) {
                Op::Notify(inc, role)
            } else {
                Op::Stakeholders(inc, role)
            }
        }
    }
}

#[tokio::test]
async fn random_scripts_have_identical_traces() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xa11ce);
    let (mut ok, mut total) = (0, 0);
    for _ in 0..40 {
        let mut script = vec![Op::Open(Role::Analyst)];
        script.extend((0..60).map(|_| random_op(&mut rng)));
        let out = check(&script).await;
        total += out.len();
        ok += out.iter().filter(|o| o.is_ok()).count();
    }
    // both outcomes must be well represented for the comparison to mean anything
    assert!(ok * 5 > total && ok * 5 < total * 4, "{ok} of {total} succeeded");
}
