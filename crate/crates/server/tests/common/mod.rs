#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use deployguard_core::clock::{Timestamp, VirtualClock};
use deployguard_core::incident::Playbook;
use deployguard_core::role::Role;
use deployguard_core::stack::{Stack, StackConfig};
use deployguard_server::api::{router, AppState};
use deployguard_server::config::{ServerConfig, Sessions, TokenGrant};
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

pub const PLAYBOOK: &str = r#"{
  "id": "api-test",
  "triggers": [
    {
      "id": "reports",
      "model_id": "model-a",
      "metric": "external_report_count",
      "window_secs": 3600,
      "threshold": {"op": ">=", "value": 1},
      "min_samples": 1,
      "severity": "High",
      "grade": "Elevated",
      "binding": {"type": "alert_only"}
    }
  ],
  "templates": [
    {"id": "throttle", "kind": "ThrottlePrompts", "scope": "Global", "params": {"cap": 3, "window_secs": 3600, "aggregate": "per_principal"}},
    {"id": "market-removal", "kind": "MarketRemoval", "scope": "Global"},
    {"id": "power-off", "kind": "PowerOff", "scope": "Global"}
  ],
  "escalation": {
    "chain": [
      {"role": "Analyst", "contact": "soc@example.test"},
      {"role": "SOCLead", "contact": "lead@example.test"},
      {"role": "CISO", "contact": "ciso@example.test"},
      {"role": "CEO", "contact": "ceo@example.test"}
    ]
  },
  "redeploy": {"required_roles": ["CISO"]},
  "comms": {
    "stakeholders": [
      {"audience": "Regulator", "url": "https://agency.example/incidents", "severity_floor": "High"}
    ],
    "sla": {
      "Commercial": {"monetary_note": true},
      "Individual": {"credit_rate_per_hour": 2.0}
    }
  }
}"#;

pub const START: Timestamp = Timestamp(1_000_000);

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

pub fn token(role: Role) -> &'static str {
    match role {
        Role::Analyst => "dev-analyst",
        Role::SocLead => "dev-soclead",
        Role::Ciso => "dev-ciso",
        Role::Ceo => "dev-ceo",
        Role::System => "none",
    }
}

pub fn grants() -> Vec<TokenGrant> {
    let mut g = ServerConfig::development().tokens;
    g.push(TokenGrant { token: "stale".into(), role: Role::Ceo, issued_at: None, expires_at: Some(Timestamp(500)) });
    g.push(TokenGrant {
        token: "future".into(),
        role: Role::Ceo,
        issued_at: Some(Timestamp(u64::MAX / 2)),
        expires_at: None,
    });
    g
}

pub fn new_stack(clock: Arc<VirtualClock>) -> Stack {
    let cfg = ServerConfig::development();
    let pb = Playbook::load(PLAYBOOK, Some(&cfg.principals)).expect("test playbook");
    Stack::new(
        clock,
        StackConfig { seed: 7, playbook: pb, deployments: cfg.deployments, principals: cfg.principals, audit_path: None },
    )
    .expect("stack")
}

pub struct App {
    pub router: Router,
    pub stack: Arc<Stack>,
    pub clock: Arc<VirtualClock>,
}

impl App {
    pub fn new() -> Self {
        let clock = Arc::new(VirtualClock::new(START));
        let stack = Arc::new(new_stack(clock.clone()));
        let router = router(AppState::new(stack.clone(), Sessions::new(&grants())));
        App { router, stack, clock }
    }

    pub async fn raw(&self, method: &str, path: &str, token: Option<&str>, body: &str) -> (StatusCode, Value) {
        let mut req = Request::builder().method(method).uri(path).header("content-type", "application/json");
        if let Some(t) = token {
            req = req.header("authorization", format!("Bearer {t}"));
        }
        let resp = self.router.clone().oneshot(req.body(Body::from(body.to_owned())).unwrap()).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).expect("json body") };
        (status, v)
    }

    pub async fn call(&self, method: &str, path: &str, role: Option<Role>, body: Option<Value>) -> (StatusCode, Value) {
        let text = body.map(|b| b.to_string()).unwrap_or_default();
        self.raw(method, path, role.map(token), &text).await
    }

    /// Files an external report and runs one monitor pass; returns the alert id.
    pub fn raise_alert(&self) -> String {
        use deployguard_core::monitor::PendingMetric;
        let m: PendingMetric =
            serde_json::from_value(serde_json::json!({"kind": "external_report", "deployment": "model-a"})).unwrap();
        self.stack.ingest_now(m).unwrap();
        self.clock.advance(std::time::Duration::from_secs(10));
        self.stack.tick().unwrap();
        self.stack.alerts_queue().last().expect("alert fired").id.clone()
    }
}

pub fn assert_error_shape(v: &Value) {
    let o = v.as_object().unwrap_or_else(|| panic!("error body is not an object: {v}"));
    assert!(o.get("code").and_then(Value::as_str).is_some_and(|c| !c.is_empty()), "{v}");
    assert!(o.get("message").and_then(Value::as_str).is_some(), "{v}");
    assert!(o.get("details").is_some_and(Value::is_object), "{v}");
    assert_eq!(o.len(), 3, "{v}");
}
