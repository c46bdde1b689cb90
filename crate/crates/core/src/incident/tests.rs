use std::time::Duration;

use serde_json::json;

use super::*;
use crate::clock::VirtualClock;
use crate::authority::AuthorityMatrix;
use crate::policy::{CorrectionKind, DeploymentState, Principal, Tier};

fn base_playbook() -> serde_json::Value {
    json!({
        "id": "pb",
        "triggers": [{
            "id": "unsat",
            "metric": "unsatisfactory_rate",
            "window_secs": 300,
            "threshold": {"op": ">", "value": 0.03},
            "min_samples": 20,
            "severity": "Critical",
            "grade": "CodeRed",
            "binding": {"type": "auto_correction", "template": "allowlist", "open_incident": true}
        }],
        "templates": [
            {"id": "allowlist", "trigger": "unsat", "kind": "AllowlistMode"},
            {"id": "market", "kind": "MarketRemoval"},
            {"id": "off", "kind": "PowerOff"}
        ],
        "escalation": {"chain": [
            {"role": "Analyst"}, {"role": "SOCLead"}, {"role": "CISO"}, {"role": "CEO"}
        ]},
        "redeploy": {"required_roles": ["CISO"]}
    })
}

fn engine_with(pb: serde_json::Value) -> (Arc<VirtualClock>, Arc<PolicyStore>, IncidentEngine) {
    let clock = Arc::new(VirtualClock::new(Timestamp(0)));
    let audit = Arc::new(AuditLog::in_memory(clock.clone()));
    let store = Arc::new(PolicyStore::new(clock.clone(), audit.clone()));
    store.register(DeploymentState::new("m", "v1")).unwrap();
    let pb = Playbook::load(&pb.to_string(), None).unwrap();
    (clock.clone(), store.clone(), IncidentEngine::new(clock, audit, store, pb))
}

fn engine() -> (Arc<VirtualClock>, Arc<PolicyStore>, IncidentEngine) {
    engine_with(base_playbook())
}

fn manual(e: &IncidentEngine) -> Incident {
    e.open_incident(IncidentSource::Manual { report: "bad output".into() }, "m", Severity::High, Role::Analyst)
        .unwrap()
        .0
}

fn order(kind: CorrectionKind) -> CorrectionOrder {
    CorrectionOrder { kind: Some(kind), ..Default::default() }
}

fn approved_review() -> AfterActionReview {
    AfterActionReview {
        root_cause: "unsafe fine-tune".into(),
        root_cause_category: "training".into(),
        why_not_caught_earlier: "eval gap".into(),
        approved: true,
        ..Default::default()
    }
}

#[test]
fn transition_table_is_frozen() {
    use IncidentOp as O;
    use IncidentState as S;
    let legal: &[(S, O, S)] = &[
        (S::Open, O::BeginAnalysis, S::Analyzing),
        (S::Open, O::ExecuteCorrection, S::Executing),
        (S::Analyzing, O::ExecuteCorrection, S::Executing),
        (S::Executing, O::ExecuteCorrection, S::Executing),
        (S::Executing, O::MarkContained, S::Contained),
        (S::Executing, O::BeginRemediation, S::Remediating),
        (S::Contained, O::BeginRemediation, S::Remediating),
        (S::Remediating, O::ExecuteCorrection, S::Remediating),
        (S::Remediating, O::BeginRecovery, S::Recovering),
        (S::Recovering, O::SubmitReview, S::UnderReview),
        (S::UnderReview, O::SubmitReview, S::UnderReview),
        (S::UnderReview, O::ApproveRedeployment, S::Closed),
        (S::UnderReview, O::Close, S::Closed),
    ];
    let self_loops = [O::Escalate, O::AssessSeverity, O::Acknowledge];
    for s in S::ALL {
        for op in O::ALL {
            let expected = if s == S::Closed {
                None
            } else if self_loops.contains(&op) {
                Some(s)
            } else {
                legal.iter().find(|(f, o, _)| *f == s && *o == op).map(|(_, _, t)| *t)
            };
            assert_eq!(next_state(s, op), expected, "{s:?} {op:?}");
        }
    }
}

#[test]
fn every_state_reachable_from_open() {
    let mut seen = vec![IncidentState::Open];
    let mut i = 0;
    while i < seen.len() {
        for op in IncidentOp::ALL {
            if let Some(n) = next_state(seen[i], op) {
                if !seen.contains(&n) {
                    seen.push(n);
                }
            }
        }
        i += 1;
    }
    assert_eq!(seen.len(), IncidentState::ALL.len());
}

#[test]
fn alert_source_is_idempotent() {
    let (_, _, e) = engine();
    let src = IncidentSource::Alert { alert_id: "alert-0001".into() };
    let (a, created_a) = e.open_incident(src.clone(), "m", Severity::Critical, Role::System).unwrap();
    let (b, created_b) = e.open_incident(src, "m", Severity::Critical, Role::System).unwrap();
    assert!(created_a && !created_b);
    assert_eq!(a.id, b.id);
    assert_eq!(a.linked_alerts, vec!["alert-0001".to_string()]);
    assert_eq!(e.list().len(), 1);
    assert_eq!(a.owner, Role::Analyst);
}

#[test]
fn manual_source_needs_report_and_deployment() {
    let (_, _, e) = engine();
    let empty = IncidentSource::Manual { report: " ".into() };
    assert!(matches!(e.open_incident(empty, "m", Severity::Low, Role::Analyst), Err(IncidentError::UnknownSource(_))));
    let src = IncidentSource::Manual { report: "x".into() };
    assert!(matches!(e.open_incident(src, "nope", Severity::Low, Role::Analyst), Err(IncidentError::Policy(_))));
}

#[test]
fn correction_moves_state_and_records_stage() {
    let (_, store, e) = engine();
    let inc = manual(&e);
    e.transition(&inc.id, IncidentOp::BeginAnalysis, Role::Analyst).unwrap();
    let order = CorrectionOrder {
        kind: Some(CorrectionKind::BlocklistPrincipal),
        scope: Some(Scope::Principal("p1".into())),
        ..Default::default()
    };
    let applied = e.execute_correction(&inc.id, &order, Role::Analyst).unwrap();
    let inc = e.get(&inc.id).unwrap();
    assert_eq!(inc.state, IncidentState::Executing);
    assert_eq!(inc.corrections_applied, vec![applied.policy.id.clone()]);
    assert_eq!(inc.containment_records.len(), 1);
    assert_eq!(store.find(&applied.policy.id).unwrap().provenance.as_deref(), Some(inc.id.as_str()));
}

#[test]
fn analyst_cannot_power_off() {
    let (_, _, e) = engine();
    let inc = manual(&e);
    let err = e.execute_correction(&inc.id, &order(CorrectionKind::PowerOff), Role::Analyst).unwrap_err();
    assert!(matches!(err, IncidentError::Policy(PolicyError::UnauthorizedActor { .. })), "{err}");
    assert_eq!(e.get(&inc.id).unwrap().state, IncidentState::Open);
}

#[test]
fn template_order_and_dynamic_scope() {
    let (_, _, e) = engine();
    let inc = manual(&e);
    let o = CorrectionOrder { template: Some("market".into()), ..Default::default() };
    let applied = e.execute_correction(&inc.id, &o, Role::Ciso).unwrap();
    assert_eq!(applied.policy.kind, CorrectionKind::MarketRemoval);
    let missing = CorrectionOrder { template: Some("nope".into()), ..Default::default() };
    assert!(matches!(e.execute_correction(&inc.id, &missing, Role::Ciso), Err(IncidentError::UnknownTemplate(_))));
    assert!(matches!(
        e.execute_correction(&inc.id, &CorrectionOrder::default(), Role::Ciso),
        Err(IncidentError::InvalidOrder(_))
    ));
}

#[test]
fn escalation_follows_chain() {
    let (_, _, e) = engine();
    let inc = manual(&e);
    assert!(matches!(
        e.escalate(&inc.id, Role::Analyst, Role::Ciso, false),
        Err(IncidentError::InvalidChainStep { .. })
    ));
    assert!(matches!(
        e.escalate(&inc.id, Role::SocLead, Role::Analyst, false),
        Err(IncidentError::InvalidChainStep { .. })
    ));
    e.escalate(&inc.id, Role::Analyst, Role::SocLead, false).unwrap();
    assert!(matches!(e.acknowledge(&inc.id, Role::Ciso), Err(IncidentError::NoPendingEscalation(Role::Ciso))));
    let inc = e.acknowledge(&inc.id, Role::SocLead).unwrap();
    assert_eq!(inc.owner, Role::SocLead);
    assert!(inc.pending_escalation.is_none());
}

#[test]
fn emergency_may_skip_levels() {
    let (_, _, e) = engine();
    let inc = manual(&e);
    let inc = e.escalate(&inc.id, Role::Analyst, Role::Ceo, true).unwrap();
    assert_eq!(inc.pending_escalation.unwrap().to, Role::Ceo);

    let mut pb = base_playbook();
    pb["authority"] = serde_json::to_value(AuthorityMatrix::default()).unwrap();
    pb["authority"]["emergency_clause"]["enabled"] = json!(false);
    let (_, _, e) = engine_with(pb);
    let inc = manual(&e);
    assert!(e.escalate(&inc.id, Role::Analyst, Role::Ceo, true).is_err());
}

#[test]
fn devolution_only_after_timeout() {
    let (clock, store, e) = engine();
    let inc = manual(&e);
    e.escalate(&inc.id, Role::SocLead, Role::Ciso, false).unwrap();

    clock.advance(Duration::from_secs(30 * 60 - 1));
    assert!(e.check_devolution(clock.now()).unwrap().is_empty());
    let err = e.execute_correction(&inc.id, &order(CorrectionKind::PowerOff), Role::SocLead).unwrap_err();
    assert!(matches!(err, IncidentError::Policy(PolicyError::UnauthorizedActor { .. })));

    clock.advance(Duration::from_secs(1));
    let devs = e.check_devolution(clock.now()).unwrap();
    assert_eq!(devs.len(), 1);
    assert_eq!(devs[0].role, Role::SocLead);
    assert!(e.check_devolution(clock.now()).unwrap().is_empty(), "devolves once");

    e.execute_correction(&inc.id, &order(CorrectionKind::PowerOff), Role::SocLead).unwrap();
    assert_eq!(store.snapshot("m").unwrap().deployment.state, DeploymentStatus::PoweredOff);
    let applied = e.timeline(&inc.id).unwrap().into_iter().find(|t| t.kind == "policy_applied").unwrap();
    assert_eq!(applied.detail["authority"]["basis"], "emergency_devolution");
    let err = e.execute_correction(&inc.id, &order(CorrectionKind::Decommission), Role::SocLead).unwrap_err();
    assert!(matches!(err, IncidentError::Policy(PolicyError::UnauthorizedActor { .. })), "only listed kinds");
}

#[test]
fn acknowledged_escalation_never_devolves() {
    let (clock, _, e) = engine();
    let inc = manual(&e);
    e.escalate(&inc.id, Role::SocLead, Role::Ciso, false).unwrap();
    e.acknowledge(&inc.id, Role::Ciso).unwrap();
    clock.advance(Duration::from_secs(3600));
    assert!(e.check_devolution(clock.now()).unwrap().is_empty());
}

fn to_review(e: &IncidentEngine, id: &str) {
    e.transition(id, IncidentOp::BeginRemediation, Role::Ciso).unwrap();
    e.transition(id, IncidentOp::BeginRecovery, Role::Ciso).unwrap();
}

#[test]
fn redeploy_gate_errors_in_order() {
    let (_, store, e) = engine();
    let inc = manual(&e);
    e.execute_correction(&inc.id, &order(CorrectionKind::MarketRemoval), Role::Ciso).unwrap();
    e.execute_correction(&inc.id, &order(CorrectionKind::Moratorium), Role::Ciso).unwrap();
    let approvals = Approvals { roles: vec![Role::Ciso], external_signoff: None };

    assert!(matches!(e.approve_redeployment(&inc.id, None, &approvals, Role::Ciso), Err(IncidentError::ReviewMissing)));
    assert!(matches!(
        e.approve_redeployment(&inc.id, Some(approved_review()), &approvals, Role::Ciso),
        Err(IncidentError::IllegalState { .. })
    ));
    to_review(&e, &inc.id);
    let unapproved = AfterActionReview { approved: false, ..approved_review() };
    e.submit_review(&inc.id, unapproved, Role::Ciso).unwrap();
    assert!(matches!(
        e.approve_redeployment(&inc.id, None, &approvals, Role::Ciso),
        Err(IncidentError::ReviewNotApproved)
    ));
    let hollow = AfterActionReview { root_cause: String::new(), ..approved_review() };
    assert!(matches!(
        e.approve_redeployment(&inc.id, Some(hollow), &approvals, Role::Ciso),
        Err(IncidentError::InvalidReview(_))
    ));
    let low = Approvals { roles: vec![Role::SocLead], external_signoff: None };
    assert!(matches!(
        e.approve_redeployment(&inc.id, Some(approved_review()), &low, Role::SocLead),
        Err(IncidentError::InsufficientApprovers(_))
    ));
    assert!(matches!(
        e.approve_redeployment(&inc.id, Some(approved_review()), &approvals, Role::System),
        Err(IncidentError::Forbidden(Role::System))
    ));
    assert_eq!(store.snapshot("m").unwrap().deployment.state, DeploymentStatus::MarketRemoved);

    let out = e.approve_redeployment(&inc.id, Some(approved_review()), &approvals, Role::Ciso).unwrap();
    assert_eq!(out.state, DeploymentStatus::Active);
    assert_eq!(out.revoked.len(), 2);
    let snap = store.snapshot("m").unwrap();
    assert!(!snap.deployment.moratorium);
    assert_eq!(e.get(&inc.id).unwrap().state, IncidentState::Closed);
    assert!(matches!(
        e.approve_redeployment(&inc.id, None, &approvals, Role::Ciso),
        Err(IncidentError::IllegalState { .. })
    ));
}

#[test]
fn decommission_is_terminal_through_the_gate() {
    let (_, store, e) = engine();
    let inc = manual(&e);
    e.execute_correction(&inc.id, &order(CorrectionKind::Decommission), Role::Ceo).unwrap();
    to_review(&e, &inc.id);
    e.submit_review(&inc.id, approved_review(), Role::Ceo).unwrap();
    let approvals = Approvals { roles: vec![Role::Ceo], external_signoff: None };
    let err = e.approve_redeployment(&inc.id, None, &approvals, Role::Ceo).unwrap_err();
    assert!(matches!(err, IncidentError::Policy(PolicyError::TerminalState(_))));
    assert_eq!(store.snapshot("m").unwrap().deployment.state, DeploymentStatus::Decommissioned);
}

#[test]
fn external_signoff_required_when_configured() {
    let mut pb = base_playbook();
    pb["redeploy"]["external_signoff"] = json!(true);
    let (_, _, e) = engine_with(pb);
    let inc = manual(&e);
    e.execute_correction(&inc.id, &order(CorrectionKind::MarketRemoval), Role::Ciso).unwrap();
    to_review(&e, &inc.id);
    e.submit_review(&inc.id, approved_review(), Role::Ciso).unwrap();
    let no_ext = Approvals { roles: vec![Role::Ciso], external_signoff: None };
    assert!(matches!(
        e.approve_redeployment(&inc.id, None, &no_ext, Role::Ciso),
        Err(IncidentError::InsufficientApprovers(_))
    ));
    let ext = Approvals { roles: vec![Role::Ciso], external_signoff: Some("regulator-7".into()) };
    e.approve_redeployment(&inc.id, None, &ext, Role::Ciso).unwrap();
}

#[test]
fn close_requires_review() {
    let (_, _, e) = engine();
    let inc = manual(&e);
    assert!(matches!(
        e.transition(&inc.id, IncidentOp::Close, Role::Analyst),
        Err(IncidentError::IllegalState { .. })
    ));
    assert!(matches!(e.transition(&inc.id, IncidentOp::BeginAnalysis, Role::System), Err(IncidentError::Forbidden(_))));
}

#[test]
fn timeline_is_the_incident_audit_trail() {
    let (_, _, e) = engine();
    let inc = manual(&e);
    e.transition(&inc.id, IncidentOp::BeginAnalysis, Role::Analyst).unwrap();
    e.assess_severity(&inc.id, Severity::Critical, Role::Analyst).unwrap();
    let kinds: Vec<_> = e.timeline(&inc.id).unwrap().into_iter().map(|t| t.kind).collect();
    assert_eq!(kinds, ["incident_opened", "incident_transition", "severity_assessed"]);
    assert!(matches!(e.timeline("inc-9999"), Err(IncidentError::UnknownIncident(_))));
}

fn load_err(pb: serde_json::Value) -> PlaybookError {
    Playbook::load(&pb.to_string(), None).unwrap_err()
}

#[test]
fn playbook_unknown_key_is_parse_error() {
    let mut pb = base_playbook();
    pb["surprise"] = json!(1);
    assert_eq!(load_err(pb).code(), "ParseError");
    assert_eq!(Playbook::load("{", None).unwrap_err().code(), "ParseError");
}

#[test]
fn playbook_dangling_references() {
    let mut pb = base_playbook();
    pb["templates"][0]["trigger"] = json!("ghost");
    assert_eq!(load_err(pb).code(), "DanglingReference");

    let mut pb = base_playbook();
    pb["triggers"][0]["binding"]["template"] = json!("ghost");
    assert_eq!(load_err(pb).code(), "DanglingReference");

    let mut pb = base_playbook();
    pb["templates"][1] = json!({"id": "f", "kind": "OutputFilter", "params": {"pattern_set": "ghost"}});
    assert_eq!(load_err(pb).code(), "DanglingReference");

    let mut pb = base_playbook();
    pb["fallbacks"] = json!([{"principal_id": "ghost", "route": {"type": "non_ai_stub"}, "agreed_in_contract": true}]);
    let roster = [Principal::new("sc", Tier::SafetyCritical)];
    assert_eq!(Playbook::load(&pb.to_string(), Some(&roster)).unwrap_err().code(), "DanglingReference");
}

#[test]
fn playbook_grade_gate() {
    let mut pb = base_playbook();
    pb["triggers"][0]["grade"] = json!("Elevated");
    assert_eq!(load_err(pb).code(), "GradeGateViolation");

    let mut pb = base_playbook();
    pb["triggers"][0]["grade"] = json!("Elevated");
    pb["templates"][0]["kind"] = json!("ThrottlePrompts");
    pb["templates"][0]["params"] = json!({"cap": 100, "window_secs": 3600});
    Playbook::load(&pb.to_string(), None).unwrap();
}

#[test]
fn playbook_rejects_automatic_decommission() {
    let mut pb = base_playbook();
    pb["templates"][0]["kind"] = json!("Decommission");
    let err = load_err(pb);
    assert_ne!(err.code(), "ParseError", "{err}");
}

#[test]
fn playbook_chain_must_ascend() {
    let mut pb = base_playbook();
    pb["escalation"]["chain"] = json!([{"role": "CISO"}, {"role": "SOCLead"}]);
    assert_eq!(load_err(pb).code(), "Invalid");
}

#[test]
fn fallback_plans_only_for_safety_critical() {
    let mut pb = base_playbook();
    pb["fallbacks"] = json!([{"principal_id": "c1", "route": {"type": "non_ai_stub"}, "agreed_in_contract": true}]);
    let roster = [Principal::new("c1", Tier::Commercial)];
    assert_eq!(Playbook::load(&pb.to_string(), Some(&roster)).unwrap_err().code(), "Invalid");
}

proptest::proptest! {
    #[test]
    fn transitions_follow_the_table(ops in proptest::collection::vec(0usize..IncidentOp::ALL.len(), 1..40)) {
        let (_, _, e) = engine();
        let inc = manual(&e);
        let mut state = inc.state;
        for i in ops {
            let op = IncidentOp::ALL[i];
            let res = match op {
                IncidentOp::ExecuteCorrection => e.execute_correction(&inc.id, &order(CorrectionKind::FineTuneLockout), Role::SocLead).map(|_| ()),
                IncidentOp::SubmitReview => e.submit_review(&inc.id, approved_review(), Role::Ciso).map(|_| ()),
                IncidentOp::ApproveRedeployment => e
                    .approve_redeployment(&inc.id, None, &Approvals { roles: vec![Role::Ciso], external_signoff: None }, Role::Ciso)
                    .map(|_| ()),
                IncidentOp::AssessSeverity => e.assess_severity(&inc.id, Severity::Critical, Role::Analyst).map(|_| ()),
                IncidentOp::Escalate | IncidentOp::Acknowledge => continue,
                other => e.transition(&inc.id, other, Role::SocLead).map(|_| ()),
            };
            let now = e.get(&inc.id).unwrap().state;
            match res {
                Ok(()) => proptest::prop_assert_eq!(Some(now), next_state(state, op)),
                Err(_) => proptest::prop_assert_eq!(now, state),
            }
            state = now;
        }
    }
}
