use std::collections::BTreeSet;
use std::io::Write as _;
use std::thread;

use serde_json::json;

use super::*;
use crate::clock::VirtualClock;

fn clock() -> Arc<VirtualClock> {
    Arc::new(VirtualClock::new(Timestamp(1_000)))
}

fn decision(n: u64) -> AuditEvent {
    AuditEvent::Decision {
        request_id: format!("req-{n:08}"),
        model_id: "m".into(),
        principal_id: "p".into(),
        session_id: "s".into(),
        outcome: "allow".into(),
        reason: None,
        transforms: vec![],
        policies: vec![],
        snapshot_version: 1,
        route: None,
        filtered: false,
    }
}

fn log_with(n: u64) -> AuditLog {
    let log = AuditLog::in_memory(clock());
    for i in 0..n {
        log.append(Role::System, None, &decision(i)).unwrap();
    }
    log
}

#[test]
fn genesis_links_to_zero_digest() {
    let log = log_with(2);
    let recs = log.records();
    assert_eq!(recs[0].seq, 1);
    assert_eq!(recs[0].hash_prev, "0".repeat(64));
    assert_eq!(recs[1].hash_prev, recs[0].digest);
    assert_eq!(recs[0].category, AuditCategory::Decision);
    log.verify().unwrap();
}

#[test]
fn digest_is_sha256_of_prev_and_body() {
    let log = log_with(1);
    let r = &log.records()[0];
    let body = serde_json::to_vec(&json!([r.seq, r.timestamp, r.category, r.actor, r.incident_id, r.payload])).unwrap();
    let mut h = Sha256::new();
    h.update([0u8; 32]);
    h.update(&body);
    assert_eq!(r.digest, hex::encode(h.finalize()));
}

#[test]
fn line_encoding_is_length_prefixed() {
    let log = log_with(1);
    let bytes = log.to_bytes();
    let text = String::from_utf8(bytes.clone()).unwrap();
    let (len, rest) = text.split_once(' ').unwrap();
    assert_eq!(len.parse::<usize>().unwrap(), rest.trim_end_matches('\n').len());
    assert!(rest.starts_with("{\"seq\":1,\"timestamp\":1000,\"category\":\"Decision\",\"actor\":\"System\""));
    assert_eq!(parse_log(&bytes).unwrap(), log.records());
}

#[test]
fn concurrent_appends_get_unique_contiguous_seqs() {
    let log = Arc::new(AuditLog::in_memory(clock()));
    let handles: Vec<_> = (0..8)
        .map(|t| {
            let log = log.clone();
            thread::spawn(move || (0..250).map(|i| log.append(Role::System, None, &decision(t * 1000 + i)).unwrap()).collect::<Vec<_>>())
        })
        .collect();
    let seqs: BTreeSet<u64> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
    assert_eq!(seqs.len(), 2000);
    assert_eq!(seqs.iter().copied().collect::<Vec<_>>(), (1..=2000).collect::<Vec<_>>());
    log.verify().unwrap();
}

#[test]
fn malformed_raw_payload_rejected() {
    let log = log_with(0);
    let err = log.append_raw(AuditCategory::Decision, Role::System, None, json!({"event": "nonsense"})).unwrap_err();
    assert!(matches!(err, AuditError::MalformedPayload(_)));
    let wrong = serde_json::to_value(decision(1)).unwrap();
    assert!(log.append_raw(AuditCategory::Alert, Role::System, None, wrong.clone()).is_err());
    assert!(log.is_empty());
    assert_eq!(log.append_raw(AuditCategory::Decision, Role::System, None, wrong).unwrap(), 1);
}

fn tamper_line(bytes: &[u8], seq: usize, edit: impl Fn(&mut AuditRecord)) -> Vec<u8> {
    let mut recs = parse_log(bytes).unwrap();
    edit(&mut recs[seq - 1]);
    recs.iter().flat_map(encode_record).collect()
}

#[test]
fn tamper_detected_at_exact_seq() {
    let bytes = log_with(10).to_bytes();
    for seq in 1..=10 {
        let bad = tamper_line(&bytes, seq, |r| r.payload["principal_id"] = json!("mallory"));
        match parse_log(&bad) {
            Err(AuditError::ChainBroken { seq: s, .. }) => assert_eq!(s, seq as u64),
            other => panic!("seq {seq}: {other:?}"),
        }
    }
}

#[test]
fn recomputed_digest_breaks_the_next_link() {
    let bytes = log_with(5).to_bytes();
    let mut recs = parse_log(&bytes).unwrap();
    recs[2].actor = Role::Ceo;
    let prev = decode_hex32(&recs[1].digest).unwrap();
    let r = &recs[2];
    let body = body_bytes(r.seq, r.timestamp, r.category, r.actor, &r.incident_id, &r.payload);
    recs[2].digest = hex::encode(chain_digest(&prev, &body));
    let bad: Vec<u8> = recs.iter().flat_map(encode_record).collect();
    assert!(matches!(parse_log(&bad), Err(AuditError::ChainBroken { seq: 4, .. })));
}

#[test]
fn digest_case_flip_detected() {
    let bytes = log_with(3).to_bytes();
    let bad = tamper_line(&bytes, 2, |r| r.digest = r.digest.to_uppercase());
    assert!(matches!(parse_log(&bad), Err(AuditError::ChainBroken { seq: 2, .. })));
}

#[test]
fn deleted_and_reordered_records_detected() {
    let recs = log_with(5).records();
    let mut dropped = recs.clone();
    dropped.remove(2);
    assert!(matches!(verify_chain(&dropped), Err(AuditError::ChainBroken { seq: 3, .. })));
    let mut swapped = recs;
    swapped.swap(1, 3);
    assert!(matches!(verify_chain(&swapped), Err(AuditError::ChainBroken { seq: 2, .. })));
}

#[test]
fn byte_flip_in_length_prefix_detected() {
    let mut bytes = log_with(3).to_bytes();
    let second = bytes.iter().position(|b| *b == b'\n').unwrap() + 1;
    bytes[second] = b'9';
    assert!(matches!(parse_log(&bytes), Err(AuditError::ChainBroken { seq: 2, .. })));
}

#[test]
fn torn_tail_is_an_error_for_readers() {
    let bytes = log_with(3).to_bytes();
    let cut = &bytes[..bytes.len() - 7];
    assert!(matches!(parse_log(cut), Err(AuditError::ChainBroken { seq: 3, .. })));
}

#[test]
fn file_log_survives_crash_mid_append() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("audit.log");
    {
        let log = AuditLog::open_file(&path, clock()).unwrap();
        for i in 0..4 {
            log.append(Role::System, None, &decision(i)).unwrap();
        }
    }
    let full = std::fs::read(&path).unwrap();
    // simulate a crash after half of a fifth record reached the disk
    let fifth = encode_record(&{
        let log = log_with(5);
        log.records()[4].clone()
    });
    let mut f = OpenOptions::new().append(true).open(&path).unwrap();
    f.write_all(&fifth[..fifth.len() / 2]).unwrap();
    drop(f);

    let log = AuditLog::open_file(&path, clock()).unwrap();
    assert_eq!(log.len(), 4);
    assert_eq!(std::fs::read(&path).unwrap(), full);
    assert_eq!(log.append(Role::System, None, &decision(99)).unwrap(), 5);
    drop(log);
    let reread = parse_log(&std::fs::read(&path).unwrap()).unwrap();
    assert_eq!(reread.len(), 5);
    assert_eq!(reread[4].payload["request_id"], "req-00000099");
}

#[test]
fn reopened_file_continues_chain() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("audit.log");
    AuditLog::open_file(&path, clock()).unwrap().append(Role::System, None, &decision(1)).unwrap();
    let log = AuditLog::open_file(&path, clock()).unwrap();
    log.append(Role::Analyst, Some("inc-0001"), &decision(2)).unwrap();
    drop(log);
    let recs = parse_log(&std::fs::read(&path).unwrap()).unwrap();
    assert_eq!(recs.len(), 2);
    assert_eq!(recs[1].hash_prev, recs[0].digest);
}

#[test]
fn tampered_file_refuses_to_open() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("audit.log");
    let bytes = log_with(4).to_bytes();
    std::fs::write(&path, tamper_line(&bytes, 2, |r| r.timestamp = Timestamp(5))).unwrap();
    assert!(matches!(AuditLog::open_file(&path, clock()), Err(AuditError::ChainBroken { seq: 2, .. })));
}

struct FailingSink {
    written: Arc<Mutex<Vec<u8>>>,
    fail_on: usize,
    calls: usize,
}

impl AuditSink for FailingSink {
    fn persist(&mut self, line: &[u8]) -> io::Result<()> {
        self.calls += 1;
        if self.calls == self.fail_on {
            return Err(io::Error::other("disk full"));
        }
        self.written.lock().extend_from_slice(line);
        Ok(())
    }
}

#[test]
fn failed_persist_leaves_no_record() {
    let written = Arc::new(Mutex::new(Vec::new()));
    let sink = FailingSink { written: written.clone(), fail_on: 2, calls: 0 };
    let log = AuditLog::with_sink(clock(), Box::new(sink));
    log.append(Role::System, None, &decision(1)).unwrap();
    assert!(matches!(log.append(Role::System, None, &decision(2)), Err(AuditError::StorageFailure(_))));
    assert_eq!(log.len(), 1);
    assert_eq!(log.append(Role::System, None, &decision(3)).unwrap(), 2);
    let recs = parse_log(&written.lock()).unwrap();
    assert_eq!(recs, log.records());
}

#[test]
fn query_filters_compose() {
    let c = clock();
    let log = AuditLog::in_memory(c.clone());
    log.append(Role::System, None, &decision(1)).unwrap();
    c.advance(std::time::Duration::from_secs(1));
    log.append(Role::Analyst, Some("inc-0001"), &AuditEvent::AlertLinked { alert_id: "a".into() }).unwrap();
    c.advance(std::time::Duration::from_secs(1));
    log.append(Role::System, Some("inc-0001"), &decision(2)).unwrap();

    let by_inc = AuditFilter { incident_id: Some("inc-0001".into()), ..Default::default() };
    assert_eq!(log.query(&by_inc).iter().map(|r| r.seq).collect::<Vec<_>>(), [2, 3]);
    let decisions = AuditFilter { category: Some(AuditCategory::Decision), ..Default::default() };
    assert_eq!(log.count(&decisions), 2);
    let window = AuditFilter { from: Some(Timestamp(2_000)), to: Some(Timestamp(2_000)), ..Default::default() };
    assert_eq!(log.query(&window).iter().map(|r| r.seq).collect::<Vec<_>>(), [2]);
    let both = AuditFilter { category: Some(AuditCategory::Decision), incident_id: Some("inc-0001".into()), ..Default::default() };
    assert_eq!(log.count(&both), 1);
    assert_eq!(log.get(0), None);
    assert_eq!(log.get(3).unwrap().seq, 3);
}

#[test]
fn payload_keys_are_sorted() {
    let log = log_with(1);
    let keys: Vec<_> = log.records()[0].payload.as_object().unwrap().keys().cloned().collect();
    let mut sorted = keys.clone();
    sorted.sort();
    assert_eq!(keys, sorted);
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]
    #[test]
    fn any_byte_change_is_located(n in 1u64..12, pick in 0usize..10_000, delta in 1u8..255) {
        let bytes = log_with(n).to_bytes();
        let pos = pick % bytes.len();
        let mut bad = bytes.clone();
        bad[pos] = bad[pos].wrapping_add(delta);
        let line = bytes[..pos].iter().filter(|b| **b == b'\n').count() as u64 + 1;
        match parse_log(&bad) {
            Err(AuditError::ChainBroken { seq, .. }) => proptest::prop_assert_eq!(seq, line),
            other => proptest::prop_assert!(false, "byte {pos}: {other:?}"),
        }
    }
}
