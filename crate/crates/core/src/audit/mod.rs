//! Append-only, hash-chained audit log.
//!
//! On-disk format, one record per line:
//!
//! ```text
//! <len> <json>\n
//! ```
//!
//! `<len>` is the decimal byte length of `<json>`. The JSON object carries the
//! fields `seq, timestamp, category, actor, incident_id, payload, hash_prev,
//! digest` in that order, with object keys inside `payload` sorted. `digest`
//! is the hex SHA-256 of the previous record's raw 32-byte digest followed by
//! the canonical body bytes, i.e. the compact JSON array
//! `[seq, timestamp, category, actor, incident_id, payload]`. The genesis
//! `hash_prev` is 64 zeros.

mod event;
pub mod replay;

use std::fs::{File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::Path;
use std::sync::Arc;

use parking_lot::{Mutex, RwLock};
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use event::*;

use crate::clock::{Clock, Timestamp};
use crate::role::Role;

pub const GENESIS_DIGEST: [u8; 32] = [0u8; 32];

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("storage failure: {0}")]
    StorageFailure(#[from] io::Error),
    #[error("malformed payload: {0}")]
    MalformedPayload(String),
    #[error("chain broken at seq {seq}: {reason}")]
    ChainBroken { seq: u64, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AuditCategory {
    Decision,
    PolicyChange,
    Alert,
    IncidentEvent,
    Notification,
    FallbackRouting,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub seq: u64,
    pub timestamp: Timestamp,
    pub category: AuditCategory,
    pub actor: Role,
    pub incident_id: Option<String>,
    pub payload: Value,
    pub hash_prev: String,
    pub digest: String,
}

impl AuditRecord {
    pub fn event(&self) -> Result<AuditEvent, AuditError> {
        serde_json::from_value(self.payload.clone()).map_err(|e| AuditError::MalformedPayload(e.to_string()))
    }
}

/// Recursively sorts object keys.
pub fn canonical(v: &Value) -> Value {
    match v {
        Value::Object(map) => {
            let mut entries: Vec<_> = map.iter().collect();
            entries.sort_by(|a, b| a.0.cmp(b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k.clone(), canonical(v))).collect())
        }
        Value::Array(items) => Value::Array(items.iter().map(canonical).collect()),
        other => other.clone(),
    }
}

fn body_bytes(
    seq: u64,
    ts: Timestamp,
    category: AuditCategory,
    actor: Role,
    incident: &Option<String>,
    payload: &Value,
) -> Vec<u8> {
    let body = (seq, ts, category, actor, incident, payload);
    serde_json::to_vec(&body).expect("audit body serializes")
}

fn chain_digest(prev: &[u8; 32], body: &[u8]) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(prev);
    h.update(body);
    h.finalize().into()
}

/// Encodes one record as a log line including the trailing newline.
pub fn encode_record(rec: &AuditRecord) -> Vec<u8> {
    let json = serde_json::to_vec(rec).expect("audit record serializes");
    let mut line = format!("{} ", json.len()).into_bytes();
    line.extend_from_slice(&json);
    line.push(b'\n');
    line
}

fn broken(seq: u64, reason: impl Into<String>) -> AuditError {
    AuditError::ChainBroken { seq, reason: reason.into() }
}

fn decode_hex32(s: &str) -> Option<[u8; 32]> {
    let mut out = [0u8; 32];
    hex::decode_to_slice(s, &mut out).ok()?;
    Some(out)
}

/// Verifies one record against the running digest, returning its own digest.
fn verify_record(rec: &AuditRecord, expected_seq: u64, prev: &[u8; 32]) -> Result<[u8; 32], AuditError> {
    if rec.seq != expected_seq {
        return Err(broken(expected_seq, format!("expected seq {expected_seq}, found {}", rec.seq)));
    }
    if rec.hash_prev != hex::encode(prev) {
        return Err(broken(expected_seq, "hash_prev does not match previous digest"));
    }
    if canonical(&rec.payload) != rec.payload {
        return Err(broken(expected_seq, "payload is not canonical"));
    }
    let body = body_bytes(rec.seq, rec.timestamp, rec.category, rec.actor, &rec.incident_id, &rec.payload);
    let digest = chain_digest(prev, &body);
    // exact lowercase hex; a case flip is tampering too
    if rec.digest != hex::encode(digest) {
        return Err(broken(expected_seq, "digest mismatch"));
    }
    Ok(digest)
}

/// Verifies the whole chain from genesis.
pub fn verify_chain(records: &[AuditRecord]) -> Result<(), AuditError> {
    let mut prev = GENESIS_DIGEST;
    for (i, rec) in records.iter().enumerate() {
        prev = verify_record(rec, i as u64 + 1, &prev)?;
    }
    Ok(())
}

/// Parses and verifies a complete log. Any corruption is reported as
/// `ChainBroken` at the seq the damaged line should have carried.
pub fn parse_log(bytes: &[u8]) -> Result<Vec<AuditRecord>, AuditError> {
    let (records, rest) = parse_prefix(bytes)?;
    if !rest.is_empty() {
        return Err(broken(records.len() as u64 + 1, "truncated trailing record"));
    }
    Ok(records)
}

/// Parses complete lines, returning the records and any torn tail.
fn parse_prefix(bytes: &[u8]) -> Result<(Vec<AuditRecord>, &[u8]), AuditError> {
    let mut records = Vec::new();
    let mut prev = GENESIS_DIGEST;
    let mut rest = bytes;
    loop {
        let seq = records.len() as u64 + 1;
        let Some(nl) = rest.iter().position(|b| *b == b'\n') else {
            return Ok((records, rest));
        };
        let line = &rest[..nl];
        let sp = line.iter().position(|b| *b == b' ').ok_or_else(|| broken(seq, "missing length prefix"))?;
        let len_str = std::str::from_utf8(&line[..sp]).map_err(|_| broken(seq, "length prefix is not UTF-8"))?;
        if len_str.is_empty() || !len_str.bytes().all(|b| b.is_ascii_digit()) || (len_str.len() > 1 && len_str.starts_with('0')) {
            return Err(broken(seq, "bad length prefix"));
        }
        let len: usize = len_str.parse().map_err(|_| broken(seq, "bad length prefix"))?;
        let json = &line[sp + 1..];
        if json.len() != len {
            return Err(broken(seq, format!("length prefix {len} does not match {}", json.len())));
        }
        let rec: AuditRecord = serde_json::from_slice(json).map_err(|e| broken(seq, format!("bad record: {e}")))?;
        if encode_record(&rec) != rest[..=nl] {
            return Err(broken(seq, "record is not in canonical encoding"));
        }
        prev = verify_record(&rec, seq, &prev)?;
        records.push(rec);
        rest = &rest[nl + 1..];
    }
}

/// Durable destination for encoded records.
pub trait AuditSink: Send {
    /// Persists one encoded line. On error nothing must remain visible.
    fn persist(&mut self, line: &[u8]) -> io::Result<()>;
}

/// Appends to a file, flushing and syncing before acknowledging.
pub struct FileSink {
    file: File,
    offset: u64,
}

impl FileSink {
    pub fn new(file: File, offset: u64) -> Self {
        Self { file, offset }
    }
}

impl AuditSink for FileSink {
    fn persist(&mut self, line: &[u8]) -> io::Result<()> {
        let res = self.file.write_all(line).and_then(|_| self.file.sync_data());
        match res {
            Ok(()) => {
                self.offset += line.len() as u64;
                Ok(())
            }
            Err(e) => {
                // roll back a partial write
                let _ = self.file.set_len(self.offset);
                Err(e)
            }
        }
    }
}

/// Filter for [`AuditLog::query`]. Empty fields match everything.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AuditFilter {
    pub category: Option<AuditCategory>,
    pub from: Option<Timestamp>,
    pub to: Option<Timestamp>,
    pub incident_id: Option<String>,
}

impl AuditFilter {
    pub fn matches(&self, r: &AuditRecord) -> bool {
        self.category.is_none_or(|c| c == r.category)
            && self.from.is_none_or(|t| r.timestamp >= t)
            && self.to.is_none_or(|t| r.timestamp <= t)
            && self.incident_id.as_ref().is_none_or(|i| r.incident_id.as_ref() == Some(i))
    }
}

struct Appender {
    last_digest: [u8; 32],
    sink: Option<Box<dyn AuditSink>>,
}

/// The audit log. Appends are serialized; readers never block on the sink.
pub struct AuditLog {
    clock: Arc<dyn Clock>,
    appender: Mutex<Appender>,
    records: RwLock<Vec<AuditRecord>>,
}

impl AuditLog {
    pub fn in_memory(clock: Arc<dyn Clock>) -> Self {
        Self::with_parts(clock, Vec::new(), GENESIS_DIGEST, None)
    }

    pub fn with_sink(clock: Arc<dyn Clock>, sink: Box<dyn AuditSink>) -> Self {
        Self::with_parts(clock, Vec::new(), GENESIS_DIGEST, Some(sink))
    }

    fn with_parts(
        clock: Arc<dyn Clock>,
        records: Vec<AuditRecord>,
        last_digest: [u8; 32],
        sink: Option<Box<dyn AuditSink>>,
    ) -> Self {
        Self {
            clock,
            appender: Mutex::new(Appender { last_digest, sink }),
            records: RwLock::new(records),
        }
    }

    /// Opens (or creates) a file-backed log, dropping a torn trailing record
    /// left by a crash mid-append.
    pub fn open_file(path: &Path, clock: Arc<dyn Clock>) -> Result<Self, AuditError> {
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let (records, tail) = parse_prefix(&bytes)?;
        let good = (bytes.len() - tail.len()) as u64;
        if !tail.is_empty() {
            file.set_len(good)?;
        }
        let last = records.last().and_then(|r| decode_hex32(&r.digest)).unwrap_or(GENESIS_DIGEST);
        Ok(Self::with_parts(clock, records, last, Some(Box::new(FileSink::new(file, good)))))
    }

    pub fn append(&self, actor: Role, incident_id: Option<&str>, event: &AuditEvent) -> Result<u64, AuditError> {
        let payload = serde_json::to_value(event).map_err(|e| AuditError::MalformedPayload(e.to_string()))?;
        self.append_value(event.category(), actor, incident_id.map(str::to_owned), payload)
    }

    /// Appends an untyped payload after checking it parses as an event of
    /// `category`.
    pub fn append_raw(
        &self,
        category: AuditCategory,
        actor: Role,
        incident_id: Option<&str>,
        payload: Value,
    ) -> Result<u64, AuditError> {
        let event: AuditEvent =
            serde_json::from_value(payload.clone()).map_err(|e| AuditError::MalformedPayload(e.to_string()))?;
        if event.category() != category {
            return Err(AuditError::MalformedPayload(format!(
                "payload is a {:?} event, not {category:?}",
                event.category()
            )));
        }
        self.append_value(category, actor, incident_id.map(str::to_owned), payload)
    }

    fn append_value(
        &self,
        category: AuditCategory,
        actor: Role,
        incident_id: Option<String>,
        payload: Value,
    ) -> Result<u64, AuditError> {
        let payload = canonical(&payload);
        let mut app = self.appender.lock();
        let seq = self.records.read().len() as u64 + 1;
        let timestamp = self.clock.now();
        let body = body_bytes(seq, timestamp, category, actor, &incident_id, &payload);
        let digest = chain_digest(&app.last_digest, &body);
        let rec = AuditRecord {
            seq,
            timestamp,
            category,
            actor,
            incident_id,
            payload,
            hash_prev: hex::encode(app.last_digest),
            digest: hex::encode(digest),
        };
        if let Some(sink) = app.sink.as_mut() {
            sink.persist(&encode_record(&rec))?;
        }
        app.last_digest = digest;
        self.records.write().push(rec);
        Ok(seq)
    }

    pub fn len(&self) -> usize {
        self.records.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn records(&self) -> Vec<AuditRecord> {
        self.records.read().clone()
    }

    pub fn get(&self, seq: u64) -> Option<AuditRecord> {
        let idx = usize::try_from(seq.checked_sub(1)?).ok()?;
        self.records.read().get(idx).cloned()
    }

    pub fn query(&self, filter: &AuditFilter) -> Vec<AuditRecord> {
        self.records.read().iter().filter(|r| filter.matches(r)).cloned().collect()
    }

    pub fn count(&self, filter: &AuditFilter) -> usize {
        self.records.read().iter().filter(|r| filter.matches(r)).count()
    }

    /// The full log in its on-disk encoding.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.records.read().iter().flat_map(encode_record).collect()
    }

    pub fn verify(&self) -> Result<(), AuditError> {
        verify_chain(&self.records.read())
    }
}

#[cfg(test)]
mod tests;
