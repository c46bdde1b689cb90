//! The `deployguard` command line.
//!
//! Exit codes: 0 success, 1 a scenario assertion failed, 2 invalid input,
//! 3 audit integrity failure, 4 I/O or runtime failure.

use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use clap::{Parser, Subcommand};
use deployguard_core::audit::replay::replay;
use deployguard_core::audit::{parse_log, AuditError};
use deployguard_core::clock::SystemClock;
use deployguard_core::incident::Playbook;
use deployguard_core::scenario::{run, RunOptions, Scenario, ScenarioError};
use deployguard_core::stack::{Stack, StackConfig};
use serde_json::{json, Value};

use crate::api::{router, AppState};
use crate::config::{ServerConfig, Sessions};

pub const EXIT_OK: u8 = 0;
pub const EXIT_FAILED: u8 = 1;
pub const EXIT_INVALID: u8 = 2;
pub const EXIT_INTEGRITY: u8 = 3;
pub const EXIT_IO: u8 = 4;

#[derive(Debug, Parser)]
#[command(name = "deployguard", version, about = "Deployment-correction gateway, monitor and incident engine")]
pub struct Cli {
    /// Overrides the seed of a scenario or of a served stack.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Writes a machine-readable report here.
    #[arg(long, global = true, value_name = "PATH")]
    pub json_report: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Runs a scenario; exits 0 iff every assertion passes.
    Run {
        scenario: PathBuf,
        /// Persists the audit log to this file instead of keeping it in memory.
        #[arg(long, value_name = "PATH")]
        audit_log: Option<PathBuf>,
    },
    /// Serves the data plane and control API over HTTP.
    Serve {
        #[arg(long)]
        playbook: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        listen: SocketAddr,
        /// Deployments, principals and tokens; development defaults if absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        audit_log: Option<PathBuf>,
    },
    /// Verifies an audit log's hash chain and reconstructs the state it records.
    Replay { log: PathBuf },
    /// Checks playbook or scenario files without running anything.
    Validate {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

/// Where command output goes; tests capture both streams.
pub struct Io<'a> {
    pub out: &'a mut dyn Write,
    pub err: &'a mut dyn Write,
}

struct Failure {
    exit: u8,
    code: String,
    message: String,
    details: Value,
}

impl Failure {
    fn new(exit: u8, code: &str, message: impl Into<String>) -> Self {
        Self { exit, code: code.into(), message: message.into(), details: json!({}) }
    }
}

fn audit_failure(e: &AuditError) -> Failure {
    match e {
        AuditError::ChainBroken { seq, reason } => Failure {
            exit: EXIT_INTEGRITY,
            code: "ChainBroken".into(),
            message: format!("ChainBroken({seq}): {reason}"),
            details: json!({"seq": seq}),
        },
        AuditError::MalformedPayload(m) => Failure::new(EXIT_INTEGRITY, "MalformedPayload", m.clone()),
        AuditError::StorageFailure(io) => Failure::new(EXIT_IO, "StorageFailure", io.to_string()),
    }
}

fn scenario_failure(e: &ScenarioError) -> Failure {
    match e {
        ScenarioError::Invalid(_) => Failure::new(EXIT_INVALID, "ScenarioInvalid", e.to_string()),
        ScenarioError::StackInit(_) => Failure::new(EXIT_INVALID, "StackInitFailure", e.to_string()),
    }
}

fn write_report(path: &Path, doc: &Value) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(doc).expect("report serializes");
    std::fs::write(path, text + "\n")
        .map_err(|e| Failure::new(EXIT_IO, "StorageFailure", format!("{}: {e}", path.display())))
}

pub fn execute(cli: Cli, io: Io<'_>) -> u8 {
    let report = cli.json_report.clone();
    let result = match cli.command {
        Command::Run { scenario, audit_log } => cmd_run(&scenario, cli.seed, audit_log, report.as_deref(), io.out),
        Command::Serve { playbook, listen, config, audit_log } => {
            cmd_serve(&playbook, listen, config.as_deref(), audit_log, cli.seed, io.out)
        }
        Command::Replay { log } => cmd_replay(&log, report.as_deref(), io.out),
        Command::Validate { files } => cmd_validate(&files, report.as_deref(), io.out),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            let _ = writeln!(io.err, "error: {}", f.message);
            let _ = writeln!(io.err, "{}", json!({"code": f.code, "message": f.message, "details": f.details}));
            if let Some(p) = &report {
                let _ = write_report(p, &json!({"ok": false, "code": f.code, "message": f.message, "details": f.details}));
            }
            f.exit
        }
    }
}

fn cmd_run(
    path: &Path,
    seed: Option<u64>,
    audit_log: Option<PathBuf>,
    report_path: Option<&Path>,
    out: &mut dyn Write,
) -> Result<u8, Failure> {
    let (scenario, playbook) = Scenario::load(path).map_err(|e| scenario_failure(&e))?;
    let done = run(&scenario, playbook, &RunOptions { seed, audit_path: audit_log }).map_err(|e| scenario_failure(&e))?;
    let report = &done.report;
    for c in &report.checks {
        if c.passed {
            let _ = writeln!(out, "PASS {}", c.name);
        } else {
            let _ = writeln!(out, "FAIL {}: {}", c.name, c.detail);
        }
    }
    let failed = report.failures().count();
    let _ = writeln!(
        out,
        "{}: {} checks, {} failed, {} requests, {} audit records",
        report.scenario,
        report.checks.len(),
        failed,
        report.requests_handled,
        report.audit.records
    );
    if let Some(p) = report_path {
        std::fs::write(p, report.to_json() + "\n")
            .map_err(|e| Failure::new(EXIT_IO, "StorageFailure", format!("{}: {e}", p.display())))?;
    }
    Ok(if report.passed { EXIT_OK } else { EXIT_FAILED })
}

fn cmd_replay(path: &Path, report_path: Option<&Path>, out: &mut dyn Write) -> Result<u8, Failure> {
    let bytes =
        std::fs::read(path).map_err(|e| Failure::new(EXIT_IO, "StorageFailure", format!("{}: {e}", path.display())))?;
    let records = parse_log(&bytes).map_err(|e| audit_failure(&e))?;
    let state = replay(&records).map_err(|e| audit_failure(&e))?;
    let head = records.last().map(|r| r.digest.clone()).unwrap_or_default();
    let _ = writeln!(out, "chain ok: {} records, head {head}", records.len());
    for (model, snap) in &state.deployments {
        let _ = writeln!(
            out,
            "{model}: {:?} version {} moratorium {} ({} active corrections)",
            snap.deployment.state,
            snap.deployment.version,
            snap.deployment.moratorium,
            snap.active().count()
        );
    }
    for (id, inc) in &state.incidents {
        let _ = writeln!(out, "{id}: {:?} {:?}", inc.state, inc.severity);
    }
    if let Some(p) = report_path {
        write_report(p, &json!({"ok": true, "records": records.len(), "head_digest": head, "state": state}))?;
    }
    Ok(EXIT_OK)
}

enum FileKind {
    Playbook,
    Scenario,
}

fn kind_of(path: &Path, text: &str) -> FileKind {
    match path.extension().and_then(|e| e.to_str()) {
        Some("playbook") => FileKind::Playbook,
        Some("scenario") => FileKind::Scenario,
        _ => match serde_json::from_str::<Value>(text) {
            Ok(v) if v.get("steps").is_some() || v.get("deployments").is_some() => FileKind::Scenario,
            _ => FileKind::Playbook,
        },
    }
}

fn validate_one(path: &Path) -> Result<&'static str, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::new(EXIT_IO, "StorageFailure", format!("{}: {e}", path.display())))?;
    match kind_of(path, &text) {
        FileKind::Playbook => {
            Playbook::load(&text, None).map_err(|e| Failure::new(EXIT_INVALID, e.code(), e.to_string()))?;
            Ok("playbook")
        }
        FileKind::Scenario => {
            Scenario::load(path).map_err(|e| scenario_failure(&e))?;
            Ok("scenario")
        }
    }
}

fn cmd_validate(files: &[PathBuf], report_path: Option<&Path>, out: &mut dyn Write) -> Result<u8, Failure> {
    let mut results = Vec::new();
    let mut first: Option<Failure> = None;
    for f in files {
        match validate_one(f) {
            Ok(kind) => {
                let _ = writeln!(out, "ok {} ({kind})", f.display());
                results.push(json!({"file": f, "ok": true, "kind": kind}));
            }
            Err(e) => {
                let _ = writeln!(out, "invalid {}: {}", f.display(), e.message);
                results.push(json!({"file": f, "ok": false, "code": e.code, "message": e.message}));
                first.get_or_insert(e);
            }
        }
    }
    if let Some(p) = report_path {
        write_report(p, &json!({"ok": first.is_none(), "files": results}))?;
    }
    match first {
        None => Ok(EXIT_OK),
        Some(f) => Err(Failure { details: json!({"files": results}), ..f }),
    }
}

fn cmd_serve(
    playbook: &Path,
    listen: SocketAddr,
    config: Option<&Path>,
    audit_log: Option<PathBuf>,
    seed: Option<u64>,
    out: &mut dyn Write,
) -> Result<u8, Failure> {
    let cfg = match config {
        Some(p) => ServerConfig::load(p).map_err(|e| Failure::new(EXIT_INVALID, "ConfigInvalid", e.to_string()))?,
        None => {
            let _ = writeln!(out, "no --config given; using development tokens (dev-analyst, dev-soclead, dev-ciso, dev-ceo)");
            ServerConfig::development()
        }
    };
    let text = std::fs::read_to_string(playbook)
        .map_err(|e| Failure::new(EXIT_IO, "StorageFailure", format!("{}: {e}", playbook.display())))?;
    let pb = Playbook::load(&text, Some(&cfg.principals)).map_err(|e| Failure::new(EXIT_INVALID, e.code(), e.to_string()))?;
    let tick = Duration::from_secs(pb.monitor.tick_secs);
    let stack = Stack::new(
        Arc::new(SystemClock),
        StackConfig {
            seed: seed.unwrap_or(cfg.seed),
            playbook: pb,
            deployments: cfg.deployments.clone(),
            principals: cfg.principals.clone(),
            audit_path: audit_log.or(cfg.audit_log.clone()),
        },
    )
    .map_err(|e| Failure::new(EXIT_INVALID, "StackInitFailure", e.to_string()))?;
    let state = AppState::new(Arc::new(stack), Sessions::new(&cfg.tokens));

    let rt = tokio::runtime::Runtime::new().map_err(|e| Failure::new(EXIT_IO, "RuntimeFailure", e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(listen)
            .await
            .map_err(|e| Failure::new(EXIT_IO, "BindFailure", format!("{listen}: {e}")))?;
        let addr = listener.local_addr().map_err(|e| Failure::new(EXIT_IO, "BindFailure", e.to_string()))?;
        let _ = writeln!(out, "listening on http://{addr}");
        let _ = out.flush();

        let ticker = state.stack.clone();
        tokio::spawn(async move {
            let mut every = tokio::time::interval(tick);
            every.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
            loop {
                every.tick().await;
                let s = ticker.clone();
                match tokio::task::spawn_blocking(move || s.tick()).await {
                    Ok(Ok(r)) if !r.fired.is_empty() => {
                        tracing::info!(fired = r.fired.len(), devolutions = r.devolutions.len(), "monitor tick")
                    }
                    Ok(Ok(_)) => {}
                    Ok(Err(e)) => tracing::error!(code = e.code(), "monitor tick failed: {e}"),
                    Err(e) => tracing::error!("monitor tick panicked: {e}"),
                }
            }
        });

        axum::serve(listener, router(state))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| Failure::new(EXIT_IO, "ServeFailure", e.to_string()))?;
        Ok(EXIT_OK)
    })
}
