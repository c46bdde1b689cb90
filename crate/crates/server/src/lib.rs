//! HTTP control plane, data plane and command-line harness around the
//! deployguard stack.

pub mod api;
pub mod cli;
pub mod config;
