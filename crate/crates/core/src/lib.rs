//! Enforcement gateway, runtime monitor and incident-response engine for
//! deployed models.

pub mod audit;
pub mod authority;
pub mod clock;
pub mod comms;
pub mod gateway;
pub mod incident;
pub mod monitor;
pub mod policy;
pub mod registry;
pub mod role;
pub mod scenario;
pub mod stack;
