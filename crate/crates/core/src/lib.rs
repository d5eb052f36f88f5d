//! Core of the goal-to-API alignment pipeline.
//!
//! Everything in this crate is pure and allocation-only: no filesystem, no
//! network, no clock. Stakeholder goals are elicited and decomposed through a
//! [`provider::ChatProvider`], mapped onto the endpoints of an
//! [`catalog::EndpointCatalog`], and summarized in an
//! [`alignment::AlignmentReport`]. The `seal` crate supplies IO, persistence,
//! the live provider, the CLI and the HTTP service.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod agent;
pub mod alignment;
pub mod catalog;
pub mod goal;
pub mod json;
pub mod prompt;
pub mod provider;
pub mod session;

pub use agent::{Limits, Mode, Pipeline, RunOutcome};
pub use alignment::{AlignmentReport, CallPlan, Coverage};
pub use catalog::{Endpoint, EndpointCatalog, EndpointKey, Verb};
pub use goal::{Actor, Goal, GoalId, GoalKind, GoalTree};
pub use provider::{ChatProvider, ChatRequest, ChatResponse, ReplayFixture, ReplayProvider};
pub use session::Session;
