//! Core of the edge-cloud collaboration platform: infrastructure registry,
//! topology-driven orchestration, per-node controller/agents, topic-bridged
//! messaging, a control/data-separated file service, and a reusable in-app
//! control framework — all running on a deterministic discrete-event network
//! simulation.

pub mod controller;
pub mod fileservice;
pub mod ids;
pub mod inapp;
pub mod infrastructure;
pub mod messaging;
pub mod orchestrator;
pub mod platform;
pub mod scenario;
pub mod simnet;
pub mod topology;
pub mod tracelog;

pub use ids::HierarchicalId;
pub use platform::{Actor, ClientId, Ctx, Platform};
