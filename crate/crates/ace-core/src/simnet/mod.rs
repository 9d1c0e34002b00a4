//! Deterministic discrete-event substrate: virtual clock, seeded randomness,
//! links with bandwidth/delay/partitions, and event scheduling. Everything
//! else in the platform runs on top of this.

pub mod link;
pub mod queue;
pub mod rng;
pub mod time;

pub use link::{
    set_status_at, transmit, tx_micros, Direction, FlowClass, LinkId, LinkSpec, LinkStatus,
    LinkTable, SimWorld, TransmitError,
};
pub use queue::{run_until, run_until_idle, EventQueue};
pub use time::{ms, secs, Micros, SimTime};
