//! Grid traffic-signal control toolkit.
//!
//! - [`network`]: static grid topology, movements, phases and lane jurisdictions.
//! - [`sim`]: deterministic 1 s tick microscopic simulator.
//! - [`features`]: per-intersection observations and position encodings.
//! - [`rewards`]: distance-gap (IFDG), step-wise travel time and heuristic rewards.
//! - [`episode`]: decision loop that fills a reward ledger.
//! - [`controllers`]: classical controllers behind a name-keyed registry.
//! - [`neural`]: small reverse-mode tensor engine and the non-local policy/value network.
//! - [`learner`]: PPO-Clip training loop.
//! - [`harness`]: flow synthesis, run configuration, reports.

pub mod controllers;
pub mod episode;
pub mod error;
pub mod features;
pub mod harness;
pub mod learner;
pub mod network;
pub mod neural;
pub mod rewards;
pub mod scenario;
pub mod sim;

pub use error::{Result, TscError};
