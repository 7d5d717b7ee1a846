//! Layer-wise hybrid-parallelism planning for transformer training.
//!
//! Given a cluster profile and per-layer model profiles, [`search::optimize`]
//! picks a pipeline degree, a microbatch size and one parallel strategy per
//! layer (tensor/data degrees, ZeRO stage, sequence parallelism,
//! recomputation) minimizing predicted iteration time under the device
//! memory budget. [`pipesim`] replays a plan on a discrete-event 1F1B
//! schedule to cross-check the analytic estimate.

pub mod canon;
pub mod collectives;
pub mod costmodel;
pub mod error;
pub mod pipesim;
pub mod profiles;
pub mod report;
pub mod search;
pub mod strategy;

pub use error::{Error, Result};
pub use pipesim::{simulate, SimOptions, SimResult};
pub use profiles::{ClusterProfile, LayerProfile, ModelProfile, TrainingConfig};
pub use search::{optimize, Plan, SearchConfig};
pub use strategy::{ParallelStrategy, StrategyConstraints};
