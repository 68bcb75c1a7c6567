//! Energy-aware spectrum access and power allocation for LAA small cells
//! coexisting with Wi-Fi: a slot-based simulator and the per-slot
//! drift-plus-penalty scheduler.

pub mod baselines;
pub mod config;
pub mod csma;
pub mod env;
pub mod harness;
pub mod model;
pub mod rates;
pub mod scheduler;
pub mod solver;

pub use config::{paper_defaults, ExperimentConfig};
pub use model::{Allocation, Dims, NetworkConfig, QueueVector, SlotState};
