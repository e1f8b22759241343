//! Performance model and simulator for MoE inference with expert weights
//! streamed from CPU memory and attention run on the CPU.

pub mod config;
pub mod error;
pub mod scheduler;
pub mod sim;
pub mod stage1;
pub mod stage2;
pub mod workload;

pub use config::{
    load_scenario, load_scenario_with_overrides, HardwareProfile, KvCacheConfig, ModelConfig,
    Options, Scenario,
};
pub use error::{Error, Result};
pub use workload::{SequenceSpec, WorkloadSpec};
