//! Discrete-event simulation of the offloaded inference pipeline: weight
//! streaming through a packetized data mover, GPU GEMM stages interleaved
//! with CPU decode attention over two token partitions, and memory
//! controller contention between attention and DMA.

pub mod contention;
pub mod pipeline;
pub mod profiler;
pub mod run;

pub use contention::{contended_io_bandwidth, cpu_kv_read_rate};
pub use pipeline::{
    partition_plan, phase_times, simulate_iteration, IterationTiming, Partition, PhaseName,
    StageTiming,
};
pub use profiler::{profile, profiler_fit, synthesize_profile_samples, ProfilerFit};
pub use run::{simulate_run, write_iteration_trace, IterationRecord, SimSummary, SimTrace};
