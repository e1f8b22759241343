use serde::Serialize;

use super::pipeline::simulate_iteration;
use super::profiler::{profile, ProfilerFit};
use crate::config::Scenario;
use crate::error::{Error, Result};
use crate::scheduler::{Mode, Scheduler};

/// One row of the per-iteration trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub mode: Mode,
    pub prefill_tokens: u64,
    pub decode_tokens: u64,
    pub admitted: u64,
    pub finished: u64,
    pub preempted: u64,
    pub free_blocks: u64,
    pub io_time_s: f64,
    pub weight_io_time_s: f64,
    pub gpu_time_s: f64,
    pub cpu_time_s: f64,
    pub wall_time_s: f64,
    pub decode_tput: f64,
    pub prefill_tput: f64,
    pub gpu_util: f64,
    /// Start of this iteration on the run clock.
    pub start_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimSummary {
    pub sequences: u64,
    pub iterations: u64,
    pub generated_tokens: u64,
    pub prompt_tokens: u64,
    pub total_wall_time_s: f64,
    /// Generated tokens over total wall time.
    pub generation_throughput: f64,
    pub mean_gpu_utilization: f64,
    pub preemptions: u64,
    pub n_real: u64,
    pub mean_weight_io_time_s: f64,
    pub peak_resident_weight_bytes: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SimTrace {
    pub profiler: ProfilerFit,
    pub records: Vec<IterationRecord>,
    pub summary: SimSummary,
}

/// Runs the scheduler to completion, timing each iteration with the
/// pipeline model. `n_real` comes from the options when set, otherwise from
/// a seeded profiler run.
pub fn simulate_run(scenario: &Scenario, seed: u64) -> Result<SimTrace> {
    let hw = &scenario.hardware;
    let model = &scenario.model;
    let opts = &scenario.options;
    let mut fit = profile(hw, model, opts, seed)?;
    if let Some(n) = opts.n_real {
        fit.n_real = n;
    }
    let kv = &scenario.kv_cache;
    let mut sched = Scheduler::new(&scenario.workload, kv.num_blocks, kv.block_size, fit.n_real)?;

    let mut records = Vec::new();
    let mut clock = 0.0;
    let (mut gpu, mut weight_io, mut peak) = (0.0, 0.0, 0.0f64);
    let (mut generated, mut prompt, mut preemptions) = (0u64, 0u64, 0u64);
    while !sched.is_done() {
        if sched.iteration() >= opts.max_iterations {
            return Err(Error::Infeasible(format!(
                "no completion within {} iterations",
                opts.max_iterations
            )));
        }
        let plan = sched.step()?;
        let t = simulate_iteration(&plan, hw, model, opts)?;
        let rec = IterationRecord {
            iteration: plan.iteration,
            mode: plan.mode,
            prefill_tokens: plan.prefill_tokens(),
            decode_tokens: plan.decode_tokens(),
            admitted: plan.prefill.len() as u64,
            finished: plan.finished.len() as u64,
            preempted: plan.preempted.len() as u64,
            free_blocks: plan.free_blocks,
            io_time_s: t.io_time,
            weight_io_time_s: t.weight_io_time,
            gpu_time_s: t.gpu_time,
            cpu_time_s: t.cpu_time,
            wall_time_s: t.wall_time,
            decode_tput: t.decode_throughput,
            prefill_tput: t.prefill_throughput,
            gpu_util: t.gpu_utilization,
            start_s: clock,
        };
        clock += t.wall_time;
        gpu += t.gpu_time;
        weight_io += t.weight_io_time;
        peak = peak.max(t.peak_resident_bytes);
        generated += rec.decode_tokens + rec.admitted;
        prompt += rec.prefill_tokens;
        preemptions += rec.preempted;
        records.push(rec);
    }
    let iterations = records.len() as u64;
    let summary = SimSummary {
        sequences: scenario.workload.batch_size() as u64,
        iterations,
        generated_tokens: generated,
        prompt_tokens: prompt,
        total_wall_time_s: clock,
        generation_throughput: if clock > 0.0 {
            generated as f64 / clock
        } else {
            0.0
        },
        mean_gpu_utilization: if clock > 0.0 { gpu / clock } else { 0.0 },
        preemptions,
        n_real: fit.n_real,
        mean_weight_io_time_s: if iterations > 0 {
            weight_io / iterations as f64
        } else {
            0.0
        },
        peak_resident_weight_bytes: peak,
    };
    Ok(SimTrace {
        profiler: fit,
        records,
        summary,
    })
}

/// Per-iteration CSV with columns iteration, mode, prefill_tokens,
/// decode_tokens, finished, preempted, free_blocks, io_time_s, gpu_time_s,
/// cpu_time_s, wall_time_s, decode_tput, prefill_tput, gpu_util.
pub fn write_iteration_trace<W: std::io::Write>(w: W, records: &[IterationRecord]) -> Result<()> {
    let io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    let mut out = csv::Writer::from_writer(w);
    out.write_record([
        "iteration",
        "mode",
        "prefill_tokens",
        "decode_tokens",
        "finished",
        "preempted",
        "free_blocks",
        "io_time_s",
        "gpu_time_s",
        "cpu_time_s",
        "wall_time_s",
        "decode_tput",
        "prefill_tput",
        "gpu_util",
    ])
    .map_err(io)?;
    for r in records {
        out.write_record([
            r.iteration.to_string(),
            r.mode.as_str().to_string(),
            r.prefill_tokens.to_string(),
            r.decode_tokens.to_string(),
            r.finished.to_string(),
            r.preempted.to_string(),
            r.free_blocks.to_string(),
            r.io_time_s.to_string(),
            r.gpu_time_s.to_string(),
            r.cpu_time_s.to_string(),
            r.wall_time_s.to_string(),
            r.decode_tput.to_string(),
            r.prefill_tput.to_string(),
            r.gpu_util.to_string(),
        ])
        .map_err(io)?;
    }
    out.flush()?;
    Ok(())
}
