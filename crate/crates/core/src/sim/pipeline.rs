//! One inference iteration as a task graph on four resources: GPU, CPU, the
//! host-to-device link (weights and attention results) and the
//! device-to-host link (fresh QKV).
//!
//! Layer `i` splits into GPU task A (QKV projection), the CPU decode
//! attention, and GPU task B (output projection and experts). Tokens are
//! split into partitions α and β so the CPU attends one partition while the
//! GPU runs the other. GPU order is
//!
//! ```text
//! GA0(α) GA0(β) [GB0+GA1](α) [GB0+GA1](β) ... GB_{N-1}(α) GB_{N-1}(β)
//! ```
//!
//! and each fused stage waits for its partition's attention result. Weights
//! arrive as units matching that grouping: QKV of layer 0, then the rest of
//! layer `i` with QKV of layer `i+1`, then the tail of the last layer. Units
//! stream in packets through a FIFO mover into a buffer of two layers;
//! attention results jump the queue at packet boundaries.

use std::collections::VecDeque;

use serde::Serialize;

use super::contention::{contended_io_bandwidth, cpu_kv_read_rate};
use crate::config::{HardwareProfile, ModelConfig, Options};
use crate::error::{Error, Result};
use crate::scheduler::IterationPlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum PhaseName {
    Alpha,
    Beta,
}

/// Work assigned to one of the two pipeline partitions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Partition {
    pub decode_seqs: u64,
    pub prefill_tokens: u64,
    /// KV tokens the CPU attends per layer for this partition's decodes.
    pub kv_tokens: u64,
}

impl Partition {
    pub fn tokens(&self) -> u64 {
        self.decode_seqs + self.prefill_tokens
    }
}

/// Splits a plan into α and β. Each class is sorted by size and dealt
/// alternately, so counts per class differ by at most one.
pub fn partition_plan(plan: &IterationPlan) -> [Partition; 2] {
    let mut parts = [Partition::default(); 2];
    let mut ctx: Vec<u64> = plan.decode.iter().map(|d| d.context_len).collect();
    ctx.sort_unstable_by(|a, b| b.cmp(a));
    for (i, c) in ctx.into_iter().enumerate() {
        let p = &mut parts[i % 2];
        p.decode_seqs += 1;
        p.kv_tokens += c;
    }
    let mut pre: Vec<u64> = plan.prefill.iter().map(|e| e.tokens).collect();
    pre.sort_unstable_by(|a, b| b.cmp(a));
    let start = usize::from(parts[0].tokens() > parts[1].tokens());
    for (i, n) in pre.into_iter().enumerate() {
        parts[(start + i) % 2].prefill_tokens += n;
    }
    parts
}

/// Uncontended per-layer cost of one partition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StageTiming {
    pub layer: usize,
    pub phase: PhaseName,
    pub gpu_time: f64,
    pub cpu_attn_time: f64,
    /// Fresh QKV down plus attention results up, bytes.
    pub sync_bytes: f64,
    pub sync_transfer_time: f64,
    /// One layer of weights at full link rate, shared by both phases.
    pub weight_io_time: f64,
}

fn qkv_bytes_per_token(model: &ModelConfig) -> f64 {
    let d = model.hidden_dim as f64;
    (d + 2.0 * d / model.gqa_group as f64) * model.dtype_bytes as f64
}

fn result_bytes_per_token(model: &ModelConfig) -> f64 {
    (model.hidden_dim * model.dtype_bytes) as f64
}

pub fn phase_times(
    part: &Partition,
    hw: &HardwareProfile,
    model: &ModelConfig,
    layer: usize,
    phase: PhaseName,
) -> StageTiming {
    let n = part.tokens() as f64;
    let sync_bytes =
        n * qkv_bytes_per_token(model) + part.decode_seqs as f64 * result_bytes_per_token(model);
    StageTiming {
        layer,
        phase,
        gpu_time: n * model.flops_per_token_layer() / hw.gpu_flops,
        cpu_attn_time: part.kv_tokens as f64 / hw.cpu_attn_throughput,
        sync_bytes,
        sync_transfer_time: sync_bytes / hw.io_bandwidth,
        weight_io_time: model.layer_weight_bytes() / hw.io_bandwidth,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationTiming {
    pub iteration: u64,
    /// Host-to-device link busy time, weights and results.
    pub io_time: f64,
    pub weight_io_time: f64,
    pub d2h_time: f64,
    pub gpu_time: f64,
    pub cpu_time: f64,
    pub wall_time: f64,
    pub decode_throughput: f64,
    pub prefill_throughput: f64,
    pub gpu_utilization: f64,
    pub weight_bytes: f64,
    pub sync_bytes: f64,
    pub peak_resident_bytes: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Res {
    Gpu,
    Cpu,
    D2h,
    H2d,
}

#[derive(Debug, Clone)]
struct Task {
    res: Res,
    /// Seconds on GPU/CPU, bytes on links.
    work: f64,
    dep: Option<usize>,
    unit: Option<usize>,
    frees: Option<usize>,
    done: bool,
}

#[derive(Debug, Clone, Copy)]
enum H2dJob {
    Sync(usize),
    Packet { unit: usize, bytes: f64 },
}

struct Graph {
    tasks: Vec<Task>,
    dependents: Vec<Vec<usize>>,
    gpu_order: Vec<usize>,
    cpu_order: Vec<usize>,
    units: Vec<f64>,
}

fn build_graph(parts: &[Partition; 2], hw: &HardwareProfile, model: &ModelConfig) -> Graph {
    let layers = model.num_layers as usize;
    let f_ga = model.flops_ga_per_token_layer() / hw.gpu_flops;
    let f_gb = model.flops_gb_per_token_layer() / hw.gpu_flops;
    let qkv_tok = qkv_bytes_per_token(model);
    let res_tok = result_bytes_per_token(model);

    let mut tasks: Vec<Task> = Vec::with_capacity(layers * 8 + 2);
    let mut push = |res, work, dep, unit, frees| {
        tasks.push(Task {
            res,
            work,
            dep,
            unit,
            frees,
            done: false,
        });
        tasks.len() - 1
    };
    let mut gpu_order = Vec::new();
    let mut cpu_order = Vec::new();
    let mut producer = [0usize; 2];
    for x in 0..2 {
        let n = parts[x].tokens() as f64;
        let id = push(Res::Gpu, n * f_ga, None, Some(0), (x == 1).then_some(0));
        gpu_order.push(id);
        producer[x] = id;
    }
    for i in 0..layers {
        let mut result = [0usize; 2];
        for x in 0..2 {
            let p = &parts[x];
            let o = push(
                Res::D2h,
                p.tokens() as f64 * qkv_tok,
                Some(producer[x]),
                None,
                None,
            );
            let c = push(
                Res::Cpu,
                p.kv_tokens as f64 / hw.cpu_attn_throughput,
                Some(o),
                None,
                None,
            );
            cpu_order.push(c);
            result[x] = push(
                Res::H2d,
                p.decode_seqs as f64 * res_tok,
                Some(c),
                None,
                None,
            );
        }
        let per_token = if i + 1 < layers { f_gb + f_ga } else { f_gb };
        for x in 0..2 {
            let n = parts[x].tokens() as f64;
            let g = push(
                Res::Gpu,
                n * per_token,
                Some(result[x]),
                Some(i + 1),
                (x == 1).then_some(i + 1),
            );
            gpu_order.push(g);
            producer[x] = g;
        }
    }

    let mut dependents = vec![Vec::new(); tasks.len()];
    for (id, t) in tasks.iter().enumerate() {
        if let Some(d) = t.dep {
            dependents[d].push(id);
        }
    }

    let layer = model.layer_weight_bytes();
    let qkv = model.qkv_weight_bytes();
    let extra = model.extra_weight_bytes / 2.0;
    let mut units = Vec::with_capacity(layers + 1);
    units.push(qkv + extra);
    units.extend(std::iter::repeat_n(layer, layers - 1));
    units.push(layer - qkv + extra);

    Graph {
        tasks,
        dependents,
        gpu_order,
        cpu_order,
        units,
    }
}

/// Packetized FIFO weight stream into a bounded buffer.
#[derive(Debug, Clone)]
pub struct DataMover {
    pub packet_bytes: f64,
    pub capacity: f64,
    units: Vec<f64>,
    next_unit: usize,
    issued: f64,
    received: Vec<f64>,
    complete: Vec<bool>,
    pub resident: f64,
    pub peak_resident: f64,
}

impl DataMover {
    pub fn new(units: Vec<f64>, packet_bytes: f64, capacity: f64) -> Self {
        let n = units.len();
        DataMover {
            packet_bytes: packet_bytes.min(capacity),
            capacity,
            units,
            next_unit: 0,
            issued: 0.0,
            received: vec![0.0; n],
            complete: vec![false; n],
            resident: 0.0,
            peak_resident: 0.0,
        }
    }

    /// Next packet if the buffer has room for it.
    fn issue(&mut self) -> Option<(usize, f64)> {
        let u = self.next_unit;
        if u >= self.units.len() {
            return None;
        }
        let size = self.packet_bytes.min(self.units[u] - self.issued);
        if self.resident + size > self.capacity * (1.0 + 1e-12) {
            return None;
        }
        self.resident += size;
        self.peak_resident = self.peak_resident.max(self.resident);
        self.issued += size;
        if self.issued >= self.units[u] * (1.0 - 1e-12) {
            self.next_unit += 1;
            self.issued = 0.0;
        }
        Some((u, size))
    }

    fn land(&mut self, unit: usize, bytes: f64) {
        self.received[unit] += bytes;
        if self.received[unit] >= self.units[unit] * (1.0 - 1e-12) {
            self.complete[unit] = true;
        }
    }

    fn release(&mut self, unit: usize) {
        self.resident = (self.resident - self.units[unit]).max(0.0);
    }

    pub fn is_complete(&self, unit: usize) -> bool {
        self.complete[unit]
    }
}

/// Event-driven run of one iteration for explicit partitions.
pub fn simulate_partitions(
    parts: &[Partition; 2],
    hw: &HardwareProfile,
    model: &ModelConfig,
    options: &Options,
) -> Result<IterationTiming> {
    let mut g = build_graph(parts, hw, model);
    let capacity = model.derived().weight_buffer_bytes;
    let mut mover = DataMover::new(g.units.clone(), options.packet_bytes, capacity);
    let contended = if options.contention {
        contended_io_bandwidth(hw, cpu_kv_read_rate(hw, model))
    } else {
        hw.io_bandwidth
    };

    let mut gpu_ptr = 0;
    let mut cpu_ptr = 0;
    let mut gpu: Option<(usize, f64)> = None;
    let mut cpu: Option<(usize, f64)> = None;
    let mut d2h: Option<(usize, f64)> = None;
    let mut h2d: Option<(H2dJob, f64)> = None;
    let mut d2h_ready = VecDeque::new();
    let mut h2d_ready = VecDeque::new();

    let mut t = 0.0;
    let (mut io_time, mut weight_io_time, mut d2h_time) = (0.0, 0.0, 0.0);
    let (mut gpu_time, mut cpu_time) = (0.0, 0.0);
    let (mut weight_bytes, mut sync_bytes) = (0.0, 0.0);

    // Marks a task finished and queues link tasks it unblocks.
    fn finish(
        id: usize,
        g: &mut Graph,
        mover: &mut DataMover,
        d2h_ready: &mut VecDeque<usize>,
        h2d_ready: &mut VecDeque<usize>,
    ) {
        g.tasks[id].done = true;
        if let Some(u) = g.tasks[id].frees {
            mover.release(u);
        }
        for &d in &g.dependents[id] {
            match g.tasks[d].res {
                Res::D2h => d2h_ready.push_back(d),
                Res::H2d => h2d_ready.push_back(d),
                _ => {}
            }
        }
    }

    loop {
        let mut started = true;
        while started {
            started = false;
            if gpu.is_none() && gpu_ptr < g.gpu_order.len() {
                let id = g.gpu_order[gpu_ptr];
                let task = &g.tasks[id];
                let dep_ok = task.dep.is_none_or(|d| g.tasks[d].done);
                let unit_ok = task.unit.is_none_or(|u| mover.is_complete(u));
                if dep_ok && unit_ok {
                    gpu_ptr += 1;
                    gpu_time += task.work;
                    if task.work > 0.0 {
                        gpu = Some((id, task.work));
                    } else {
                        finish(id, &mut g, &mut mover, &mut d2h_ready, &mut h2d_ready);
                    }
                    started = true;
                }
            }
            if cpu.is_none() && cpu_ptr < g.cpu_order.len() {
                let id = g.cpu_order[cpu_ptr];
                let task = &g.tasks[id];
                if task.dep.is_none_or(|d| g.tasks[d].done) {
                    cpu_ptr += 1;
                    cpu_time += task.work;
                    if task.work > 0.0 {
                        cpu = Some((id, task.work));
                    } else {
                        finish(id, &mut g, &mut mover, &mut d2h_ready, &mut h2d_ready);
                    }
                    started = true;
                }
            }
            if d2h.is_none() {
                if let Some(id) = d2h_ready.pop_front() {
                    let w = g.tasks[id].work;
                    sync_bytes += w;
                    if w > 0.0 {
                        d2h = Some((id, w));
                    } else {
                        finish(id, &mut g, &mut mover, &mut d2h_ready, &mut h2d_ready);
                    }
                    started = true;
                }
            }
            if h2d.is_none() {
                if let Some(id) = h2d_ready.pop_front() {
                    let w = g.tasks[id].work;
                    sync_bytes += w;
                    if w > 0.0 {
                        h2d = Some((H2dJob::Sync(id), w));
                    } else {
                        finish(id, &mut g, &mut mover, &mut d2h_ready, &mut h2d_ready);
                    }
                    started = true;
                } else if let Some((unit, bytes)) = mover.issue() {
                    weight_bytes += bytes;
                    h2d = Some((H2dJob::Packet { unit, bytes }, bytes));
                    started = true;
                }
            }
        }

        if gpu.is_none() && gpu_ptr == g.gpu_order.len() {
            break;
        }

        let rate = if cpu.is_some() {
            contended
        } else {
            hw.io_bandwidth
        };
        let finish_in = |r: Option<f64>, scale: f64| r.map(|rem| rem / scale);
        let f_gpu = finish_in(gpu.map(|x| x.1), 1.0);
        let f_cpu = finish_in(cpu.map(|x| x.1), 1.0);
        let f_d2h = finish_in(d2h.map(|x| x.1), rate);
        let f_h2d = finish_in(h2d.map(|x| x.1), rate);
        let dt = [f_gpu, f_cpu, f_d2h, f_h2d]
            .into_iter()
            .flatten()
            .fold(f64::INFINITY, f64::min);
        if !dt.is_finite() {
            return Err(Error::Internal(format!(
                "pipeline stalled at t={t} with GPU task {gpu_ptr} of {}",
                g.gpu_order.len()
            )));
        }
        let due = |f: Option<f64>| f.is_some_and(|v| v <= dt * (1.0 + 1e-12));

        t += dt;
        if let Some((job, _)) = h2d {
            io_time += dt;
            if matches!(job, H2dJob::Packet { .. }) {
                weight_io_time += dt;
            }
        }
        if d2h.is_some() {
            d2h_time += dt;
        }

        if due(f_gpu) {
            let (id, _) = gpu.take().expect("gpu running");
            finish(id, &mut g, &mut mover, &mut d2h_ready, &mut h2d_ready);
        } else if let Some((_, rem)) = gpu.as_mut() {
            *rem -= dt;
        }
        if due(f_cpu) {
            let (id, _) = cpu.take().expect("cpu running");
            finish(id, &mut g, &mut mover, &mut d2h_ready, &mut h2d_ready);
        } else if let Some((_, rem)) = cpu.as_mut() {
            *rem -= dt;
        }
        if due(f_d2h) {
            let (id, _) = d2h.take().expect("d2h running");
            finish(id, &mut g, &mut mover, &mut d2h_ready, &mut h2d_ready);
        } else if let Some((_, rem)) = d2h.as_mut() {
            *rem -= dt * rate;
        }
        if due(f_h2d) {
            match h2d.take().expect("h2d running").0 {
                H2dJob::Sync(id) => finish(id, &mut g, &mut mover, &mut d2h_ready, &mut h2d_ready),
                H2dJob::Packet { unit, bytes } => mover.land(unit, bytes),
            }
        } else if let Some((_, rem)) = h2d.as_mut() {
            *rem -= dt * rate;
        }
    }

    if g.tasks.iter().any(|t| !t.done) {
        return Err(Error::Internal("iteration ended with pending tasks".into()));
    }
    let decode: u64 = parts.iter().map(|p| p.decode_seqs).sum();
    let prefill: u64 = parts.iter().map(|p| p.prefill_tokens).sum();
    Ok(IterationTiming {
        iteration: 0,
        io_time,
        weight_io_time,
        d2h_time,
        gpu_time,
        cpu_time,
        wall_time: t,
        decode_throughput: decode as f64 / t,
        prefill_throughput: prefill as f64 / t,
        gpu_utilization: gpu_time / t,
        weight_bytes,
        sync_bytes,
        peak_resident_bytes: mover.peak_resident,
    })
}

/// Times one scheduler iteration.
pub fn simulate_iteration(
    plan: &IterationPlan,
    hw: &HardwareProfile,
    model: &ModelConfig,
    options: &Options,
) -> Result<IterationTiming> {
    let parts = partition_plan(plan);
    let mut timing = simulate_partitions(&parts, hw, model, options)?;
    timing.iteration = plan.iteration;
    Ok(timing)
}
