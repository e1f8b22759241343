//! Batch-level throughput under a paged KV cache.
//!
//! Two regimes. When the cache is the binding constraint, a steady state
//! admits `q` new sequences per iteration, where `q` is the number of
//! blocks divided by the block-time one sequence consumes over its
//! lifetime. When the GPU is the binding constraint, each iteration is
//! filled to `T = T_GPU·δ` tokens and the run splits into a ramp, a steady
//! phase and a drain.

use serde::Serialize;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    MemoryBound,
    GpuBound,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::MemoryBound => "memory_bound",
            Regime::GpuBound => "gpu_bound",
        }
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Block-iterations one sequence holds: `Σ_{i=0}^{g} ⌈(p+i)/b⌉`.
pub fn block_lifetime(p: u64, g: u64, block_size: u64) -> u64 {
    (0..=g).map(|i| (p + i).div_ceil(block_size)).sum()
}

/// Sequences admitted per iteration in the memory-bound steady state.
pub fn prefill_rate(num_blocks: u64, block_size: u64, p: u64, g: u64) -> Result<f64> {
    if block_size == 0 || num_blocks == 0 {
        return Err(Error::NotApplicable(
            "block size and block count must be positive".into(),
        ));
    }
    if g == 0 {
        return Err(Error::NotApplicable(
            "generation length must be positive".into(),
        ));
    }
    Ok(num_blocks as f64 / block_lifetime(p, g, block_size) as f64)
}

/// Memory-bound throughput, tokens/s: `K·g / ((K/q + g)·δ)`.
pub fn t1_memory_bound(k: u64, q: f64, g: u64, delta: f64) -> f64 {
    let (k, g) = (k as f64, g as f64);
    k * g / ((k / q + g) * delta)
}

/// Inputs to the GPU-bound estimate. `t_iter` is the token budget of one
/// iteration, `T_GPU·δ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GpuBoundInputs {
    pub k: u64,
    pub p: u64,
    pub g: u64,
    pub q: f64,
    pub t_iter: f64,
    pub delta: f64,
}

impl GpuBoundInputs {
    fn t_pre(&self) -> f64 {
        self.t_iter * self.p as f64 / (self.p + self.g) as f64
    }

    /// Prefill tokens absorbed by the `g`-iteration ramp.
    fn ramp_prefill(&self) -> f64 {
        (self.t_pre() + self.t_iter) * self.g as f64 / 2.0
    }

    fn gpu_limited(&self) -> bool {
        self.t_iter < self.q * (self.p + self.g) as f64
    }
}

/// GPU-bound throughput with ramp, steady phase and drain:
/// `It = 2g + (K·p − (T_pre + T)·g/2) / T_pre`, `T2 = K·g / (It·δ)`.
///
/// Fails when the GPU is not the limit or when the batch is too small to
/// finish the ramp.
pub fn t2_gpu_bound(x: &GpuBoundInputs) -> Result<f64> {
    if x.p == 0 || x.g == 0 {
        return Err(Error::NotApplicable("p and g must be positive".into()));
    }
    if !x.gpu_limited() {
        return Err(Error::NotApplicable(format!(
            "iteration budget {} covers the steady-state demand {}",
            x.t_iter,
            x.q * (x.p + x.g) as f64
        )));
    }
    let steady = x.k as f64 * x.p as f64 - x.ramp_prefill();
    if steady <= 0.0 {
        return Err(Error::NotApplicable(format!(
            "batch of {} sequences ends inside the ramp",
            x.k
        )));
    }
    let iterations = 2.0 * x.g as f64 + steady / x.t_pre();
    Ok(x.k as f64 * x.g as f64 / (iterations * x.delta))
}

/// Iteration count when all prefill fits inside the ramp: prefill per ramp
/// iteration falls linearly from `T` towards `T_pre`, so solve
/// `T·j − (T − T_pre)·j²/(2g) = K·p` and add the `g`-iteration drain.
fn ramp_only_iterations(x: &GpuBoundInputs) -> f64 {
    let t = x.t_iter;
    let a = (t - x.t_pre()) / (2.0 * x.g as f64);
    let kp = x.k as f64 * x.p as f64;
    let disc = (t * t - 4.0 * a * kp).max(0.0);
    // stable form of (t - sqrt(disc)) / (2a)
    let j = 2.0 * kp / (t + disc.sqrt());
    j + x.g as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stage2Report {
    pub capacity_tokens: u64,
    pub block_size: u64,
    #[serde(rename = "K")]
    pub k: u64,
    pub p: u64,
    pub g: u64,
    pub q: f64,
    pub t1: f64,
    pub t2: Option<f64>,
    pub t: f64,
    pub regime: Regime,
    pub utilization: f64,
}

/// Inputs to [`predict`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2Inputs {
    pub capacity_tokens: u64,
    pub block_size: u64,
    pub k: u64,
    pub p: u64,
    pub g: u64,
    /// GPU token ceiling, tokens/s.
    pub t_gpu: f64,
    /// Weight transfer time per iteration, seconds.
    pub delta: f64,
}

/// Combined estimate `T = min(T1, T2)`.
///
/// `T2` is only defined when the iteration budget is below steady-state
/// demand. Batches that finish within the ramp use the ramp-only iteration
/// count so the estimate stays continuous in `K`, and `T2` never exceeds the
/// roofline `T_GPU·g/(p+g)`.
pub fn predict(x: &Stage2Inputs) -> Result<Stage2Report> {
    if x.k == 0 || x.p == 0 || x.g == 0 {
        return Err(Error::NotApplicable("K, p and g must be positive".into()));
    }
    if !(x.t_gpu > 0.0 && x.delta > 0.0) {
        return Err(Error::NotApplicable("T_GPU and δ must be positive".into()));
    }
    let num_blocks = x.capacity_tokens / x.block_size.max(1);
    let peak = (x.p + x.g).div_ceil(x.block_size.max(1));
    if num_blocks < peak {
        return Err(Error::Infeasible(format!(
            "one sequence needs {peak} blocks, cache holds {num_blocks}"
        )));
    }
    let q = prefill_rate(num_blocks, x.block_size, x.p, x.g)?;
    let t1 = t1_memory_bound(x.k, q, x.g, x.delta);
    let gi = GpuBoundInputs {
        k: x.k,
        p: x.p,
        g: x.g,
        q,
        t_iter: x.t_gpu * x.delta,
        delta: x.delta,
    };
    let roofline = x.t_gpu * x.g as f64 / (x.p + x.g) as f64;
    let t2 = if gi.gpu_limited() {
        let raw = match t2_gpu_bound(&gi) {
            Ok(v) => v,
            Err(_) => {
                let it = ramp_only_iterations(&gi);
                x.k as f64 * x.g as f64 / (it * x.delta)
            }
        };
        Some(raw.min(roofline))
    } else {
        None
    };
    let (t, regime) = match t2 {
        Some(v) if v < t1 => (v, Regime::GpuBound),
        _ => (t1, Regime::MemoryBound),
    };
    Ok(Stage2Report {
        capacity_tokens: x.capacity_tokens,
        block_size: x.block_size,
        k: x.k,
        p: x.p,
        g: x.g,
        q,
        t1,
        t2,
        t,
        regime,
        utilization: t * (x.p + x.g) as f64 / x.g as f64 / x.t_gpu,
    })
}

/// Utilization at each capacity in `capacities` (tokens). Capacities too
/// small for one sequence are skipped.
pub fn utilization_vs_capacity(base: &Stage2Inputs, capacities: &[u64]) -> Vec<(u64, f64)> {
    capacities
        .iter()
        .filter_map(|&c| {
            predict(&Stage2Inputs {
                capacity_tokens: c,
                ..*base
            })
            .ok()
            .map(|r| (c, r.utilization))
        })
        .collect()
}
