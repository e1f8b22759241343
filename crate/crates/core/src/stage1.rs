//! Closed-form throughput ceiling for offloaded MoE inference and the CPU-side
//! resources needed to sustain it.
//!
//! Every iteration streams all weights over the CPU-GPU link, so the tokens
//! processed per iteration must amortize that transfer. How many tokens can
//! be in flight is capped by KV-cache capacity, and the exchange rate between
//! cache occupancy and parallel tokens depends on prompt and generation
//! lengths (the parallelism-memory efficiency, [`pme`]).

use serde::Serialize;

use crate::config::{HardwareProfile, ModelConfig, Scenario};
use crate::error::{Error, Result};

/// GEMM arithmetic-to-IO intensity for `n` tokens in flight: FLOPs over
/// weight bytes, with both counted per the two-FLOP/two-byte BF16
/// convention.
pub fn gemm_intensity(model: &ModelConfig, n: f64) -> f64 {
    n * model.layer_gemm_term(model.top_k) / model.layer_gemm_term(model.num_experts)
}

/// Intensity the link must reach so that weight streaming keeps pace with
/// the GPU. For BF16 this is `C_GPU / B_IO`.
pub fn required_intensity(hw: &HardwareProfile, model: &ModelConfig) -> f64 {
    hw.gpu_flops / hw.io_bandwidth * model.dtype_bytes as f64 / 2.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SaturationTokens {
    /// Smallest `n` with `gemm_intensity(n)` at or above the requirement.
    pub exact: u64,
    /// Sparsity-only approximation `(C/B)·(N_e/N_k)`.
    pub approx: u64,
}

pub fn saturation_tokens(hw: &HardwareProfile, model: &ModelConfig) -> SaturationTokens {
    let need = required_intensity(hw, model);
    let per_token = gemm_intensity(model, 1.0);
    let mut exact = (need / per_token).ceil().max(1.0) as u64;
    // float slop around exact integers
    while exact > 1 && gemm_intensity(model, (exact - 1) as f64) >= need {
        exact -= 1;
    }
    while gemm_intensity(model, exact as f64) < need {
        exact += 1;
    }
    let approx = (need * model.num_experts as f64 / model.top_k as f64).ceil() as u64;
    SaturationTokens { exact, approx }
}

/// KV bytes needed to hold enough sequences of `seq_len` tokens to reach the
/// approximate saturation token count.
pub fn kv_bytes_to_saturate(hw: &HardwareProfile, model: &ModelConfig, seq_len: u64) -> f64 {
    saturation_tokens(hw, model).approx as f64 * seq_len as f64 * model.kv_bytes_per_token()
}

/// Parallelism-memory efficiency `2(p+g) / ((2p+g)·g)`: tokens computed per
/// unit of KV occupancy summed over a sequence's lifetime.
pub fn pme(p: u64, g: u64) -> Result<f64> {
    if p == 0 || g == 0 {
        return Err(Error::NotApplicable(format!(
            "pme needs p >= 1 and g >= 1, got p={p} g={g}"
        )));
    }
    let (p, g) = (p as f64, g as f64);
    Ok(2.0 * (p + g) / ((2.0 * p + g) * g))
}

/// Time to stream every weight over the link once.
pub fn weight_transfer_time(hw: &HardwareProfile, model: &ModelConfig) -> f64 {
    model.model_bytes() / hw.io_bandwidth
}

/// GPU token ceiling, tokens/s.
pub fn t_gpu(hw: &HardwareProfile, model: &ModelConfig) -> f64 {
    hw.gpu_flops / model.flops_per_token()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ThroughputBound {
    /// `PME·M/δ`, the capacity-limited rate.
    pub memory_bound: f64,
    pub t_max: f64,
    pub utilization: f64,
}

/// `T_max = min(PME·M/δ, T_GPU)` for `kv_capacity` tokens of cache.
pub fn t_max(
    hw: &HardwareProfile,
    model: &ModelConfig,
    kv_capacity: f64,
    p: u64,
    g: u64,
    t_gpu: f64,
) -> Result<ThroughputBound> {
    if kv_capacity < (p + g) as f64 {
        return Err(Error::Infeasible(
            "single sequence exceeds KV capacity".into(),
        ));
    }
    let delta = weight_transfer_time(hw, model);
    let memory_bound = pme(p, g)? * kv_capacity / delta;
    let t_max = memory_bound.min(t_gpu);
    Ok(ThroughputBound {
        memory_bound,
        t_max,
        utilization: t_max / t_gpu,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BandwidthRequirement {
    /// KV read plus weight streaming, bytes/s.
    pub mem: f64,
    pub kv: f64,
}

/// CPU memory bandwidth needed when the KV cache and the weights are each
/// read once per iteration.
pub fn required_bandwidths(
    hw: &HardwareProfile,
    model: &ModelConfig,
    kv_capacity_bytes: f64,
) -> BandwidthRequirement {
    let kv = kv_capacity_bytes / model.model_bytes() * hw.io_bandwidth;
    BandwidthRequirement {
        mem: kv + hw.io_bandwidth,
        kv,
    }
}

/// CPU attention FLOP/s: `2 · s · I_cpu_attn · B_KV`.
pub fn required_cpu_attn_throughput(model: &ModelConfig, b_kv: f64, i_cpu_attn: f64) -> f64 {
    2.0 * model.gqa_group as f64 * i_cpu_attn * b_kv
}

/// KV capacity seen by a batch whose prefill and decode overlap:
/// `(p+g)/(p+g/2) · C_KV`.
pub fn effective_kv_capacity(p: u64, g: u64, c_kv: f64) -> f64 {
    let (p, g) = (p as f64, g as f64);
    (p + g) / (p + g / 2.0) * c_kv
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UtilizationSurface {
    pub prompt_lens: Vec<u64>,
    pub gen_lens: Vec<u64>,
    /// Row-major, `values[i][j]` for `prompt_lens[i]`, `gen_lens[j]`.
    /// Cells where one sequence does not fit hold 0.
    pub values: Vec<Vec<f64>>,
}

impl UtilizationSurface {
    pub fn cells(&self) -> impl Iterator<Item = (u64, u64, f64)> + '_ {
        self.prompt_lens
            .iter()
            .enumerate()
            .flat_map(move |(i, &p)| {
                self.gen_lens
                    .iter()
                    .enumerate()
                    .map(move |(j, &g)| (p, g, self.values[i][j]))
            })
    }
}

pub fn utilization_surface(
    hw: &HardwareProfile,
    model: &ModelConfig,
    kv_capacity: f64,
    t_gpu: f64,
    prompt_lens: &[u64],
    gen_lens: &[u64],
) -> Result<UtilizationSurface> {
    if prompt_lens.is_empty() || gen_lens.is_empty() {
        return Err(Error::NotApplicable("empty length range".into()));
    }
    let mut values = Vec::with_capacity(prompt_lens.len());
    for &p in prompt_lens {
        let mut row = Vec::with_capacity(gen_lens.len());
        for &g in gen_lens {
            let u = match t_max(hw, model, kv_capacity, p, g, t_gpu) {
                Ok(b) => b.utilization,
                Err(Error::Infeasible(_)) => 0.0,
                Err(e) => return Err(e),
            };
            row.push(u);
        }
        values.push(row);
    }
    Ok(UtilizationSurface {
        prompt_lens: prompt_lens.to_vec(),
        gen_lens: gen_lens.to_vec(),
        values,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Stage1Report {
    pub prompt_len: u64,
    pub gen_len: u64,
    pub intensity: f64,
    pub saturation_tokens: u64,
    pub saturation_tokens_approx: u64,
    pub delta: f64,
    pub pme: f64,
    pub t_max: f64,
    pub t_gpu: f64,
    pub utilization: f64,
    pub required_mem_bandwidth: f64,
    pub required_kv_bandwidth: f64,
    pub required_cpu_attn_flops: f64,
    pub effective_kv_capacity: f64,
}

/// Stage-1 figures for a scenario, using the workload's mean lengths.
/// `intensity` is evaluated at the saturation token count.
pub fn report(scenario: &Scenario) -> Result<Stage1Report> {
    let hw = &scenario.hardware;
    let model = &scenario.model;
    let (p, g, _) = scenario.workload.summary();
    let capacity = scenario.kv_cache.capacity_tokens as f64;
    let tg = t_gpu(hw, model);
    let sat = saturation_tokens(hw, model);
    let bound = t_max(hw, model, capacity, p, g, tg)?;
    let bw = required_bandwidths(hw, model, scenario.kv_cache.capacity_bytes(model));
    Ok(Stage1Report {
        prompt_len: p,
        gen_len: g,
        intensity: gemm_intensity(model, sat.exact as f64),
        saturation_tokens: sat.exact,
        saturation_tokens_approx: sat.approx,
        delta: weight_transfer_time(hw, model),
        pme: pme(p, g)?,
        t_max: bound.t_max,
        t_gpu: tg,
        utilization: bound.utilization,
        required_mem_bandwidth: bw.mem,
        required_kv_bandwidth: bw.kv,
        required_cpu_attn_flops: required_cpu_attn_throughput(
            model,
            bw.kv,
            scenario.options.i_cpu_attn,
        ),
        effective_kv_capacity: effective_kv_capacity(p, g, capacity),
    })
}
