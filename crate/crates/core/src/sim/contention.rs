use crate::config::{HardwareProfile, ModelConfig};

/// Host-to-device bandwidth left when CPU attention reads KV at
/// `kv_read_rate` bytes/s. Below the memory controller ceiling the link runs
/// at full rate; above it both streams are scaled down proportionally.
pub fn contended_io_bandwidth(hw: &HardwareProfile, kv_read_rate: f64) -> f64 {
    let demand = kv_read_rate.max(0.0) + hw.io_bandwidth;
    if demand <= hw.cpu_mem_bandwidth {
        hw.io_bandwidth
    } else {
        hw.io_bandwidth * hw.cpu_mem_bandwidth / demand
    }
}

/// KV bytes/s the attention kernel pulls from memory while it runs.
pub fn cpu_kv_read_rate(hw: &HardwareProfile, model: &ModelConfig) -> f64 {
    hw.cpu_attn_throughput * model.kv_bytes_per_token_layer()
}
