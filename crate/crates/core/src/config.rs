//! Domain types for hardware, model, KV cache and workload, plus loading of
//! scenario documents.
//!
//! Units: bytes and seconds are `f64`, token and block counts are `u64`.
//! Reports use decimal units throughout, so one GB is 10^9 bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};
use crate::workload::{self, WorkloadSpec};

/// Decimal gigabyte.
pub const GB: f64 = 1e9;

/// Default size of one data-mover packet.
pub const DEFAULT_PACKET_BYTES: f64 = 100e6;

/// Default arithmetic intensity of CPU decode attention, FLOP per byte of KV
/// read (dot product plus saxpby per element).
pub const DEFAULT_I_CPU_ATTN: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HardwareProfile {
    /// GEMM throughput, FLOP/s.
    pub gpu_flops: f64,
    /// CPU to GPU link bandwidth, bytes/s.
    pub io_bandwidth: f64,
    /// Sustainable CPU memory bandwidth shared by DMA and attention, bytes/s.
    pub cpu_mem_bandwidth: f64,
    /// CPU decode attention rate in KV tokens attended per second for one
    /// layer.
    pub cpu_attn_throughput: f64,
    pub gpu_mem_capacity: f64,
    pub cpu_mem_capacity: f64,
}

impl HardwareProfile {
    /// Single-socket A40 testbed: 150 TFLOPS BF16 and 19.5 GB/s measured
    /// host-to-device bandwidth. The memory-bandwidth ceiling is what remains
    /// sustainable when attention threads and DMA share the controller, well
    /// below the ~150 GB/s a streaming benchmark reaches on an idle socket.
    pub fn a40_testbed() -> Self {
        HardwareProfile {
            gpu_flops: 150e12,
            io_bandwidth: 19.5e9,
            cpu_mem_bandwidth: 50e9,
            cpu_attn_throughput: 20e6,
            gpu_mem_capacity: 16e9,
            cpu_mem_capacity: 375e9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("gpu_flops", self.gpu_flops),
            ("io_bandwidth", self.io_bandwidth),
            ("cpu_mem_bandwidth", self.cpu_mem_bandwidth),
            ("cpu_attn_throughput", self.cpu_attn_throughput),
            ("gpu_mem_capacity", self.gpu_mem_capacity),
            ("cpu_mem_capacity", self.cpu_mem_capacity),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(
                    format!("hardware.{name}"),
                    format!("must be positive, got {v}"),
                ));
            }
        }
        if self.io_bandwidth > self.cpu_mem_bandwidth {
            return Err(Error::config(
                "hardware.io_bandwidth",
                "exceeds cpu_mem_bandwidth",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: u64,
    pub hidden_dim: u64,
    pub intermediate_dim: u64,
    pub num_experts: u64,
    pub top_k: u64,
    /// Query heads per KV head.
    pub gqa_group: u64,
    pub kv_heads: u64,
    pub head_dim: u64,
    pub dtype_bytes: u64,
    /// Embedding and LM-head bytes, outside the per-layer formula.
    #[serde(default)]
    pub extra_weight_bytes: f64,
}

/// Sizes that follow from a [`ModelConfig`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedSizes {
    pub model_bytes: f64,
    pub kv_bytes_per_token: f64,
    pub weight_buffer_bytes: f64,
}

impl ModelConfig {
    pub fn mixtral_8x7b() -> Self {
        ModelConfig {
            num_layers: 32,
            hidden_dim: 4096,
            intermediate_dim: 14336,
            num_experts: 8,
            top_k: 2,
            gqa_group: 4,
            kv_heads: 8,
            head_dim: 128,
            dtype_bytes: 2,
            // 32000-token vocabulary, untied embedding and head.
            extra_weight_bytes: (2 * 32000 * 4096 * 2) as f64,
        }
    }

    pub fn mixtral_8x22b() -> Self {
        ModelConfig {
            num_layers: 56,
            hidden_dim: 6144,
            intermediate_dim: 16384,
            num_experts: 8,
            top_k: 2,
            gqa_group: 6,
            kv_heads: 8,
            head_dim: 128,
            dtype_bytes: 2,
            extra_weight_bytes: (2 * 32768 * 6144 * 2) as f64,
        }
    }

    pub fn dbrx() -> Self {
        ModelConfig {
            num_layers: 40,
            hidden_dim: 6144,
            intermediate_dim: 10752,
            num_experts: 16,
            top_k: 4,
            gqa_group: 6,
            kv_heads: 8,
            head_dim: 128,
            dtype_bytes: 2,
            extra_weight_bytes: (2u64 * 100352 * 6144 * 2) as f64,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "mixtral-8x7b" | "mixtral8x7b" => Some(Self::mixtral_8x7b()),
            "mixtral-8x22b" | "mixtral8x22b" => Some(Self::mixtral_8x22b()),
            "dbrx" => Some(Self::dbrx()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_layers", self.num_layers),
            ("hidden_dim", self.hidden_dim),
            ("intermediate_dim", self.intermediate_dim),
            ("num_experts", self.num_experts),
            ("top_k", self.top_k),
            ("gqa_group", self.gqa_group),
            ("kv_heads", self.kv_heads),
            ("head_dim", self.head_dim),
            ("dtype_bytes", self.dtype_bytes),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::config(format!("model.{name}"), "must be positive"));
            }
        }
        if self.top_k > self.num_experts {
            return Err(Error::config("model.top_k", "top_k exceeds num_experts"));
        }
        if self.intermediate_dim < self.hidden_dim {
            return Err(Error::config(
                "model.intermediate_dim",
                "intermediate_dim is smaller than hidden_dim",
            ));
        }
        if self.kv_heads * self.head_dim * self.gqa_group != self.hidden_dim {
            return Err(Error::config(
                "model.kv_heads",
                format!(
                    "kv_heads * head_dim * gqa_group = {} but hidden_dim = {}",
                    self.kv_heads * self.head_dim * self.gqa_group,
                    self.hidden_dim
                ),
            ));
        }
        if !(self.extra_weight_bytes.is_finite() && self.extra_weight_bytes >= 0.0) {
            return Err(Error::config(
                "model.extra_weight_bytes",
                "must be non-negative",
            ));
        }
        Ok(())
    }

    fn h(&self) -> f64 {
        self.hidden_dim as f64
    }

    /// Per-layer GEMM operation count per token with `experts` experts
    /// active: `6·E·h·h_i + 4h² + 4h²/s`. With all experts active this is
    /// also the per-layer weight footprint at two bytes per parameter.
    pub fn layer_gemm_term(&self, experts: u64) -> f64 {
        let h = self.h();
        let s = self.gqa_group as f64;
        6.0 * experts as f64 * h * self.intermediate_dim as f64 + 4.0 * h * h + 4.0 * h * h / s
    }

    pub fn params_per_layer(&self) -> f64 {
        self.layer_gemm_term(self.num_experts) / 2.0
    }

    /// Weight bytes of one transformer layer, embeddings excluded.
    pub fn layer_weight_bytes(&self) -> f64 {
        self.params_per_layer() * self.dtype_bytes as f64
    }

    /// Q, K and V projection bytes of one layer.
    pub fn qkv_weight_bytes(&self) -> f64 {
        let h = self.h();
        (h * h + 2.0 * h * h / self.gqa_group as f64) * self.dtype_bytes as f64
    }

    pub fn model_bytes(&self) -> f64 {
        self.num_layers as f64 * self.layer_weight_bytes() + self.extra_weight_bytes
    }

    /// KV bytes one token occupies in a single layer.
    pub fn kv_bytes_per_token_layer(&self) -> f64 {
        (2 * self.kv_heads * self.head_dim * self.dtype_bytes) as f64
    }

    pub fn kv_bytes_per_token(&self) -> f64 {
        self.num_layers as f64 * self.kv_bytes_per_token_layer()
    }

    /// GEMM FLOPs charged per token per layer against `gpu_flops`.
    pub fn flops_per_token_layer(&self) -> f64 {
        2.0 * self.layer_gemm_term(self.top_k)
    }

    /// QKV projection share of [`Self::flops_per_token_layer`].
    pub fn flops_ga_per_token_layer(&self) -> f64 {
        let h = self.h();
        2.0 * (2.0 * h * h + 4.0 * h * h / self.gqa_group as f64)
    }

    /// O projection plus routed experts.
    pub fn flops_gb_per_token_layer(&self) -> f64 {
        self.flops_per_token_layer() - self.flops_ga_per_token_layer()
    }

    pub fn flops_per_token(&self) -> f64 {
        self.num_layers as f64 * self.flops_per_token_layer()
    }

    pub fn derived(&self) -> DerivedSizes {
        let model_bytes = self.model_bytes();
        DerivedSizes {
            model_bytes,
            kv_bytes_per_token: self.kv_bytes_per_token(),
            weight_buffer_bytes: 2.0 * model_bytes / self.num_layers as f64,
        }
    }
}

/// `2 · layers · kv_heads · head_dim · dtype_bytes`.
pub fn kv_bytes_per_token(model: &ModelConfig) -> f64 {
    model.kv_bytes_per_token()
}

/// Paged KV cache geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvCacheConfig {
    pub capacity_tokens: u64,
    pub block_size: u64,
    pub num_blocks: u64,
}

impl KvCacheConfig {
    pub fn new(capacity_tokens: u64, block_size: u64) -> Result<Self> {
        if block_size == 0 {
            return Err(Error::config("kv_cache.block_size", "must be positive"));
        }
        let num_blocks = capacity_tokens / block_size;
        if num_blocks == 0 {
            return Err(Error::config(
                "kv_cache.capacity_tokens",
                "smaller than one block",
            ));
        }
        Ok(KvCacheConfig {
            capacity_tokens,
            block_size,
            num_blocks,
        })
    }

    /// Capacity given in bytes, converted with the model's per-token KV size.
    pub fn from_bytes(bytes: f64, model: &ModelConfig, block_size: u64) -> Result<Self> {
        if !(bytes.is_finite() && bytes > 0.0) {
            return Err(Error::config(
                "kv_cache.capacity_bytes",
                format!("must be positive, got {bytes}"),
            ));
        }
        Self::new(
            (bytes / model.kv_bytes_per_token()).floor() as u64,
            block_size,
        )
    }

    pub fn capacity_bytes(&self, model: &ModelConfig) -> f64 {
        self.capacity_tokens as f64 * model.kv_bytes_per_token()
    }
}

/// Simulator and analysis knobs from the optional `[options]` section.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Options {
    pub contention: bool,
    pub packet_bytes: f64,
    /// Per-iteration token budget. Derived from the profiler fit when unset.
    pub n_real: Option<u64>,
    pub i_cpu_attn: f64,
    pub profile_noise: f64,
    pub profile_points: usize,
    pub max_iterations: u64,
}

impl Default for Options {
    fn default() -> Self {
        Options {
            contention: true,
            packet_bytes: DEFAULT_PACKET_BYTES,
            n_real: None,
            i_cpu_attn: DEFAULT_I_CPU_ATTN,
            profile_noise: 0.02,
            profile_points: 16,
            max_iterations: 1_000_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub hardware: HardwareProfile,
    pub model: ModelConfig,
    pub kv_cache: KvCacheConfig,
    pub workload: WorkloadSpec,
    pub options: Options,
    pub derived: DerivedSizes,
}

impl Scenario {
    pub fn new(
        hardware: HardwareProfile,
        model: ModelConfig,
        kv_cache: KvCacheConfig,
        workload: WorkloadSpec,
    ) -> Result<Self> {
        hardware.validate()?;
        model.validate()?;
        workload.validate()?;
        Ok(Scenario {
            hardware,
            model,
            kv_cache,
            workload,
            options: Options::default(),
            derived: model.derived(),
        })
    }

    /// Serialize back into a scenario document. The workload is written as
    /// inline pairs.
    pub fn to_toml_string(&self) -> String {
        let mut doc = Table::new();
        doc.insert("hardware".into(), to_value(&self.hardware));
        doc.insert("model".into(), to_value(&self.model));
        let mut kv = Table::new();
        kv.insert(
            "capacity_tokens".into(),
            Value::Integer(self.kv_cache.capacity_tokens as i64),
        );
        kv.insert(
            "block_size".into(),
            Value::Integer(self.kv_cache.block_size as i64),
        );
        doc.insert("kv_cache".into(), Value::Table(kv));
        let pairs = self
            .workload
            .sequences
            .iter()
            .map(|s| {
                Value::Array(vec![
                    Value::Integer(s.prompt_len as i64),
                    Value::Integer(s.gen_len as i64),
                ])
            })
            .collect();
        let mut wl = Table::new();
        wl.insert("sequences".into(), Value::Array(pairs));
        doc.insert("workload".into(), Value::Table(wl));
        let mut opts = Table::new();
        opts.insert("contention".into(), Value::Boolean(self.options.contention));
        opts.insert(
            "packet_bytes".into(),
            Value::Float(self.options.packet_bytes),
        );
        if let Some(n) = self.options.n_real {
            opts.insert("n_real".into(), Value::Integer(n as i64));
        }
        opts.insert("i_cpu_attn".into(), Value::Float(self.options.i_cpu_attn));
        opts.insert(
            "profile_noise".into(),
            Value::Float(self.options.profile_noise),
        );
        opts.insert(
            "profile_points".into(),
            Value::Integer(self.options.profile_points as i64),
        );
        opts.insert(
            "max_iterations".into(),
            Value::Integer(self.options.max_iterations as i64),
        );
        doc.insert("options".into(), Value::Table(opts));
        toml::to_string(&doc).expect("scenario tables always serialize")
    }
}

fn to_value<T: Serialize>(v: &T) -> Value {
    Value::try_from(v).expect("plain struct serializes to a table")
}

/// Parse a scenario document.
///
/// `base_dir` resolves relative trace paths; `seed` feeds sampled workloads
/// that do not carry their own seed.
pub fn load_scenario(text: &str, base_dir: Option<&Path>, seed: u64) -> Result<Scenario> {
    load_scenario_with_overrides(text, &[], base_dir, seed)
}

/// Like [`load_scenario`], applying `section.key=value` overrides first.
pub fn load_scenario_with_overrides(
    text: &str,
    overrides: &[String],
    base_dir: Option<&Path>,
    seed: u64,
) -> Result<Scenario> {
    let mut doc: Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::config("<document>", e.to_string()))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }

    let hardware = parse_hardware(section(&doc, "hardware")?)?;
    let model = parse_model(section(&doc, "model")?)?;
    let kv_cache = parse_kv_cache(section(&doc, "kv_cache")?, &model)?;
    let workload = workload::parse_workload_section(section(&doc, "workload")?, base_dir, seed)?;
    let options = match doc.get("options") {
        Some(Value::Table(t)) => parse_options(t)?,
        Some(_) => return Err(Error::config("options", "expected a table")),
        None => Options::default(),
    };

    let mut scenario = Scenario::new(hardware, model, kv_cache, workload)?;
    scenario.options = options;
    Ok(scenario)
}

/// Apply one `section.key=value` override. The value is read as a TOML
/// literal, falling back to a bare string.
pub fn apply_override(doc: &mut Table, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::config(spec, "override must look like section.key=value"))?;
    let path = path.trim();
    let raw = raw.trim();
    let value = parse_literal(raw);

    let mut parts: Vec<&str> = path.split('.').collect();
    let leaf = parts
        .pop()
        .filter(|l| !l.is_empty())
        .ok_or_else(|| Error::config(path, "empty key"))?;
    let mut table = doc;
    for part in parts {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| Value::Table(Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::config(path, format!("`{part}` is not a table")))?;
    }
    table.insert(leaf.to_string(), value);
    Ok(())
}

fn parse_literal(raw: &str) -> Value {
    let wrapped = format!("v = {raw}");
    match wrapped.parse::<Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| Value::String(raw.into())),
        Err(_) => Value::String(raw.into()),
    }
}

fn section<'a>(doc: &'a Table, name: &str) -> Result<&'a Table> {
    match doc.get(name) {
        Some(Value::Table(t)) => Ok(t),
        Some(_) => Err(Error::config(name, "expected a table")),
        None => Err(Error::config(name, "missing section")),
    }
}

pub(crate) fn get_f64(t: &Table, sec: &str, key: &str) -> Result<Option<f64>> {
    match t.get(key) {
        None => Ok(None),
        Some(Value::Float(f)) => Ok(Some(*f)),
        Some(Value::Integer(i)) => Ok(Some(*i as f64)),
        Some(other) => Err(Error::config(
            format!("{sec}.{key}"),
            format!("expected a number, got {}", other.type_str()),
        )),
    }
}

pub(crate) fn get_u64(t: &Table, sec: &str, key: &str) -> Result<Option<u64>> {
    let path = || format!("{sec}.{key}");
    match t.get(key) {
        None => Ok(None),
        Some(Value::Integer(i)) if *i >= 0 => Ok(Some(*i as u64)),
        Some(Value::Integer(i)) => Err(Error::config(
            path(),
            format!("must be non-negative, got {i}"),
        )),
        Some(Value::Float(f)) if f.fract() == 0.0 && *f >= 0.0 && *f < 9.0e18 => {
            Ok(Some(*f as u64))
        }
        Some(other) => Err(Error::config(
            path(),
            format!("expected a non-negative integer, got {other}"),
        )),
    }
}

pub(crate) fn require<T>(v: Option<T>, sec: &str, key: &str) -> Result<T> {
    v.ok_or_else(|| Error::config(format!("{sec}.{key}"), "missing key"))
}

fn parse_hardware(t: &Table) -> Result<HardwareProfile> {
    let base = match t.get("preset") {
        Some(Value::String(s)) if s == "a40-testbed" || s == "a40" => {
            Some(HardwareProfile::a40_testbed())
        }
        Some(v) => {
            return Err(Error::config(
                "hardware.preset",
                format!("unknown preset {v}"),
            ))
        }
        None => None,
    };
    let field = |key: &str, fallback: Option<f64>| -> Result<f64> {
        let v = get_f64(t, "hardware", key)?.or(fallback);
        require(v, "hardware", key)
    };
    Ok(HardwareProfile {
        gpu_flops: field("gpu_flops", base.map(|b| b.gpu_flops))?,
        io_bandwidth: field("io_bandwidth", base.map(|b| b.io_bandwidth))?,
        cpu_mem_bandwidth: field("cpu_mem_bandwidth", base.map(|b| b.cpu_mem_bandwidth))?,
        cpu_attn_throughput: field("cpu_attn_throughput", base.map(|b| b.cpu_attn_throughput))?,
        gpu_mem_capacity: field("gpu_mem_capacity", base.map(|b| b.gpu_mem_capacity))?,
        cpu_mem_capacity: field("cpu_mem_capacity", base.map(|b| b.cpu_mem_capacity))?,
    })
}

fn parse_model(t: &Table) -> Result<ModelConfig> {
    let base = match t.get("preset") {
        Some(Value::String(s)) => Some(
            ModelConfig::preset(s)
                .ok_or_else(|| Error::config("model.preset", format!("unknown preset `{s}`")))?,
        ),
        Some(_) => return Err(Error::config("model.preset", "expected a string")),
        None => None,
    };
    let count = |key: &str, fallback: Option<u64>| -> Result<u64> {
        require(get_u64(t, "model", key)?.or(fallback), "model", key)
    };
    Ok(ModelConfig {
        num_layers: count("num_layers", base.map(|b| b.num_layers))?,
        hidden_dim: count("hidden_dim", base.map(|b| b.hidden_dim))?,
        intermediate_dim: count("intermediate_dim", base.map(|b| b.intermediate_dim))?,
        num_experts: count("num_experts", base.map(|b| b.num_experts))?,
        top_k: count("top_k", base.map(|b| b.top_k))?,
        gqa_group: count("gqa_group", base.map(|b| b.gqa_group))?,
        kv_heads: count("kv_heads", base.map(|b| b.kv_heads))?,
        head_dim: count("head_dim", base.map(|b| b.head_dim))?,
        dtype_bytes: count("dtype_bytes", base.map(|b| b.dtype_bytes))?,
        extra_weight_bytes: get_f64(t, "model", "extra_weight_bytes")?
            .or(base.map(|b| b.extra_weight_bytes))
            .unwrap_or(0.0),
    })
}

fn parse_kv_cache(t: &Table, model: &ModelConfig) -> Result<KvCacheConfig> {
    let block_size = require(
        get_u64(t, "kv_cache", "block_size")?,
        "kv_cache",
        "block_size",
    )?;
    if let Some(tokens) = get_u64(t, "kv_cache", "capacity_tokens")? {
        return KvCacheConfig::new(tokens, block_size);
    }
    let bytes = match (
        get_f64(t, "kv_cache", "capacity_bytes")?,
        get_f64(t, "kv_cache", "capacity_gb")?,
    ) {
        (Some(b), _) => b,
        (None, Some(gb)) => gb * GB,
        (None, None) => {
            return Err(Error::config(
                "kv_cache.capacity_tokens",
                "missing key (or capacity_bytes / capacity_gb)",
            ))
        }
    };
    KvCacheConfig::from_bytes(bytes, model, block_size)
}

fn parse_options(t: &Table) -> Result<Options> {
    let d = Options::default();
    let contention = match t.get("contention") {
        None => d.contention,
        Some(Value::Boolean(b)) => *b,
        Some(_) => return Err(Error::config("options.contention", "expected a boolean")),
    };
    let positive = |key: &str, fallback: f64| -> Result<f64> {
        let v = get_f64(t, "options", key)?.unwrap_or(fallback);
        if v.is_finite() && v > 0.0 {
            Ok(v)
        } else {
            Err(Error::config(format!("options.{key}"), "must be positive"))
        }
    };
    let profile_noise = get_f64(t, "options", "profile_noise")?.unwrap_or(d.profile_noise);
    if !(0.0..1.0).contains(&profile_noise) {
        return Err(Error::config("options.profile_noise", "must be in [0, 1)"));
    }
    let n_real = get_u64(t, "options", "n_real")?;
    if n_real == Some(0) {
        return Err(Error::config("options.n_real", "must be positive"));
    }
    let profile_points = get_u64(t, "options", "profile_points")?
        .map(|v| v as usize)
        .unwrap_or(d.profile_points);
    if profile_points < 2 {
        return Err(Error::config("options.profile_points", "need at least 2"));
    }
    Ok(Options {
        contention,
        packet_bytes: positive("packet_bytes", d.packet_bytes)?,
        n_real,
        i_cpu_attn: positive("i_cpu_attn", d.i_cpu_attn)?,
        profile_noise,
        profile_points,
        max_iterations: get_u64(t, "options", "max_iterations")?.unwrap_or(d.max_iterations),
    })
}
