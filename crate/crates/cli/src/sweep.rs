//! `--vary` axis parsing and the Stage-2 parameter grid.

use rayon::prelude::*;
use serde::Serialize;

use moe_offload_core::stage2::{predict, Stage2Inputs};
use moe_offload_core::{Error, ModelConfig, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Axis {
    /// Tokens; byte values are converted with the model's KV size.
    KvCapacity,
    K,
    P,
    G,
    BlockSize,
}

impl Axis {
    fn parse(key: &str) -> Result<Self> {
        Ok(match key {
            "kv_capacity" => Axis::KvCapacity,
            "K" | "k" => Axis::K,
            "p" => Axis::P,
            "g" => Axis::G,
            "block_size" => Axis::BlockSize,
            other => {
                return Err(Error::Config {
                    key: format!("--vary {other}"),
                    message: "unknown axis; expected kv_capacity, K, p, g or block_size".into(),
                })
            }
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vary {
    pub axis: Axis,
    pub values: Vec<u64>,
}

fn bad(spec: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: format!("--vary {spec}"),
        message: message.into(),
    }
}

/// One number with an optional `GB`/`MB`/`KB` suffix (decimal units) or a
/// `tok` suffix. Capacities without a unit are tokens; suffixed values are
/// bytes and become tokens via `kv_bytes_per_token`.
fn parse_value(raw: &str, axis: Axis, model: &ModelConfig, spec: &str) -> Result<f64> {
    let s = raw.trim();
    let units = [("GB", 1e9), ("MB", 1e6), ("KB", 1e3), ("tok", 0.0)];
    for (suffix, scale) in units {
        if let Some(num) = s.strip_suffix(suffix) {
            let v: f64 = num
                .trim()
                .parse()
                .map_err(|_| bad(spec, format!("`{raw}` is not a number")))?;
            if scale == 0.0 {
                return Ok(v);
            }
            if axis != Axis::KvCapacity {
                return Err(bad(spec, "byte units only apply to kv_capacity"));
            }
            return Ok((v * scale / model.kv_bytes_per_token()).floor());
        }
    }
    s.parse()
        .map_err(|_| bad(spec, format!("`{raw}` is not a number")))
}

/// Parses `key=start:stop:count` (inclusive, evenly spaced, rounded) or
/// `key=a,b,c`.
pub fn parse_vary(spec: &str, model: &ModelConfig) -> Result<Vary> {
    let (key, rhs) = spec
        .split_once('=')
        .ok_or_else(|| bad(spec, "expected key=start:stop:count or key=a,b,c"))?;
    let axis = Axis::parse(key.trim())?;
    let raw: Vec<f64> = if rhs.contains(':') {
        let parts: Vec<&str> = rhs.split(':').collect();
        if parts.len() != 3 {
            return Err(bad(spec, "range needs start:stop:count"));
        }
        let start = parse_value(parts[0], axis, model, spec)?;
        let stop = parse_value(parts[1], axis, model, spec)?;
        let count: usize = parts[2]
            .trim()
            .parse()
            .map_err(|_| bad(spec, "count must be a positive integer"))?;
        match count {
            0 => return Err(bad(spec, "count must be a positive integer")),
            1 => vec![start],
            n => (0..n)
                .map(|i| start + (stop - start) * i as f64 / (n - 1) as f64)
                .collect(),
        }
    } else {
        rhs.split(',')
            .map(|v| parse_value(v, axis, model, spec))
            .collect::<Result<_>>()?
    };
    let mut values = Vec::with_capacity(raw.len());
    for v in raw {
        if !(v.is_finite() && v >= 1.0) {
            return Err(bad(spec, format!("value {v} must be at least 1")));
        }
        values.push(v.round() as u64);
    }
    Ok(Vary { axis, values })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SweepRow {
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
    pub regime: &'static str,
    pub utilization: f64,
}

/// Cartesian product of the axes over `base`, evaluated in parallel. Rows
/// come back in grid order with the first axis varying slowest; points
/// where one sequence does not fit are dropped and counted.
pub fn run_sweep(base: &Stage2Inputs, axes: &[Vary]) -> (Vec<SweepRow>, usize) {
    let mut points = vec![*base];
    for v in axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                v.values.iter().map(move |&x| {
                    let mut q = p;
                    match v.axis {
                        Axis::KvCapacity => q.capacity_tokens = x,
                        Axis::K => q.k = x,
                        Axis::P => q.p = x,
                        Axis::G => q.g = x,
                        Axis::BlockSize => q.block_size = x,
                    }
                    q
                })
            })
            .collect();
    }
    let results: Vec<Option<SweepRow>> = points
        .par_iter()
        .map(|x| {
            predict(x).ok().map(|r| SweepRow {
                capacity_tokens: r.capacity_tokens,
                block_size: r.block_size,
                k: r.k,
                p: r.p,
                g: r.g,
                q: r.q,
                t1: r.t1,
                t2: r.t2,
                t: r.t,
                regime: r.regime.as_str(),
                utilization: r.utilization,
            })
        })
        .collect();
    let skipped = results.iter().filter(|r| r.is_none()).count();
    (results.into_iter().flatten().collect(), skipped)
}
