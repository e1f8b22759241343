//! Request batches: inline pairs, trace files, and seeded synthetic
//! generators shaped after common benchmark statistics.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::config::{get_u64, require};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceSpec {
    pub prompt_len: u64,
    pub gen_len: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct WorkloadSpec {
    pub sequences: Vec<SequenceSpec>,
}

/// Mean and max of prompt and generation lengths.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct WorkloadStats {
    pub count: usize,
    pub prompt_mean: f64,
    pub prompt_max: u64,
    pub gen_mean: f64,
    pub gen_max: u64,
}

impl WorkloadSpec {
    pub fn uniform(prompt_len: u64, gen_len: u64, count: usize) -> Self {
        WorkloadSpec {
            sequences: vec![
                SequenceSpec {
                    prompt_len,
                    gen_len
                };
                count
            ],
        }
    }

    pub fn batch_size(&self) -> usize {
        self.sequences.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.sequences.is_empty() {
            return Err(Error::config("workload", "no sequences"));
        }
        for (i, s) in self.sequences.iter().enumerate() {
            if s.prompt_len == 0 || s.gen_len == 0 {
                return Err(Error::config(
                    format!("workload.sequences[{i}]"),
                    "prompt_len and gen_len must be at least 1",
                ));
            }
        }
        Ok(())
    }

    pub fn stats(&self) -> WorkloadStats {
        let n = self.sequences.len().max(1) as f64;
        WorkloadStats {
            count: self.sequences.len(),
            prompt_mean: self
                .sequences
                .iter()
                .map(|s| s.prompt_len as f64)
                .sum::<f64>()
                / n,
            prompt_max: self
                .sequences
                .iter()
                .map(|s| s.prompt_len)
                .max()
                .unwrap_or(0),
            gen_mean: self.sequences.iter().map(|s| s.gen_len as f64).sum::<f64>() / n,
            gen_max: self.sequences.iter().map(|s| s.gen_len).max().unwrap_or(0),
        }
    }

    /// `(p, g, K)` for the closed-form models: rounded mean lengths and the
    /// batch size.
    pub fn summary(&self) -> (u64, u64, u64) {
        let st = self.stats();
        (
            (st.prompt_mean.round() as u64).max(1),
            (st.gen_mean.round() as u64).max(1),
            st.count as u64,
        )
    }

    pub fn total_generation(&self) -> u64 {
        self.sequences.iter().map(|s| s.gen_len).sum()
    }
}

/// Truncated log-normal prompt lengths fit to a mean and a maximum, with a
/// fixed generation length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthDistribution {
    pub p_mean: f64,
    pub p_max: u64,
    pub g_max: u64,
    pub count: usize,
    pub seed: u64,
}

// z-score of the quantile pinned to p_max
const MAX_QUANTILE_Z: f64 = 3.09;

impl LengthDistribution {
    pub fn mtbench(g_max: u64, count: usize, seed: u64) -> Self {
        LengthDistribution {
            p_mean: 98.0,
            p_max: 450,
            g_max,
            count,
            seed,
        }
    }

    pub fn rag(count: usize, seed: u64) -> Self {
        LengthDistribution {
            p_mean: 926.0,
            p_max: 1843,
            g_max: 128,
            count,
            seed,
        }
    }

    pub fn aime(count: usize, seed: u64) -> Self {
        LengthDistribution {
            p_mean: 128.0,
            p_max: 410,
            g_max: 512,
            count,
            seed,
        }
    }

    /// Log-normal `(mu, sigma)` with mean `p_mean` and `p_max` at the
    /// 99.9th percentile.
    pub fn lognormal_params(&self) -> Result<(f64, f64)> {
        let ratio = self.p_max as f64 / self.p_mean;
        if !(self.p_mean >= 1.0 && ratio > 1.0) {
            return Err(Error::config(
                "workload.distribution",
                "need 1 <= p_mean < p_max",
            ));
        }
        let z = MAX_QUANTILE_Z;
        // ln(max/mean) = z·sigma - sigma²/2, smaller root
        let disc = z * z - 2.0 * ratio.ln();
        if disc < 0.0 {
            return Err(Error::config(
                "workload.distribution",
                "p_max too far above p_mean for a log-normal fit",
            ));
        }
        let sigma = z - disc.sqrt();
        let mu = self.p_mean.ln() - sigma * sigma / 2.0;
        Ok((mu, sigma))
    }

    pub fn sample(&self) -> Result<WorkloadSpec> {
        if self.count == 0 || self.g_max == 0 {
            return Err(Error::config(
                "workload.distribution",
                "count and g_max must be positive",
            ));
        }
        let (mu, sigma) = self.lognormal_params()?;
        let dist = LogNormal::new(mu, sigma)
            .map_err(|e| Error::config("workload.distribution", e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut sequences = Vec::with_capacity(self.count);
        while sequences.len() < self.count {
            let x: f64 = dist.sample(&mut rng);
            let p = x.round();
            if p > self.p_max as f64 {
                continue;
            }
            sequences.push(SequenceSpec {
                prompt_len: (p as u64).max(1),
                gen_len: self.g_max,
            });
        }
        Ok(WorkloadSpec { sequences })
    }
}

/// Read a trace: CSV with a `prompt_len,gen_len` header, one record per line.
pub fn ingest_trace(path: &Path) -> Result<WorkloadSpec> {
    let text = std::fs::read_to_string(path)?;
    parse_trace(&text, &path.display().to_string())
}

pub fn parse_trace(text: &str, origin: &str) -> Result<WorkloadSpec> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(text.as_bytes());
    let mut sequences = Vec::new();
    for record in reader.deserialize::<SequenceSpec>() {
        let spec = record.map_err(|e| Error::Trace {
            path: origin.to_string(),
            line: e.position().map(|p| p.line()).unwrap_or(0),
            message: e.to_string(),
        })?;
        if spec.prompt_len == 0 || spec.gen_len == 0 {
            return Err(Error::Trace {
                path: origin.to_string(),
                line: reader.position().line(),
                message: "prompt_len and gen_len must be at least 1".into(),
            });
        }
        sequences.push(spec);
    }
    if sequences.is_empty() {
        return Err(Error::Trace {
            path: origin.to_string(),
            line: 0,
            message: "trace contains no records".into(),
        });
    }
    Ok(WorkloadSpec { sequences })
}

pub fn write_trace<W: std::io::Write>(w: W, workload: &WorkloadSpec) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for s in &workload.sequences {
        out.serialize(s).map_err(csv_io)?;
    }
    out.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

pub(crate) fn parse_workload_section(
    t: &Table,
    base_dir: Option<&Path>,
    default_seed: u64,
) -> Result<WorkloadSpec> {
    let forms = ["sequences", "trace", "distribution", "uniform", "preset"];
    let present: Vec<&str> = forms
        .iter()
        .copied()
        .filter(|k| t.contains_key(*k))
        .collect();
    if present.len() != 1 {
        return Err(Error::config(
            "workload",
            format!(
                "expected exactly one of {}, found {}",
                forms.join(", "),
                present.len()
            ),
        ));
    }
    let wl = match present[0] {
        "sequences" => parse_pairs(&t["sequences"])?,
        "trace" => {
            let Value::String(p) = &t["trace"] else {
                return Err(Error::config("workload.trace", "expected a path string"));
            };
            let path = match base_dir {
                Some(dir) => dir.join(p),
                None => p.into(),
            };
            ingest_trace(&path)?
        }
        "distribution" => {
            let d = sub_table(t, "distribution")?;
            let sec = "workload.distribution";
            let p_mean = crate::config::get_f64(d, sec, "p_mean")?;
            LengthDistribution {
                p_mean: require(p_mean, sec, "p_mean")?,
                p_max: require(get_u64(d, sec, "p_max")?, sec, "p_max")?,
                g_max: require(get_u64(d, sec, "g_max")?, sec, "g_max")?,
                count: require(get_u64(d, sec, "count")?, sec, "count")? as usize,
                seed: get_u64(d, sec, "seed")?.unwrap_or(default_seed),
            }
            .sample()?
        }
        "uniform" => {
            let u = sub_table(t, "uniform")?;
            let sec = "workload.uniform";
            WorkloadSpec::uniform(
                require(get_u64(u, sec, "prompt_len")?, sec, "prompt_len")?,
                require(get_u64(u, sec, "gen_len")?, sec, "gen_len")?,
                require(get_u64(u, sec, "count")?, sec, "count")? as usize,
            )
        }
        _ => {
            let u = sub_table(t, "preset")?;
            let sec = "workload.preset";
            let Some(Value::String(name)) = u.get("name") else {
                return Err(Error::config("workload.preset.name", "missing key"));
            };
            let count = require(get_u64(u, sec, "count")?, sec, "count")? as usize;
            let seed = get_u64(u, sec, "seed")?.unwrap_or(default_seed);
            let dist = match name.as_str() {
                "mtbench" => {
                    let g = require(get_u64(u, sec, "g_max")?, sec, "g_max")?;
                    LengthDistribution::mtbench(g, count, seed)
                }
                "rag" => LengthDistribution::rag(count, seed),
                "aime" => LengthDistribution::aime(count, seed),
                other => {
                    return Err(Error::config(
                        "workload.preset.name",
                        format!("unknown preset `{other}`"),
                    ))
                }
            };
            dist.sample()?
        }
    };
    wl.validate()?;
    Ok(wl)
}

fn sub_table<'a>(t: &'a Table, key: &str) -> Result<&'a Table> {
    t.get(key)
        .and_then(Value::as_table)
        .ok_or_else(|| Error::config(format!("workload.{key}"), "expected a table"))
}

fn parse_pairs(v: &Value) -> Result<WorkloadSpec> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::config("workload.sequences", "expected an array of [p, g]"))?;
    let mut sequences = Vec::with_capacity(arr.len());
    for (i, item) in arr.iter().enumerate() {
        let key = || format!("workload.sequences[{i}]");
        let pair = item
            .as_array()
            .filter(|a| a.len() == 2)
            .ok_or_else(|| Error::config(key(), "expected [prompt_len, gen_len]"))?;
        let num = |v: &Value| -> Result<u64> {
            match v {
                Value::Integer(n) if *n >= 0 => Ok(*n as u64),
                _ => Err(Error::config(
                    key(),
                    "lengths must be non-negative integers",
                )),
            }
        };
        sequences.push(SequenceSpec {
            prompt_len: num(&pair[0])?,
            gen_len: num(&pair[1])?,
        });
    }
    Ok(WorkloadSpec { sequences })
}
