mod sweep;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use moe_offload_core::config::{load_scenario_with_overrides, Scenario};
use moe_offload_core::scheduler::write_plan_trace;
use moe_offload_core::sim::profiler::{default_token_grid, per_layer_weight_io};
use moe_offload_core::sim::{
    profiler_fit, simulate_run, synthesize_profile_samples, write_iteration_trace, SimTrace,
};
use moe_offload_core::stage1::{self, utilization_surface};
use moe_offload_core::stage2::{self, Stage2Inputs};
use moe_offload_core::workload::{ingest_trace, write_trace, LengthDistribution};
use moe_offload_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "moe-offload",
    version,
    about = "MoE offloading throughput model and pipeline simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Scenario TOML file.
    #[arg(long)]
    scenario: PathBuf,
    /// Directory for CSV and summary files; created if missing.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Override a scenario value, e.g. `--set kv_cache.capacity_gb=210`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Clone)]
struct Stage1Args {
    #[command(flatten)]
    common: Common,
    /// Also write the utilization surface CSV over these prompt lengths.
    #[arg(long, value_delimiter = ',', default_value = "32,64,128,256,512,1024")]
    p_values: Vec<u64>,
    #[arg(long, value_delimiter = ',', default_value = "32,64,128,256,512,1024")]
    g_values: Vec<u64>,
}

#[derive(Subcommand)]
enum Stage {
    /// Throughput ceiling and CPU resource requirements.
    Stage1(Stage1Args),
    /// Workload-aware prediction under a paged KV cache.
    Stage2(Common),
}

#[derive(Subcommand)]
enum TraceCommand {
    /// Print length statistics of a `prompt_len,gen_len` trace.
    Stats { path: PathBuf },
    /// Write a synthetic trace from a named length preset.
    Generate {
        /// mtbench, rag or aime.
        #[arg(long)]
        preset: String,
        #[arg(long)]
        count: usize,
        /// Generation length for mtbench.
        #[arg(long, default_value_t = 32)]
        g_max: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
    },
}

#[derive(Subcommand)]
enum Command {
    Predict {
        #[command(subcommand)]
        stage: Stage,
    },
    #[command(name = "predict-stage1", hide = true)]
    PredictStage1(Stage1Args),
    #[command(name = "predict-stage2", hide = true)]
    PredictStage2(Common),
    /// Run the scheduler and pipeline simulator to completion.
    Simulate(Common),
    /// Stage-2 predictions over a parameter grid.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `key=start:stop:count` or `key=a,b,c`; keys kv_capacity, K, p,
        /// g, block_size. Capacities accept GB/MB/KB suffixes.
        #[arg(long, required = true)]
        vary: Vec<String>,
    },
    /// Synthesize profiler samples and fit the token threshold.
    ProfileFit(Common),
    /// Compare simulated throughput against the Stage-2 prediction.
    Validate {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.10)]
        tolerance: f64,
    },
    #[command(subcommand)]
    Trace(TraceCommand),
}

fn load(c: &Common) -> Result<Scenario> {
    let text = fs::read_to_string(&c.scenario).map_err(|e| Error::Config {
        key: c.scenario.display().to_string(),
        message: e.to_string(),
    })?;
    load_scenario_with_overrides(&text, &c.overrides, c.scenario.parent(), c.seed)
}

fn out_dir(c: &Common) -> Result<Option<&Path>> {
    match &c.output_dir {
        Some(d) => {
            fs::create_dir_all(d)?;
            Ok(Some(d.as_path()))
        }
        None => Ok(None),
    }
}

fn create(dir: &Path, name: &str) -> Result<fs::File> {
    Ok(fs::File::create(dir.join(name))?)
}

/// `key=value` lines from a flat struct.
fn key_values<T: Serialize>(v: &T) -> String {
    let json = serde_json::to_value(v).expect("report serializes");
    let mut out = String::new();
    if let serde_json::Value::Object(map) = json {
        for (k, v) in map {
            let s = match v {
                serde_json::Value::Null => String::new(),
                serde_json::Value::String(s) => s,
                other => other.to_string(),
            };
            out.push_str(&format!("{k}={s}\n"));
        }
    }
    out
}

fn stage2_inputs(s: &Scenario) -> Stage2Inputs {
    let (p, g, k) = s.workload.summary();
    Stage2Inputs {
        capacity_tokens: s.kv_cache.capacity_tokens,
        block_size: s.kv_cache.block_size,
        k,
        p,
        g,
        t_gpu: stage1::t_gpu(&s.hardware, &s.model),
        delta: stage1::weight_transfer_time(&s.hardware, &s.model),
    }
}

fn predict_stage1(a: &Stage1Args) -> Result<u8> {
    let s = load(&a.common)?;
    let report = stage1::report(&s)?;
    let text = key_values(&report);
    print!("{text}");
    if let Some(dir) = out_dir(&a.common)? {
        fs::write(dir.join("stage1.txt"), &text)?;
        let surface = utilization_surface(
            &s.hardware,
            &s.model,
            s.kv_cache.capacity_tokens as f64,
            report.t_gpu,
            &a.p_values,
            &a.g_values,
        )?;
        let mut w = csv::Writer::from_writer(create(dir, "surface.csv")?);
        w.write_record(["p", "g", "utilization"]).map_err(csv_err)?;
        for (p, g, u) in surface.cells() {
            w.write_record([p.to_string(), g.to_string(), u.to_string()])
                .map_err(csv_err)?;
        }
        w.flush()?;
    }
    Ok(0)
}

fn predict_stage2(c: &Common) -> Result<u8> {
    let s = load(c)?;
    let r = stage2::predict(&stage2_inputs(&s))?;
    let text = key_values(&r);
    print!("{text}");
    if let Some(dir) = out_dir(c)? {
        fs::write(dir.join("stage2.txt"), &text)?;
    }
    Ok(0)
}

fn write_sim_outputs(dir: &Path, trace: &SimTrace, s: &Scenario, seed: u64) -> Result<()> {
    write_iteration_trace(create(dir, "trace.csv")?, &trace.records)?;
    // replay the schedule for the plan-level view; it is deterministic
    let plans = moe_offload_core::scheduler::run_schedule(
        &s.workload,
        s.kv_cache.num_blocks,
        s.kv_cache.block_size,
        trace.summary.n_real,
        s.options.max_iterations,
    )?;
    write_plan_trace(create(dir, "plan.csv")?, &plans.plans)?;
    let mut f = create(dir, "summary.json")?;
    serde_json::to_writer_pretty(&mut f, &summary_doc(trace, seed)).map_err(json_err)?;
    writeln!(f)?;
    Ok(())
}

fn summary_doc(trace: &SimTrace, seed: u64) -> serde_json::Value {
    serde_json::json!({
        "seed": seed,
        "summary": trace.summary,
        "profiler": trace.profiler,
    })
}

fn simulate(c: &Common) -> Result<u8> {
    let s = load(c)?;
    let trace = simulate_run(&s, c.seed)?;
    if let Some(dir) = out_dir(c)? {
        write_sim_outputs(dir, &trace, &s, c.seed)?;
    }
    println!(
        "{}",
        serde_json::to_string_pretty(&summary_doc(&trace, c.seed)).map_err(json_err)?
    );
    Ok(0)
}

fn run_sweep(c: &Common, vary: &[String]) -> Result<u8> {
    let s = load(c)?;
    let axes = vary
        .iter()
        .map(|v| sweep::parse_vary(v, &s.model))
        .collect::<Result<Vec<_>>>()?;
    let (rows, skipped) = sweep::run_sweep(&stage2_inputs(&s), &axes);
    if skipped > 0 {
        eprintln!("skipped {skipped} points where one sequence exceeds the cache");
    }
    let sink: Box<dyn Write> = match out_dir(c)? {
        Some(dir) => Box::new(create(dir, "sweep.csv")?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    for r in &rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(0)
}

fn profile_fit_cmd(c: &Common) -> Result<u8> {
    let s = load(c)?;
    let grid = default_token_grid(&s.hardware, &s.model, s.options.profile_points);
    let samples = synthesize_profile_samples(
        &s.hardware,
        &s.model,
        &grid,
        s.options.profile_noise,
        c.seed,
    )?;
    let layer_io = per_layer_weight_io(&s.hardware, &s.model);
    let fit = profiler_fit(&samples, layer_io)?;
    print!("{}", key_values(&fit));
    println!("per_layer_weight_io={layer_io}");
    if let Some(dir) = out_dir(c)? {
        let mut w = csv::Writer::from_writer(create(dir, "profile.csv")?);
        w.write_record(["tokens", "gpu_seconds"]).map_err(csv_err)?;
        for (n, t) in &samples {
            w.write_record([n.to_string(), t.to_string()])
                .map_err(csv_err)?;
        }
        w.flush()?;
    }
    Ok(0)
}

fn validate(c: &Common, tolerance: f64) -> Result<u8> {
    let s = load(c)?;
    let predicted = stage2::predict(&stage2_inputs(&s))?;
    let trace = simulate_run(&s, c.seed)?;
    let simulated = trace.summary.generation_throughput;
    let rel = (simulated - predicted.t).abs() / predicted.t;
    let pass = rel <= tolerance;
    println!("simulated_throughput={simulated}");
    println!("predicted_throughput={}", predicted.t);
    println!("predicted_regime={}", predicted.regime);
    println!("relative_error={rel}");
    println!("tolerance={tolerance}");
    println!("result={}", if pass { "pass" } else { "fail" });
    if let Some(dir) = out_dir(c)? {
        write_sim_outputs(dir, &trace, &s, c.seed)?;
    }
    Ok(if pass { 0 } else { 1 })
}

fn trace_cmd(t: &TraceCommand) -> Result<u8> {
    match t {
        TraceCommand::Stats { path } => {
            let w = ingest_trace(path)?;
            print!("{}", key_values(&w.stats()));
        }
        TraceCommand::Generate {
            preset,
            count,
            g_max,
            seed,
            output,
        } => {
            let dist = match preset.as_str() {
                "mtbench" => LengthDistribution::mtbench(*g_max, *count, *seed),
                "rag" => LengthDistribution::rag(*count, *seed),
                "aime" => LengthDistribution::aime(*count, *seed),
                other => {
                    return Err(Error::Config {
                        key: "--preset".into(),
                        message: format!("unknown preset `{other}`"),
                    })
                }
            };
            let w = dist.sample()?;
            write_trace(fs::File::create(output)?, &w)?;
            print!("{}", key_values(&w.stats()));
        }
    }
    Ok(0)
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn json_err(e: serde_json::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::Trace { .. } | Error::Io(_) => 2,
        Error::Infeasible(_) | Error::NotApplicable(_) => 3,
        Error::Fit(_) | Error::Internal(_) => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Predict {
            stage: Stage::Stage1(a),
        }
        | Command::PredictStage1(a) => predict_stage1(a),
        Command::Predict {
            stage: Stage::Stage2(c),
        }
        | Command::PredictStage2(c) => predict_stage2(c),
        Command::Simulate(c) => simulate(c),
        Command::Sweep { common, vary } => run_sweep(common, vary),
        Command::ProfileFit(c) => profile_fit_cmd(c),
        Command::Validate { common, tolerance } => validate(common, *tolerance),
        Command::Trace(t) => trace_cmd(t),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
