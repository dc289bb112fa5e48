use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use log::info;

use dcsim::experiment::{self, ExperimentGrid, SimulationFile};
use dcsim::workload::{generate_synthetic, load_trace_dir};
use dcsim::{DetectorConfig, Mode, SelectorConfig, SelectorKind, Workload};

#[derive(Parser)]
#[command(
    name = "dcsim",
    version,
    about = "Energy-aware VM consolidation simulator"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one simulation and write result.json and steps.csv.
    Simulate(SimulateArgs),
    /// Run every combination of a grid and write the summaries.
    Experiment {
        /// TOML grid file; the built-in 81-combo grid when omitted.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Rebuild the summaries from a stored results.json.
    Summarize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct SimulateArgs {
    /// TOML file with [dc] and [engine] tables; defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Directory of trace files, one VM trace per file.
    #[arg(
        long,
        conflicts_with = "synthetic",
        required_unless_present = "synthetic"
    )]
    traces: Option<PathBuf>,
    /// Synthetic traces, e.g. `seed=1,vms=100,mean=0.3`.
    #[arg(long)]
    synthetic: Option<SyntheticSpec>,
    #[arg(long, default_value = "consolidation")]
    mode: Mode,
    /// Overload detector, e.g. `lr:1.2` or `thr:0.8`.
    #[arg(long)]
    policy: Option<DetectorConfig>,
    #[arg(long, default_value = "mmt")]
    selector: SelectorKind,
    /// Bind several VMs to one trace when there are fewer traces than VMs.
    #[arg(long)]
    allow_trace_reuse: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy)]
struct SyntheticSpec {
    seed: u64,
    vms: Option<usize>,
    mean: f64,
}

impl FromStr for SyntheticSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let mut spec = SyntheticSpec {
            seed: 0,
            vms: None,
            mean: 0.3,
        };
        let mut seen_seed = false;
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| format!("`{part}` is not key=value"))?;
            let bad = |e: &dyn std::fmt::Display| format!("{key}: {e}");
            match key.trim() {
                "seed" => {
                    spec.seed = value.trim().parse().map_err(|e| bad(&e))?;
                    seen_seed = true;
                }
                "vms" => spec.vms = Some(value.trim().parse().map_err(|e| bad(&e))?),
                "mean" => spec.mean = value.trim().parse().map_err(|e| bad(&e))?,
                other => return Err(format!("unknown key `{other}` (seed, vms, mean)")),
            }
        }
        if !seen_seed {
            return Err("seed is required".into());
        }
        Ok(spec)
    }
}

fn write(path: &Path, bytes: &[u8]) -> anyhow::Result<()> {
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

fn simulate(args: SimulateArgs) -> anyhow::Result<()> {
    let file = match &args.config {
        Some(path) => SimulationFile::from_file(path)?,
        None => SimulationFile::default(),
    };
    let mut cfg = file.simulation_config(args.mode);
    if let Some(n) = args.synthetic.and_then(|s| s.vms) {
        cfg.dc.n_vms = n;
    }
    match args.mode {
        Mode::Consolidation => {
            let Some(detector) = args.policy else {
                bail!("consolidation mode needs --policy");
            };
            cfg.detector = Some(detector);
            cfg.selector = Some(SelectorConfig::new(args.selector, cfg.dc.rng_seed));
        }
        mode if args.policy.is_some() => bail!("--policy does not apply to {mode} mode"),
        _ => {}
    }
    cfg.validate()?;

    let traces = match (&args.traces, args.synthetic) {
        (Some(dir), _) => load_trace_dir(dir)?,
        (None, Some(s)) => generate_synthetic(s.seed, cfg.dc.n_vms, cfg.horizon_steps, s.mean)?,
        (None, None) => unreachable!("clap requires one trace source"),
    };
    let workload = Workload::bind(&traces, &cfg.dc, args.allow_trace_reuse)?;
    let result = dcsim::engine::run(cfg, workload)?;

    fs::create_dir_all(&args.out).with_context(|| format!("creating {}", args.out.display()))?;
    let mut json = serde_json::to_vec_pretty(&result)?;
    json.push(b'\n');
    write(&args.out.join("result.json"), &json)?;
    write(
        &args.out.join("steps.csv"),
        &experiment::steps_csv(&result)?,
    )?;
    println!("{}", experiment::describe(&result));
    Ok(())
}

/// Returns the number of failed runs.
fn run_grid(grid: Option<PathBuf>, out: PathBuf, jobs: usize) -> anyhow::Result<usize> {
    let grid = match grid {
        Some(path) => ExperimentGrid::from_file(path)?,
        None => ExperimentGrid::default(),
    };
    let store = experiment::run_experiment(&grid, jobs)?;
    experiment::emit_summaries(&store, &out)?;
    let failed = store.failed();
    println!(
        "{} runs, {} failed; summaries in {}",
        store.runs.len(),
        failed,
        out.display()
    );
    Ok(failed)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    // Usage errors are configuration errors; exit code 2 means failed runs.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let outcome = match cli.command {
        Command::Simulate(args) => simulate(args).map(|()| 0),
        Command::Experiment { grid, out, jobs } => run_grid(grid, out, jobs),
        Command::Summarize { input, out } => experiment::summarize(&input, &out)
            .map(|store| {
                info!("summarized {} runs", store.runs.len());
                store.failed()
            })
            .map_err(Into::into),
    };
    match outcome {
        Ok(0) => ExitCode::SUCCESS,
        Ok(_) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
