//! Batch experiments: expand a policy grid over trace days and seeds, run
//! every simulation, and write per-run and median summaries.
//!
//! Output bytes depend only on the grid, never on the number of worker
//! threads: records are sorted by [`RunKey`] before anything is written.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detection::{DetectorConfig, DetectorKind};
use crate::engine::{self, Mode, SimulationConfig, Workload};
use crate::error::{Error, Result};
use crate::metrics::{aggregate_median, MedianReport, MetricsReport};
use crate::model::DataCenterConfig;
use crate::selection::{SelectorConfig, SelectorKind};
use crate::workload::{generate_synthetic, load_trace_dir, TraceSet, SAMPLES_PER_DAY};

pub const RUNS_CSV: &str = "runs.csv";
pub const RESULTS_JSON: &str = "results.json";
pub const EXPERIMENT_JSON: &str = "experiment.json";
pub const ENERGY_CSV: &str = "energy_median.csv";
pub const SLAV_CSV: &str = "slav_median.csv";
pub const MIGRATIONS_CSV: &str = "migrations_median.csv";
pub const ESV_CSV: &str = "esv_median.csv";

/// Safety/threshold values per detector. Expanded in the order
/// thr, mad, iqr, lr, lrr.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorGrid {
    #[serde(default)]
    pub thr: Vec<f64>,
    #[serde(default)]
    pub mad: Vec<f64>,
    #[serde(default)]
    pub iqr: Vec<f64>,
    #[serde(default)]
    pub lr: Vec<f64>,
    #[serde(default)]
    pub lrr: Vec<f64>,
}

impl Default for DetectorGrid {
    fn default() -> Self {
        DetectorGrid {
            thr: vec![0.6, 0.7, 0.8, 0.9, 1.0],
            mad: vec![1.5, 2.0, 2.5, 3.0, 3.5],
            iqr: vec![0.5, 1.0, 1.5, 2.0, 2.5, 3.0],
            lr: vec![1.0, 1.1, 1.2, 1.3, 1.4, 1.5, 1.6],
            lrr: vec![1.0, 1.1, 1.2, 1.3],
        }
    }
}

impl DetectorGrid {
    pub fn configs(&self) -> Result<Vec<DetectorConfig>> {
        let kinds = [
            (
                &self.thr,
                (|p| DetectorKind::Thr { threshold: p }) as fn(f64) -> DetectorKind,
            ),
            (&self.mad, |p| DetectorKind::Mad { safety: p }),
            (&self.iqr, |p| DetectorKind::Iqr { safety: p }),
            (&self.lr, |p| DetectorKind::Lr { safety: p }),
            (&self.lrr, |p| DetectorKind::Lrr { safety: p }),
        ];
        kinds
            .iter()
            .flat_map(|(params, make)| params.iter().map(move |&p| DetectorConfig::new(make(p))))
            .collect()
    }
}

/// One workload day: a directory of trace files or a synthetic seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged, deny_unknown_fields)]
pub enum DaySource {
    Dir {
        dir: PathBuf,
    },
    Synthetic {
        synthetic: u64,
        #[serde(default = "default_mean")]
        mean: f64,
    },
}

fn default_mean() -> f64 {
    0.3
}

impl DaySource {
    pub fn label(&self) -> String {
        match self {
            DaySource::Dir { dir } => dir
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_else(|| dir.display().to_string()),
            DaySource::Synthetic { synthetic, .. } => format!("synthetic-{synthetic}"),
        }
    }

    /// Loads the day. Synthetic days get one trace per VM covering the horizon.
    pub fn load(&self, n_vms: usize, horizon_steps: usize) -> Result<TraceSet> {
        match self {
            DaySource::Dir { dir } => load_trace_dir(dir),
            DaySource::Synthetic { synthetic, mean } => {
                generate_synthetic(*synthetic, n_vms, horizon_steps, *mean)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineOverrides {
    pub bandwidth_bps: f64,
    pub migration_bandwidth_share: f64,
    pub migration_degradation: f64,
    pub horizon_steps: usize,
    /// Let several VMs share one trace when a day has fewer traces than VMs.
    pub allow_trace_reuse: bool,
}

impl Default for EngineOverrides {
    fn default() -> Self {
        let base = SimulationConfig::new(DataCenterConfig::default(), Mode::Npa, SAMPLES_PER_DAY);
        EngineOverrides {
            bandwidth_bps: base.bandwidth_bps,
            migration_bandwidth_share: base.migration_bandwidth_share,
            migration_degradation: base.migration_degradation,
            horizon_steps: base.horizon_steps,
            allow_trace_reuse: false,
        }
    }
}

/// Experiment description, usually read from a TOML grid file. Every key
/// is optional; omitted keys take the defaults below (81 combos over ten
/// synthetic days, no baselines).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentGrid {
    pub selectors: Vec<SelectorKind>,
    /// Seeds for host/VM capacities, trace binding and random selection.
    pub seeds: Vec<u64>,
    /// Append NPA and DVFS runs for every day and seed.
    pub baselines: bool,
    pub detectors: DetectorGrid,
    pub days: Vec<DaySource>,
    pub dc: DataCenterConfig,
    pub engine: EngineOverrides,
}

impl Default for ExperimentGrid {
    fn default() -> Self {
        ExperimentGrid {
            selectors: vec![SelectorKind::Mmt, SelectorKind::Rc, SelectorKind::Mc],
            seeds: vec![DataCenterConfig::default().rng_seed],
            baselines: false,
            detectors: DetectorGrid::default(),
            days: (1..=10)
                .map(|synthetic| DaySource::Synthetic {
                    synthetic,
                    mean: default_mean(),
                })
                .collect(),
            dc: DataCenterConfig::default(),
            engine: EngineOverrides::default(),
        }
    }
}

impl ExperimentGrid {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(e.to_string()))
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Serialize(e.to_string()))
    }
}

/// Settings file for a single simulation: the `[dc]` and `[engine]` tables
/// of a grid file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulationFile {
    pub dc: DataCenterConfig,
    pub engine: EngineOverrides,
}

impl SimulationFile {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    pub fn simulation_config(&self, mode: Mode) -> SimulationConfig {
        engine_config(&self.dc, &self.engine, mode)
    }
}

fn engine_config(dc: &DataCenterConfig, e: &EngineOverrides, mode: Mode) -> SimulationConfig {
    SimulationConfig {
        bandwidth_bps: e.bandwidth_bps,
        migration_bandwidth_share: e.migration_bandwidth_share,
        migration_degradation: e.migration_degradation,
        ..SimulationConfig::new(dc.clone(), mode, e.horizon_steps)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RunKey {
    pub combo: String,
    pub day: String,
    pub seed: u64,
}

/// Label in the `lr-mmt-1.2` style; baselines are `npa` and `dvfs`.
pub fn combo_label(detector: &DetectorConfig, selector: SelectorKind) -> String {
    format!(
        "{}-{}-{:?}",
        detector.kind.name(),
        selector,
        detector.kind.parameter()
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSpec {
    pub key: RunKey,
    /// Index into `grid.days`.
    pub day: usize,
    pub config: SimulationConfig,
}

/// Cartesian expansion ordered by detector kind, parameter, selector, day
/// and seed, with baselines last.
pub fn expand_grid(grid: &ExperimentGrid) -> Result<Vec<RunSpec>> {
    let detectors = grid.detectors.configs()?;
    let has_combos = !detectors.is_empty() && !grid.selectors.is_empty();
    if grid.days.is_empty() || grid.seeds.is_empty() || !(has_combos || grid.baselines) {
        return Err(Error::EmptyGrid);
    }
    let labels: Vec<String> = grid.days.iter().map(DaySource::label).collect();
    for (i, l) in labels.iter().enumerate() {
        if labels[..i].contains(l) {
            return Err(Error::config(format!("day label {l} appears twice")));
        }
    }

    let base = |mode: Mode, seed: u64| {
        let dc = DataCenterConfig {
            rng_seed: seed,
            ..grid.dc.clone()
        };
        engine_config(&dc, &grid.engine, mode)
    };
    let each_day_seed =
        |combo: &str, make: &dyn Fn(u64) -> SimulationConfig, out: &mut Vec<RunSpec>| {
            for (day, label) in labels.iter().enumerate() {
                for &seed in &grid.seeds {
                    out.push(RunSpec {
                        key: RunKey {
                            combo: combo.to_string(),
                            day: label.clone(),
                            seed,
                        },
                        day,
                        config: make(seed),
                    });
                }
            }
        };

    let mut runs = Vec::new();
    if has_combos {
        for det in &detectors {
            for &sel in &grid.selectors {
                let make = |seed| SimulationConfig {
                    detector: Some(*det),
                    selector: Some(SelectorConfig::new(sel, seed)),
                    ..base(Mode::Consolidation, seed)
                };
                each_day_seed(&combo_label(det, sel), &make, &mut runs);
            }
        }
    }
    if grid.baselines {
        for mode in [Mode::Npa, Mode::Dvfs] {
            each_day_seed(&mode.to_string(), &|seed| base(mode, seed), &mut runs);
        }
    }
    for r in &runs {
        r.config.validate()?;
    }
    Ok(runs)
}

/// Hex SHA-256 of the config's JSON form.
pub fn config_hash(cfg: &SimulationConfig) -> String {
    let json = serde_json::to_vec(cfg).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub key: RunKey,
    pub config_hash: String,
    pub report: Option<MetricsReport>,
    pub error: Option<String>,
}

impl RunRecord {
    pub fn is_ok(&self) -> bool {
        self.report.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultStore {
    pub grid: ExperimentGrid,
    /// Sorted by key.
    pub runs: Vec<RunRecord>,
}

impl ResultStore {
    pub fn failed(&self) -> usize {
        self.runs.iter().filter(|r| !r.is_ok()).count()
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let path = dir.as_ref().join(RESULTS_JSON);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text)
            .map_err(|e| Error::Serialize(format!("{}: {e}", path.display())))
    }

    pub fn medians(&self) -> std::collections::BTreeMap<String, MedianReport> {
        aggregate_median(
            self.runs
                .iter()
                .filter_map(|r| r.report.as_ref().map(|rep| (r.key.combo.as_str(), rep))),
        )
    }
}

fn run_one(
    spec: &RunSpec,
    days: &[Result<TraceSet, String>],
    allow_reuse: bool,
) -> (RunRecord, Duration) {
    let started = Instant::now();
    let outcome = days[spec.day]
        .as_ref()
        .map_err(Clone::clone)
        .and_then(|traces| {
            let workload =
                Workload::bind(traces, &spec.config.dc, allow_reuse).map_err(|e| e.to_string())?;
            engine::run(spec.config.clone(), workload).map_err(|e| e.to_string())
        });
    let elapsed = started.elapsed();
    let (report, error) = match outcome {
        Ok(result) => (Some(result.report()), None),
        Err(e) => {
            warn!(
                "{}/{}/{} failed: {e}",
                spec.key.combo, spec.key.day, spec.key.seed
            );
            (None, Some(e))
        }
    };
    info!(
        "{}/{}/{} done in {elapsed:.2?}",
        spec.key.combo, spec.key.day, spec.key.seed
    );
    let record = RunRecord {
        key: spec.key.clone(),
        config_hash: config_hash(&spec.config),
        report,
        error,
    };
    (record, elapsed)
}

type Timed = Vec<(RunRecord, Duration)>;

#[cfg(feature = "parallel")]
fn execute(
    specs: &[RunSpec],
    days: &[Result<TraceSet, String>],
    allow_reuse: bool,
    jobs: usize,
) -> Result<Timed> {
    use rayon::prelude::*;

    if jobs == 1 {
        return Ok(specs
            .iter()
            .map(|s| run_one(s, days, allow_reuse))
            .collect());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Error::config(format!("thread pool: {e}")))?;
    Ok(pool.install(|| {
        specs
            .par_iter()
            .map(|s| run_one(s, days, allow_reuse))
            .collect()
    }))
}

#[cfg(not(feature = "parallel"))]
fn execute(
    specs: &[RunSpec],
    days: &[Result<TraceSet, String>],
    allow_reuse: bool,
    jobs: usize,
) -> Result<Timed> {
    if jobs > 1 {
        warn!("built without the `parallel` feature; running {jobs} jobs sequentially");
    }
    Ok(specs
        .iter()
        .map(|s| run_one(s, days, allow_reuse))
        .collect())
}

/// Runs the whole grid on `jobs` worker threads. Failed runs (including
/// every run of a day whose traces cannot be loaded) become error records.
pub fn run_experiment(grid: &ExperimentGrid, jobs: usize) -> Result<ResultStore> {
    run_experiment_timed(grid, jobs).map(|(store, _)| store)
}

/// [`run_experiment`] plus each run's wall time, in the store's order.
/// Timings are kept out of the store so that it stays reproducible.
pub fn run_experiment_timed(
    grid: &ExperimentGrid,
    jobs: usize,
) -> Result<(ResultStore, Vec<Duration>)> {
    if jobs == 0 {
        return Err(Error::config("jobs must be >= 1"));
    }
    let specs = expand_grid(grid)?;
    let days: Vec<Result<TraceSet, String>> = grid
        .days
        .iter()
        .map(|d| {
            d.load(grid.dc.n_vms, grid.engine.horizon_steps)
                .map_err(|e| {
                    warn!("day {} unavailable: {e}", d.label());
                    e.to_string()
                })
        })
        .collect();
    info!("running {} simulations on {jobs} thread(s)", specs.len());
    let mut timed = execute(&specs, &days, grid.engine.allow_trace_reuse, jobs)?;
    timed.sort_by(|a, b| a.0.key.cmp(&b.0.key));
    let (runs, times) = timed.into_iter().unzip();
    Ok((
        ResultStore {
            grid: grid.clone(),
            runs,
        },
        times,
    ))
}

fn write_file(path: &Path, contents: &[u8]) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new())
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| Error::Serialize(e.to_string()))
}

fn csv_err(e: csv::Error) -> Error {
    Error::Serialize(e.to_string())
}

fn fixed(v: f64) -> String {
    format!("{v:.6}")
}

pub fn runs_csv(store: &ResultStore) -> Result<Vec<u8>> {
    let mut w = csv_writer();
    w.write_record([
        "combo_label",
        "day",
        "seed",
        "status",
        "config_hash",
        "energy_kwh",
        "sla_violation",
        "slatah",
        "pdm",
        "esv",
        "migrations",
        "error",
    ])
    .map_err(csv_err)?;
    for r in &store.runs {
        let seed = r.key.seed.to_string();
        let mut row = vec![r.key.combo.clone(), r.key.day.clone(), seed];
        match &r.report {
            Some(m) => row.extend([
                "ok".to_string(),
                r.config_hash.clone(),
                fixed(m.energy_kwh),
                fixed(m.sla_violation),
                fixed(m.components.slatah),
                fixed(m.components.pdm),
                fixed(m.esv),
                m.migrations.to_string(),
                String::new(),
            ]),
            None => {
                row.extend(["failed".to_string(), r.config_hash.clone()]);
                row.extend(std::iter::repeat_n(String::new(), 6));
                row.push(r.error.clone().unwrap_or_default());
            }
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    finish_csv(w)
}

/// `combo_label,median_value` rows sorted by label.
pub fn median_csv(
    medians: &std::collections::BTreeMap<String, MedianReport>,
    metric: fn(&MedianReport) -> f64,
) -> Result<Vec<u8>> {
    let mut w = csv_writer();
    w.write_record(["combo_label", "median_value"])
        .map_err(csv_err)?;
    for (combo, m) in medians {
        w.write_record([combo.as_str(), &fixed(metric(m))])
            .map_err(csv_err)?;
    }
    finish_csv(w)
}

#[derive(Serialize)]
struct ExperimentManifest<'a> {
    grid: &'a ExperimentGrid,
    runs: Vec<ManifestRun>,
}

#[derive(Serialize)]
struct ManifestRun {
    key: RunKey,
    config_hash: String,
    config: SimulationConfig,
}

fn to_json<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut bytes =
        serde_json::to_vec_pretty(value).map_err(|e| Error::Serialize(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}

/// Writes the result store, run table, figure CSVs and experiment manifest.
pub fn emit_summaries(store: &ResultStore, out_dir: impl AsRef<Path>) -> Result<()> {
    if store.runs.is_empty() {
        return Err(Error::EmptyGrid);
    }
    let out = out_dir.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;

    let mut runs: Vec<ManifestRun> = expand_grid(&store.grid)?
        .into_iter()
        .map(|s| ManifestRun {
            config_hash: config_hash(&s.config),
            key: s.key,
            config: s.config,
        })
        .collect();
    runs.sort_by(|a, b| a.key.cmp(&b.key));
    let manifest = ExperimentManifest {
        grid: &store.grid,
        runs,
    };

    let medians = store.medians();
    write_file(&out.join(RESULTS_JSON), &to_json(store)?)?;
    write_file(&out.join(EXPERIMENT_JSON), &to_json(&manifest)?)?;
    write_file(&out.join(RUNS_CSV), &runs_csv(store)?)?;
    write_file(
        &out.join(ENERGY_CSV),
        &median_csv(&medians, |m| m.energy_kwh)?,
    )?;
    write_file(
        &out.join(SLAV_CSV),
        &median_csv(&medians, |m| m.sla_violation)?,
    )?;
    write_file(
        &out.join(MIGRATIONS_CSV),
        &median_csv(&medians, |m| m.migrations)?,
    )?;
    write_file(&out.join(ESV_CSV), &median_csv(&medians, |m| m.esv)?)?;
    Ok(())
}

/// Re-emits every summary from a directory holding `results.json`.
pub fn summarize(in_dir: impl AsRef<Path>, out_dir: impl AsRef<Path>) -> Result<ResultStore> {
    let store = ResultStore::load(in_dir)?;
    emit_summaries(&store, out_dir)?;
    Ok(store)
}

/// Per-step diagnostics as CSV.
pub fn steps_csv(result: &engine::SimulationResult) -> Result<Vec<u8>> {
    let mut w = csv_writer();
    w.write_record([
        "step",
        "active_hosts",
        "total_power_w",
        "migrations",
        "overloaded_hosts",
        "saturated_hosts",
        "unplaced_vms",
        "hosts_slept",
        "hosts_woken",
    ])
    .map_err(csv_err)?;
    for s in &result.steps {
        w.write_record([
            s.step.to_string(),
            s.active_hosts.to_string(),
            fixed(s.total_power_w),
            s.migrations.to_string(),
            s.overloaded_hosts.to_string(),
            s.saturated_hosts.to_string(),
            s.unplaced_vms.to_string(),
            s.hosts_slept.to_string(),
            s.hosts_woken.to_string(),
        ])
        .map_err(csv_err)?;
    }
    finish_csv(w)
}

/// Human-readable one-line summary of a single run.
pub fn describe(result: &engine::SimulationResult) -> String {
    format!(
        "{}: energy {:.6} kWh, migrations {}, slatah {:.6}, pdm {:.6}, slav {:.6}, esv {:.6}",
        result.mode,
        result.energy_kwh,
        result.migration_count,
        result.slatah,
        result.pdm,
        result.slav,
        result.esv
    )
}
