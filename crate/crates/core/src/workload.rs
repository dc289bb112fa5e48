//! CPU utilization traces: PlanetLab-format parsing, synthetic generation and
//! binding of traces to VMs.
//!
//! A trace file holds one integer percentage (0..=100) per line, one sample
//! per 5-minute interval. A VM's demand at step `t` is `samples[t] * vm.mips`.

use std::fs;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const TRACE_INTERVAL_SECONDS: u32 = 300;
pub const SAMPLES_PER_DAY: usize = 86_400 / TRACE_INTERVAL_SECONDS as usize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilizationTrace {
    pub samples: Vec<f64>,
    pub interval_seconds: u32,
    pub source_id: String,
}

impl UtilizationTrace {
    pub fn new(source_id: impl Into<String>, samples: Vec<f64>) -> Self {
        UtilizationTrace {
            samples,
            interval_seconds: TRACE_INTERVAL_SECONDS,
            source_id: source_id.into(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn mean(&self) -> f64 {
        self.samples.iter().sum::<f64>() / self.samples.len().max(1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSet {
    pub traces: Vec<UtilizationTrace>,
    pub day_label: String,
}

impl TraceSet {
    pub fn new(day_label: impl Into<String>, traces: Vec<UtilizationTrace>) -> Result<Self> {
        let day_label = day_label.into();
        if let Some(first) = traces.first() {
            if let Some(odd) = traces.iter().find(|t| t.len() != first.len()) {
                return Err(Error::TraceSet {
                    label: day_label,
                    message: format!(
                        "{} has {} samples but {} has {}",
                        odd.source_id,
                        odd.len(),
                        first.source_id,
                        first.len()
                    ),
                });
            }
        }
        Ok(TraceSet { traces, day_label })
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn samples_per_trace(&self) -> usize {
        self.traces.first().map_or(0, UtilizationTrace::len)
    }

    pub fn grand_mean(&self) -> f64 {
        let (sum, n) = self
            .traces
            .iter()
            .flat_map(|t| t.samples.iter())
            .fold((0.0, 0usize), |(s, n), &x| (s + x, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

/// Parses one trace from a reader. Blank lines are only accepted at the end.
pub fn parse_trace<R: Read>(reader: R, source_id: &str) -> Result<UtilizationTrace> {
    let err = |line: usize, message: String| Error::TraceParse {
        path: source_id.to_string(),
        line,
        message,
    };

    let mut samples = Vec::with_capacity(SAMPLES_PER_DAY);
    let mut blank_since: Option<usize> = None;
    for (idx, line) in BufReader::new(reader).lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| err(line_no, e.to_string()))?;
        let text = line.trim();
        if text.is_empty() {
            blank_since.get_or_insert(line_no);
            continue;
        }
        if let Some(blank) = blank_since {
            return Err(err(blank, "blank line inside trace".into()));
        }
        let pct: i64 = text
            .parse()
            .map_err(|_| err(line_no, format!("`{text}` is not an integer percentage")))?;
        if !(0..=100).contains(&pct) {
            return Err(err(line_no, format!("{pct} outside [0, 100]")));
        }
        samples.push(pct as f64 / 100.0);
    }
    if samples.is_empty() {
        return Err(err(1, "empty trace".into()));
    }
    Ok(UtilizationTrace::new(source_id, samples))
}

pub fn parse_trace_file(path: impl AsRef<Path>) -> Result<UtilizationTrace> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let source_id = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string());
    parse_trace(file, &source_id).map_err(|e| match e {
        Error::TraceParse { line, message, .. } => Error::TraceParse {
            path: path.display().to_string(),
            line,
            message,
        },
        other => other,
    })
}

/// Renders a trace in the same one-percentage-per-line format the parser reads.
pub fn render_trace(trace: &UtilizationTrace) -> String {
    let mut out = String::with_capacity(trace.len() * 4);
    for &s in &trace.samples {
        out.push_str(&format!("{}\n", (s * 100.0).round() as i64));
    }
    out
}

/// Loads every regular file in `dir` as one trace, ordered by file name.
pub fn load_trace_dir(dir: impl AsRef<Path>) -> Result<TraceSet> {
    let dir = dir.as_ref();
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let is_hidden = entry.file_name().to_string_lossy().starts_with('.');
        if path.is_file() && !is_hidden {
            files.push(path);
        }
    }
    files.sort_by(|a, b| a.file_name().cmp(&b.file_name()));

    let label = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    if files.is_empty() {
        return Err(Error::TraceSet {
            label,
            message: format!("no trace files in {}", dir.display()),
        });
    }
    let traces = files
        .iter()
        .map(parse_trace_file)
        .collect::<Result<Vec<_>>>()?;
    TraceSet::new(label, traces)
}

// Mean-reverting walk: pull strength, step noise, and the odds and size of a
// short burst layered on top of the walk.
const REVERSION: f64 = 0.15;
const NOISE_SD: f64 = 0.06;
const BURST_PROB: f64 = 0.03;
const BURST_RANGE: (f64, f64) = (0.15, 0.45);

/// Synthetic day of traces: each trace is a mean-reverting random walk
/// around its own level (drawn around `mean_util`), clipped to `[0, 1]`,
/// with occasional bursts and quantized to whole percentages.
///
/// Trace `i` uses RNG stream `i`, so it does not depend on `n_traces`.
pub fn generate_synthetic(
    seed: u64,
    n_traces: usize,
    n_samples: usize,
    mean_util: f64,
) -> Result<TraceSet> {
    if !(mean_util > 0.0 && mean_util <= 0.5) {
        return Err(Error::Contract(format!(
            "synthetic mean_util {mean_util} outside (0, 0.5]"
        )));
    }
    if n_samples == 0 {
        return Err(Error::Contract(
            "synthetic traces need n_samples >= 1".into(),
        ));
    }
    let noise = Normal::new(0.0, NOISE_SD).expect("finite sd");
    let traces = (0..n_traces)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let level = mean_util * rng.random_range(0.5..1.5);
            let mut state: f64 = level + noise.sample(&mut rng);
            let samples = (0..n_samples)
                .map(|_| {
                    state = (state + REVERSION * (level - state) + noise.sample(&mut rng))
                        .clamp(0.0, 1.0);
                    let burst = if rng.random_bool(BURST_PROB) {
                        rng.random_range(BURST_RANGE.0..BURST_RANGE.1)
                    } else {
                        0.0
                    };
                    ((state + burst).clamp(0.0, 1.0) * 100.0).round() / 100.0
                })
                .collect();
            UtilizationTrace::new(format!("synthetic-{seed}-{i:04}"), samples)
        })
        .collect();
    TraceSet::new(format!("synthetic-{seed}"), traces)
}

/// Binds each of `n_vms` VMs to a trace index. Without reuse the binding is a
/// uniform draw without replacement; with reuse, each VM draws independently.
pub fn assign_traces(
    traces: &TraceSet,
    n_vms: usize,
    seed: u64,
    allow_reuse: bool,
) -> Result<Vec<usize>> {
    let n = traces.len();
    if n == 0 {
        return Err(Error::TraceSet {
            label: traces.day_label.clone(),
            message: "no traces to assign".into(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(3);
    if allow_reuse {
        Ok((0..n_vms).map(|_| rng.random_range(0..n)).collect())
    } else if n_vms > n {
        Err(Error::TraceSet {
            label: traces.day_label.clone(),
            message: format!("{n_vms} VMs but only {n} traces and reuse is disabled"),
        })
    } else {
        Ok(index::sample(&mut rng, n, n_vms).into_vec())
    }
}
