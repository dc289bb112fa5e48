//! Host overload detection (static threshold, MAD, IQR, local regression and
//! robust local regression) and underload candidate selection.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::HostId;
use crate::stats;

pub const DEFAULT_THRESHOLD: f64 = 0.9;
pub const MAD_IQR_WINDOW: usize = 12;
pub const REGRESSION_WINDOW: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DetectorKind {
    Thr { threshold: f64 },
    Mad { safety: f64 },
    Iqr { safety: f64 },
    Lr { safety: f64 },
    Lrr { safety: f64 },
}

impl DetectorKind {
    pub fn name(&self) -> &'static str {
        match self {
            DetectorKind::Thr { .. } => "thr",
            DetectorKind::Mad { .. } => "mad",
            DetectorKind::Iqr { .. } => "iqr",
            DetectorKind::Lr { .. } => "lr",
            DetectorKind::Lrr { .. } => "lrr",
        }
    }

    pub fn parameter(&self) -> f64 {
        match *self {
            DetectorKind::Thr { threshold } => threshold,
            DetectorKind::Mad { safety }
            | DetectorKind::Iqr { safety }
            | DetectorKind::Lr { safety }
            | DetectorKind::Lrr { safety } => safety,
        }
    }

    fn default_window(&self) -> usize {
        match self {
            DetectorKind::Lr { .. } | DetectorKind::Lrr { .. } => REGRESSION_WINDOW,
            _ => MAD_IQR_WINDOW,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    pub kind: DetectorKind,
    /// History length required by the statistical detectors; shorter
    /// histories fall back to the static 0.9 threshold.
    pub window_len: usize,
}

impl DetectorConfig {
    pub fn new(kind: DetectorKind) -> Result<Self> {
        let cfg = DetectorConfig {
            window_len: kind.default_window(),
            kind,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn thr(threshold: f64) -> Self {
        Self::new(DetectorKind::Thr { threshold }).expect("valid threshold")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |message: &str| Error::Policy {
            token: self.to_string(),
            message: message.to_string(),
        };
        match self.kind {
            DetectorKind::Thr { threshold } if !(threshold > 0.0 && threshold <= 1.0) => {
                Err(bad("threshold must lie in (0, 1]"))
            }
            DetectorKind::Mad { safety } | DetectorKind::Iqr { safety } if !(safety > 0.0) => {
                Err(bad("safety parameter must be > 0"))
            }
            DetectorKind::Lr { safety } | DetectorKind::Lrr { safety } if !(safety >= 1.0) => {
                Err(bad("safety parameter must be >= 1"))
            }
            DetectorKind::Iqr { .. } if self.window_len < 4 => Err(bad("window must be >= 4")),
            DetectorKind::Lr { .. } | DetectorKind::Lrr { .. } if self.window_len < 2 => {
                Err(bad("window must be >= 2"))
            }
            DetectorKind::Mad { .. } if self.window_len < 1 => Err(bad("window must be >= 1")),
            _ => Ok(()),
        }
    }

    /// CPU admission cap placement applies while this detector is active.
    pub fn admission_headroom(&self) -> f64 {
        match self.kind {
            DetectorKind::Thr { threshold } => threshold,
            _ => 1.0,
        }
    }

    /// Number of samples worth keeping in a host history.
    pub fn history_capacity(&self) -> usize {
        self.window_len.max(1)
    }
}

impl fmt::Display for DetectorConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{:?}", self.kind.name(), self.kind.parameter())
    }
}

impl FromStr for DetectorConfig {
    type Err = Error;

    /// Parses `thr:0.9`, `mad:2.5`, `iqr:1.5`, `lr:1.2` or `lrr:1.2`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = |message: &str| Error::Policy {
            token: s.to_string(),
            message: message.to_string(),
        };
        let (name, param) = s
            .trim()
            .split_once(':')
            .ok_or_else(|| bad("expected <detector>:<parameter>"))?;
        let p: f64 = param
            .trim()
            .parse()
            .map_err(|_| bad("parameter is not a number"))?;
        let kind = match name.trim().to_ascii_lowercase().as_str() {
            "thr" => DetectorKind::Thr { threshold: p },
            "mad" => DetectorKind::Mad { safety: p },
            "iqr" => DetectorKind::Iqr { safety: p },
            "lr" => DetectorKind::Lr { safety: p },
            "lrr" => DetectorKind::Lrr { safety: p },
            _ => return Err(bad("unknown detector (thr, mad, iqr, lr, lrr)")),
        };
        DetectorConfig::new(kind).map_err(|e| match e {
            Error::Policy { message, .. } => Error::Policy {
                token: s.to_string(),
                message,
            },
            other => other,
        })
    }
}

impl Serialize for DetectorConfig {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for DetectorConfig {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Recent per-step utilizations of one host, most recent last.
#[derive(Debug, Clone, PartialEq)]
pub struct HostHistory {
    values: Vec<f64>,
    capacity: usize,
}

impl HostHistory {
    pub fn new(capacity: usize) -> Self {
        HostHistory {
            values: Vec::with_capacity(capacity),
            capacity: capacity.max(1),
        }
    }

    pub fn from_values(capacity: usize, values: &[f64]) -> Self {
        let mut h = HostHistory::new(capacity);
        for &v in values {
            h.push(v);
        }
        h
    }

    pub fn push(&mut self, utilization: f64) {
        if self.values.len() == self.capacity {
            self.values.remove(0);
        }
        self.values.push(utilization.clamp(0.0, 1.0));
    }

    pub fn replace_last(&mut self, utilization: f64) {
        if let Some(last) = self.values.last_mut() {
            *last = utilization.clamp(0.0, 1.0);
        }
    }

    pub fn clear(&mut self) {
        self.values.clear();
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn window<'a>(cfg: &DetectorConfig, history: &'a [f64]) -> &'a [f64] {
    &history[history.len().saturating_sub(cfg.window_len)..]
}

/// Adaptive upper threshold `1 - s * stat(window)`, clamped to `[0, 1]`.
/// Only defined for MAD and IQR.
pub fn dynamic_threshold(cfg: &DetectorConfig, history: &[f64]) -> Result<f64> {
    let (safety, stat) = match cfg.kind {
        DetectorKind::Mad { safety } => (safety, stats::mad(window(cfg, history))?),
        DetectorKind::Iqr { safety } => (safety, stats::iqr(window(cfg, history))?),
        _ => return Err(Error::Contract(format!("{cfg} has no dynamic threshold"))),
    };
    Ok((1.0 - safety * stat).clamp(0.0, 1.0))
}

pub fn is_overloaded(cfg: &DetectorConfig, history: &[f64]) -> Result<bool> {
    let Some(&last) = history.last() else {
        return Err(Error::Contract("overload check on an empty history".into()));
    };
    if let DetectorKind::Thr { threshold } = cfg.kind {
        return Ok(last > threshold);
    }
    if history.len() < cfg.window_len {
        return Ok(last > DEFAULT_THRESHOLD);
    }
    Ok(match cfg.kind {
        DetectorKind::Thr { .. } => unreachable!(),
        DetectorKind::Mad { .. } | DetectorKind::Iqr { .. } => {
            last > dynamic_threshold(cfg, history)?
        }
        DetectorKind::Lr { safety } => safety * stats::loess_predict(window(cfg, history))? >= 1.0,
        DetectorKind::Lrr { safety } => {
            safety * stats::robust_loess_predict(window(cfg, history))? >= 1.0
        }
    })
}

/// The least-utilized host among `hosts`; ties go to the lowest id.
/// Callers pass only Active, non-overloaded hosts not yet handled this step.
pub fn underload_candidate(hosts: impl IntoIterator<Item = (HostId, f64)>) -> Option<HostId> {
    hosts
        .into_iter()
        .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))
        .map(|(id, _)| id)
}

pub fn is_underloaded_candidate(
    host: HostId,
    hosts: impl IntoIterator<Item = (HostId, f64)>,
) -> bool {
    underload_candidate(hosts) == Some(host)
}
