//! Energy and SLA metrics computed from simulation ledgers, and median
//! aggregation across workload days.

use std::collections::BTreeMap;

use log::warn;
use serde::{Deserialize, Serialize};

/// Per-host SLA ledger.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct HostLedger {
    pub active_seconds: f64,
    /// Active seconds spent with raw CPU demand at or above capacity.
    pub overloaded_seconds: f64,
    pub energy_joules: f64,
}

/// Per-VM SLA ledger, in MIPS-seconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct VmLedger {
    /// Total demanded CPU.
    pub requested: f64,
    /// CPU lost to live migration.
    pub degraded: f64,
    pub migrations: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct SlaComponents {
    pub slatah: f64,
    pub pdm: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub energy_kwh: f64,
    pub sla_violation: f64,
    pub migrations: u64,
    pub esv: f64,
    pub components: SlaComponents,
}

impl MetricsReport {
    pub fn new(energy_kwh: f64, migrations: u64, slatah: f64, pdm: f64) -> Self {
        let sla_violation = slav(slatah, pdm);
        MetricsReport {
            energy_kwh,
            sla_violation,
            migrations,
            esv: esv(energy_kwh, sla_violation),
            components: SlaComponents { slatah, pdm },
        }
    }
}

/// SLA time per active host: mean over hosts that were ever active of the
/// share of their active time spent at full capacity.
pub fn slatah(hosts: &[HostLedger]) -> f64 {
    let ratios: Vec<f64> = hosts
        .iter()
        .filter(|h| h.active_seconds > 0.0)
        .map(|h| h.overloaded_seconds / h.active_seconds)
        .collect();
    if ratios.is_empty() {
        return 0.0;
    }
    ratios.iter().sum::<f64>() / ratios.len() as f64
}

/// Performance degradation due to migration: mean over VMs of degraded over
/// requested CPU. Idle VMs (nothing requested) contribute 0.
pub fn pdm(vms: &[VmLedger]) -> f64 {
    if vms.is_empty() {
        return 0.0;
    }
    let sum: f64 = vms
        .iter()
        .map(|v| {
            if v.requested > 0.0 {
                v.degraded / v.requested
            } else {
                0.0
            }
        })
        .sum();
    sum / vms.len() as f64
}

pub fn slav(slatah: f64, pdm: f64) -> f64 {
    slatah * pdm
}

pub fn esv(energy_kwh: f64, slav: f64) -> f64 {
    energy_kwh * slav
}

/// Median; even counts average the central pair. `None` for no values.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MedianReport {
    pub runs: usize,
    pub energy_kwh: f64,
    pub sla_violation: f64,
    pub migrations: f64,
    pub esv: f64,
    pub slatah: f64,
    pub pdm: f64,
}

/// Per-combo, per-metric medians over day runs. Combos with no runs are
/// dropped with a warning.
pub fn aggregate_median<'a, I>(results: I) -> BTreeMap<String, MedianReport>
where
    I: IntoIterator<Item = (&'a str, &'a MetricsReport)>,
{
    let mut groups: BTreeMap<String, Vec<&MetricsReport>> = BTreeMap::new();
    for (combo, report) in results {
        groups.entry(combo.to_string()).or_default().push(report);
    }
    groups
        .into_iter()
        .filter_map(|(combo, reports)| {
            let col = |f: fn(&MetricsReport) -> f64| {
                median(&reports.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            let Some(energy_kwh) = col(|r| r.energy_kwh) else {
                warn!("combo {combo} has no results; skipped");
                return None;
            };
            let report = MedianReport {
                runs: reports.len(),
                energy_kwh,
                sla_violation: col(|r| r.sla_violation)?,
                migrations: col(|r| r.migrations as f64)?,
                esv: col(|r| r.esv)?,
                slatah: col(|r| r.components.slatah)?,
                pdm: col(|r| r.components.pdm)?,
            };
            Some((combo, report))
        })
        .collect()
}
