//! Time-stepped simulation: advance demands, consolidate, and account
//! energy and SLA ledgers. Also runs the NPA and DVFS baselines.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::cluster::Cluster;
use crate::detection::{DetectorConfig, HostHistory};
use crate::error::{Error, Result};
use crate::metrics::{self, HostLedger, MetricsReport, VmLedger};
use crate::model::{DataCenterConfig, HostId, HostStatus, VmId};
use crate::placement::{self, MigrationPlan, PlacementOptions};
use crate::selection::{migration_time_seconds, SelectorConfig, VmHistory, VmSelector, MC_WINDOW};
use crate::workload::{assign_traces, TraceSet};

pub const JOULES_PER_KWH: f64 = 3.6e6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Consolidation,
    Dvfs,
    Npa,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Consolidation => "consolidation",
            Mode::Dvfs => "dvfs",
            Mode::Npa => "npa",
        })
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "consolidation" => Ok(Mode::Consolidation),
            "dvfs" => Ok(Mode::Dvfs),
            "npa" => Ok(Mode::Npa),
            _ => Err(Error::Policy {
                token: s.to_string(),
                message: "unknown mode (consolidation, dvfs, npa)".into(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub dc: DataCenterConfig,
    pub mode: Mode,
    pub detector: Option<DetectorConfig>,
    pub selector: Option<SelectorConfig>,
    pub bandwidth_bps: f64,
    /// Share of host bandwidth available to a live migration.
    pub migration_bandwidth_share: f64,
    /// Fraction of a migrating VM's demand lost while it migrates.
    pub migration_degradation: f64,
    pub horizon_steps: usize,
}

impl SimulationConfig {
    pub fn new(dc: DataCenterConfig, mode: Mode, horizon_steps: usize) -> Self {
        SimulationConfig {
            dc,
            mode,
            detector: None,
            selector: None,
            bandwidth_bps: 1e9,
            migration_bandwidth_share: 0.5,
            migration_degradation: 0.10,
            horizon_steps,
        }
    }

    pub fn consolidation(
        dc: DataCenterConfig,
        detector: DetectorConfig,
        selector: SelectorConfig,
        horizon_steps: usize,
    ) -> Self {
        SimulationConfig {
            detector: Some(detector),
            selector: Some(selector),
            ..Self::new(dc, Mode::Consolidation, horizon_steps)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dc.validate()?;
        match (self.mode, &self.detector, &self.selector) {
            (Mode::Consolidation, Some(d), Some(s)) => {
                d.validate()?;
                s.validate()?;
            }
            (Mode::Consolidation, _, _) => {
                return Err(Error::config(
                    "consolidation mode needs a detector and a selector",
                ))
            }
            (_, None, None) => {}
            (mode, _, _) => {
                return Err(Error::config(format!(
                    "{mode} mode takes no detector or selector"
                )))
            }
        }
        if !(self.bandwidth_bps > 0.0) {
            return Err(Error::config("bandwidth_bps must be > 0"));
        }
        if !(self.migration_bandwidth_share > 0.0 && self.migration_bandwidth_share <= 1.0) {
            return Err(Error::config(
                "migration_bandwidth_share must lie in (0, 1]",
            ));
        }
        if !(0.0..=1.0).contains(&self.migration_degradation) {
            return Err(Error::config("migration_degradation must lie in [0, 1]"));
        }
        if self.horizon_steps == 0 {
            return Err(Error::config("horizon_steps must be > 0"));
        }
        Ok(())
    }

    pub fn migration_bandwidth_bps(&self) -> f64 {
        self.migration_bandwidth_share * self.bandwidth_bps
    }
}

/// Traces bound to VMs: VM `i` follows `traces.traces[binding[i]]`.
#[derive(Debug, Clone)]
pub struct Workload<'a> {
    pub traces: &'a TraceSet,
    pub binding: Vec<usize>,
}

impl<'a> Workload<'a> {
    pub fn new(traces: &'a TraceSet, binding: Vec<usize>) -> Self {
        Workload { traces, binding }
    }

    /// Random binding seeded from the data-center seed.
    pub fn bind(traces: &'a TraceSet, dc: &DataCenterConfig, allow_reuse: bool) -> Result<Self> {
        Ok(Workload {
            traces,
            binding: assign_traces(traces, dc.n_vms, dc.rng_seed, allow_reuse)?,
        })
    }

    fn fraction(&self, vm: usize, step: usize) -> f64 {
        self.traces.traces[self.binding[vm]].samples[step]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MigrationRecord {
    pub vm_id: VmId,
    pub source: HostId,
    pub dest: HostId,
    pub start_step: usize,
    pub duration_seconds: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub step: usize,
    pub active_hosts: usize,
    pub total_power_w: f64,
    pub migrations: usize,
    pub overloaded_hosts: usize,
    pub saturated_hosts: usize,
    pub unplaced_vms: usize,
    pub hosts_slept: usize,
    pub hosts_woken: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationResult {
    pub mode: Mode,
    pub energy_kwh: f64,
    pub migration_count: u64,
    pub slatah: f64,
    pub pdm: f64,
    pub slav: f64,
    pub esv: f64,
    /// Share of active (host, step) pairs at or above full capacity.
    pub sla_event_pct: f64,
    pub steps: Vec<StepDiagnostics>,
    pub hosts: Vec<HostLedger>,
    pub vms: Vec<VmLedger>,
    pub migrations: Vec<MigrationRecord>,
}

impl SimulationResult {
    pub fn report(&self) -> MetricsReport {
        MetricsReport {
            energy_kwh: self.energy_kwh,
            sla_violation: self.slav,
            migrations: self.migration_count,
            esv: self.esv,
            components: metrics::SlaComponents {
                slatah: self.slatah,
                pdm: self.pdm,
            },
        }
    }
}

/// One simulation instance. Single-threaded and deterministic.
#[derive(Debug, Clone)]
pub struct Simulation<'a> {
    cfg: SimulationConfig,
    workload: Workload<'a>,
    cluster: Cluster,
    host_histories: Vec<HostHistory>,
    vm_histories: Vec<VmHistory>,
    selector: Option<VmSelector>,
    host_ledgers: Vec<HostLedger>,
    vm_ledgers: Vec<VmLedger>,
    /// Union of each VM's migration windows, in simulated seconds.
    migrating: Vec<Option<(f64, f64)>>,
    migrations: Vec<MigrationRecord>,
    steps: Vec<StepDiagnostics>,
    energy_joules: f64,
    saturated_host_steps: u64,
    active_host_steps: u64,
    next_step: usize,
}

impl<'a> Simulation<'a> {
    pub fn new(cfg: SimulationConfig, workload: Workload<'a>) -> Result<Self> {
        cfg.validate()?;
        if workload.binding.len() != cfg.dc.n_vms {
            return Err(Error::config(format!(
                "{} VMs but {} trace bindings",
                cfg.dc.n_vms,
                workload.binding.len()
            )));
        }
        if let Some(&bad) = workload
            .binding
            .iter()
            .find(|&&i| i >= workload.traces.len())
        {
            return Err(Error::config(format!(
                "binding refers to missing trace {bad}"
            )));
        }
        let available = workload.traces.samples_per_trace();
        if available < cfg.horizon_steps {
            return Err(Error::TraceSet {
                label: workload.traces.day_label.clone(),
                message: format!(
                    "traces hold {available} samples but the horizon is {} steps",
                    cfg.horizon_steps
                ),
            });
        }

        let mut hosts = cfg.dc.build_hosts(cfg.bandwidth_bps);
        if cfg.mode == Mode::Npa {
            for h in &mut hosts {
                h.power_model = h.power_model.to_full_power();
            }
        }
        let vms = cfg.dc.build_vms();
        let initial_status = match cfg.mode {
            Mode::Consolidation => HostStatus::Sleeping,
            Mode::Dvfs | Mode::Npa => HostStatus::Active,
        };
        let mut cluster = Cluster::new(&hosts, &vms, initial_status);

        // Initial allocation reserves each VM's full requested capacity.
        let all: Vec<(VmId, Option<HostId>)> = (0..vms.len()).map(|i| (VmId(i), None)).collect();
        let no_exclusions = vec![false; hosts.len()];
        let initial = placement::pabfd_place(
            &mut cluster,
            &all,
            PlacementOptions {
                headroom: 1.0,
                allow_wake: true,
                excluded: &no_exclusions,
            },
        );
        if let Some(vm) = initial.unplaced.first() {
            return Err(Error::config(format!(
                "initial placement failed: {} of {} VMs (first {vm}) fit on no host",
                initial.unplaced.len(),
                vms.len()
            )));
        }

        let host_window = cfg.detector.map_or(1, |d| d.history_capacity());
        let vm_window = cfg.selector.map_or(MC_WINDOW, |s| s.window_len).max(1);
        let n_hosts = hosts.len();
        let n_vms = vms.len();
        Ok(Simulation {
            selector: cfg.selector.map(VmSelector::new),
            host_histories: vec![HostHistory::new(host_window); n_hosts],
            vm_histories: vec![VmHistory::new(vm_window); n_vms],
            host_ledgers: vec![HostLedger::default(); n_hosts],
            vm_ledgers: vec![VmLedger::default(); n_vms],
            migrating: vec![None; n_vms],
            migrations: Vec::new(),
            steps: Vec::with_capacity(cfg.horizon_steps),
            energy_joules: 0.0,
            saturated_host_steps: 0,
            active_host_steps: 0,
            next_step: 0,
            cfg,
            workload,
            cluster,
        })
    }

    pub fn config(&self) -> &SimulationConfig {
        &self.cfg
    }

    pub fn cluster(&self) -> &Cluster {
        &self.cluster
    }

    pub fn is_finished(&self) -> bool {
        self.next_step >= self.cfg.horizon_steps
    }

    /// Advances one step and returns the committed plan.
    pub fn step(&mut self) -> Result<MigrationPlan> {
        if self.is_finished() {
            return Err(Error::Contract("simulation already finished".into()));
        }
        let t = self.next_step;
        let dt = self.cfg.dc.step_seconds;

        let demands: Vec<f64> = (0..self.cluster.vms.len())
            .map(|i| self.workload.fraction(i, t) * self.cluster.vms[i].spec.mips)
            .collect();
        self.cluster.set_demands(demands.iter().copied());

        for (i, vm) in self.cluster.vms.iter().enumerate() {
            self.vm_histories[i].push(self.workload.fraction(i, t));
            debug_assert!(vm.host.is_some());
        }
        for (i, host) in self.cluster.hosts.iter().enumerate() {
            if host.is_active() {
                self.host_histories[i].push(host.cpu().utilization);
            }
        }

        let plan = match (self.cfg.detector, self.selector.as_mut()) {
            (Some(detector), Some(selector)) if self.cfg.mode == Mode::Consolidation => {
                placement::plan_step(
                    &self.cluster,
                    &self.host_histories,
                    &self.vm_histories,
                    &detector,
                    selector,
                    self.cfg.migration_bandwidth_bps(),
                )?
            }
            _ => MigrationPlan::default(),
        };
        placement::apply_plan(&mut self.cluster, &plan)?;
        for &h in &plan.hosts_to_sleep {
            self.host_histories[h.0].clear();
        }

        let step_start = t as f64 * dt;
        let step_end = step_start + dt;
        for m in &plan.moves {
            let bandwidth =
                self.cluster.host(m.source).spec.bandwidth_bps * self.cfg.migration_bandwidth_share;
            let duration = migration_time_seconds(self.cluster.vm(m.vm).spec.ram_mb, bandwidth);
            self.migrations.push(MigrationRecord {
                vm_id: m.vm,
                source: m.source,
                dest: m.dest,
                start_step: t,
                duration_seconds: duration,
            });
            self.vm_ledgers[m.vm.0].migrations += 1;
            let window = &mut self.migrating[m.vm.0];
            *window = Some(match *window {
                Some((start, end)) if end >= step_start => (start, end.max(step_start + duration)),
                _ => (step_start, step_start + duration),
            });
        }

        let mut total_power = 0.0;
        let mut active = 0;
        let mut saturated = 0;
        for (i, host) in self.cluster.hosts.iter().enumerate() {
            let cpu = host.cpu();
            let watts = host
                .spec
                .power_model
                .power_draw(cpu.utilization, host.status)?;
            total_power += watts;
            let ledger = &mut self.host_ledgers[i];
            ledger.energy_joules += watts * dt;
            if host.is_active() {
                active += 1;
                ledger.active_seconds += dt;
                if cpu.raw_ratio >= 1.0 {
                    saturated += 1;
                    ledger.overloaded_seconds += dt;
                }
            }
        }
        self.energy_joules += total_power * dt;
        self.active_host_steps += active as u64;
        self.saturated_host_steps += saturated as u64;

        for (i, vm) in self.cluster.vms.iter().enumerate() {
            let ledger = &mut self.vm_ledgers[i];
            ledger.requested += vm.demand_mips * dt;
            if let Some((start, end)) = self.migrating[i] {
                let overlap = (end.min(step_end) - start.max(step_start)).max(0.0);
                ledger.degraded += self.cfg.migration_degradation * vm.demand_mips * overlap;
                if end <= step_end {
                    self.migrating[i] = None;
                }
            }
        }

        self.steps.push(StepDiagnostics {
            step: t,
            active_hosts: active,
            total_power_w: total_power,
            migrations: plan.moves.len(),
            overloaded_hosts: plan.overloaded.len(),
            saturated_hosts: saturated,
            unplaced_vms: plan.unplaced.len(),
            hosts_slept: plan.hosts_to_sleep.len(),
            hosts_woken: plan.hosts_to_wake.len(),
        });
        self.next_step += 1;
        Ok(plan)
    }

    pub fn finish(self) -> SimulationResult {
        let energy_kwh = self.energy_joules / JOULES_PER_KWH;
        let slatah = metrics::slatah(&self.host_ledgers);
        let pdm = metrics::pdm(&self.vm_ledgers);
        let slav = metrics::slav(slatah, pdm);
        SimulationResult {
            mode: self.cfg.mode,
            energy_kwh,
            migration_count: self.migrations.len() as u64,
            slatah,
            pdm,
            slav,
            esv: metrics::esv(energy_kwh, slav),
            sla_event_pct: if self.active_host_steps == 0 {
                0.0
            } else {
                self.saturated_host_steps as f64 / self.active_host_steps as f64
            },
            steps: self.steps,
            hosts: self.host_ledgers,
            vms: self.vm_ledgers,
            migrations: self.migrations,
        }
    }
}

/// Energy accrued by one host over `dt_seconds`, in joules.
pub fn accrue_energy(
    model: &crate::model::PowerModel,
    utilization: f64,
    status: HostStatus,
    dt_seconds: f64,
) -> Result<f64> {
    if !(dt_seconds > 0.0) {
        return Err(Error::Contract("energy interval must be > 0".into()));
    }
    Ok(model.power_draw(utilization, status)? * dt_seconds)
}

/// Runs a whole simulation.
pub fn run(cfg: SimulationConfig, workload: Workload<'_>) -> Result<SimulationResult> {
    let mut sim = Simulation::new(cfg, workload)?;
    while !sim.is_finished() {
        sim.step()?;
    }
    Ok(sim.finish())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HostCatalog, PowerModel, VmCatalog};
    use crate::selection::SelectorKind;
    use crate::workload::{generate_synthetic, UtilizationTrace};

    fn dc(n_hosts: usize, n_vms: usize, host_mips: f64, vm_mips: f64) -> DataCenterConfig {
        DataCenterConfig {
            n_hosts,
            n_vms,
            host_catalog: HostCatalog {
                mips_choices: vec![host_mips],
                ..Default::default()
            },
            vm_catalog: VmCatalog {
                mips_choices: vec![vm_mips],
                ..Default::default()
            },
            ..Default::default()
        }
    }

    fn constant_traces(n: usize, samples: usize, value: f64) -> TraceSet {
        let traces = (0..n)
            .map(|i| UtilizationTrace::new(format!("c{i}"), vec![value; samples]))
            .collect();
        TraceSet::new("const", traces).unwrap()
    }

    #[test]
    fn npa_closed_form() {
        let traces = constant_traces(20, 288, 0.3);
        let cfg = SimulationConfig::new(dc(10, 20, 2000.0, 500.0), Mode::Npa, 288);
        let w = Workload::bind(&traces, &cfg.dc, false).unwrap();
        let r = run(cfg, w).unwrap();
        assert!(
            (r.energy_kwh - 60.0).abs() <= 60.0 * 1e-9,
            "{}",
            r.energy_kwh
        );
        assert_eq!(r.migration_count, 0);
        assert_eq!(r.slav, 0.0);
        assert_eq!(r.esv, 0.0);
    }

    #[test]
    fn dvfs_closed_form() {
        let traces = constant_traces(1, 288, 0.5);
        let cfg = SimulationConfig::new(dc(1, 1, 1000.0, 1000.0), Mode::Dvfs, 288);
        let w = Workload::bind(&traces, &cfg.dc, false).unwrap();
        let r = run(cfg, w).unwrap();
        assert!((r.energy_kwh - 5.1).abs() <= 5.1 * 1e-9, "{}", r.energy_kwh);
        assert_eq!(r.migration_count, 0);
    }

    #[test]
    fn accrue_energy_examples() {
        let m = PowerModel::linear(175.0, 250.0);
        assert_eq!(
            accrue_energy(&m, 1.0, HostStatus::Active, 3600.0).unwrap() / JOULES_PER_KWH,
            0.25
        );
        assert_eq!(
            accrue_energy(&m, 0.0, HostStatus::Sleeping, 3600.0).unwrap(),
            0.0
        );
        let sleepy = m.with_sleep_watts(10.4);
        let kwh =
            accrue_energy(&sleepy, 0.0, HostStatus::Sleeping, 86_400.0).unwrap() / JOULES_PER_KWH;
        assert!((kwh - 0.2496).abs() < 1e-12);
        assert!(accrue_energy(&m, 0.5, HostStatus::Active, 0.0).is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = SimulationConfig::new(dc(2, 2, 1000.0, 500.0), Mode::Consolidation, 10);
        assert!(cfg.validate().is_err());
        cfg.detector = Some(DetectorConfig::thr(0.9));
        cfg.selector = Some(SelectorConfig::new(SelectorKind::Mmt, 1));
        assert!(cfg.validate().is_ok());
        cfg.mode = Mode::Dvfs;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn short_traces_rejected_before_stepping() {
        let traces = constant_traces(2, 5, 0.3);
        let cfg = SimulationConfig::new(dc(2, 2, 1000.0, 500.0), Mode::Dvfs, 10);
        let w = Workload::bind(&traces, &cfg.dc, false).unwrap();
        assert!(matches!(
            Simulation::new(cfg, w),
            Err(Error::TraceSet { .. })
        ));
    }

    #[test]
    fn initial_placement_failure_is_reported() {
        let traces = constant_traces(5, 5, 0.3);
        let mut d = dc(1, 5, 1000.0, 500.0);
        d.host_catalog.ram_mb = 2048;
        let cfg = SimulationConfig::new(d, Mode::Dvfs, 5);
        let w = Workload::bind(&traces, &cfg.dc, false).unwrap();
        assert!(matches!(Simulation::new(cfg, w), Err(Error::Config(_))));
    }

    #[test]
    fn migration_duration() {
        let t = migration_time_seconds(1024, 0.5 * 1e9);
        assert!((t - 1024.0 * 8.0 * 1_048_576.0 / 5e8).abs() < 1e-12);
        assert!((t - 17.18).abs() < 0.01);
    }

    #[test]
    fn consolidation_sleeps_idle_hosts_and_is_deterministic() {
        let traces = generate_synthetic(5, 40, 60, 0.3).unwrap();
        let cfg = SimulationConfig::consolidation(
            DataCenterConfig {
                n_hosts: 20,
                n_vms: 40,
                ..Default::default()
            },
            DetectorConfig::thr(0.8),
            SelectorConfig::new(SelectorKind::Mmt, 3),
            60,
        );
        let run_once = || {
            let w = Workload::bind(&traces, &cfg.dc, false).unwrap();
            run(cfg.clone(), w).unwrap()
        };
        let a = run_once();
        let b = run_once();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
        assert!(a.migration_count > 0);
        assert!(a.steps.last().unwrap().active_hosts < 20);
        assert!((0.0..=1.0).contains(&a.slatah));
        assert!((0.0..=0.1).contains(&a.pdm));
    }

    #[test]
    fn overloaded_host_triggers_migration() {
        // Two 1000-MIPS VMs share one host until demand jumps to 95% each.
        let mut samples = vec![0.2; 3];
        samples.extend([0.95; 3]);
        let traces = TraceSet::new(
            "jump",
            vec![
                UtilizationTrace::new("a", samples.clone()),
                UtilizationTrace::new("b", samples),
            ],
        )
        .unwrap();
        let mut sim = Simulation::new(
            SimulationConfig::consolidation(
                dc(3, 2, 2000.0, 1000.0),
                DetectorConfig::thr(0.9),
                SelectorConfig::new(SelectorKind::Mmt, 0),
                6,
            ),
            Workload::new(&traces, vec![0, 1]),
        )
        .unwrap();
        for _ in 0..3 {
            assert!(sim.step().unwrap().moves.is_empty());
        }
        let plan = sim.step().unwrap();
        assert_eq!(plan.overloaded.len(), 1);
        assert_eq!(plan.moves.len(), 1);
        sim.cluster().audit().unwrap();
    }
}
