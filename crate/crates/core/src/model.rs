//! Hosts, VMs, power models and the capacity arithmetic shared by every policy.

use std::fmt;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HostId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VmId(pub usize);

impl fmt::Display for HostId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "host-{}", self.0)
    }
}

impl fmt::Display for VmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "vm-{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HostStatus {
    Active,
    Sleeping,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PowerKind {
    /// Power grows linearly from `idle_watts` at 0% CPU to `max_watts` at 100%.
    Linear { idle_watts: f64, max_watts: f64 },
    /// Draws `max_watts` whenever active, whatever the load. Used by the NPA baseline.
    FullPowerAlways { max_watts: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerModel {
    pub kind: PowerKind,
    #[serde(default)]
    pub sleep_watts: f64,
}

impl PowerModel {
    pub const DEFAULT_IDLE_WATTS: f64 = 175.0;
    pub const DEFAULT_MAX_WATTS: f64 = 250.0;
    /// Sleep-state draw of a typical blade server, available as an opt-in.
    pub const DOCUMENTED_SLEEP_WATTS: f64 = 10.4;

    pub fn linear(idle_watts: f64, max_watts: f64) -> Self {
        PowerModel {
            kind: PowerKind::Linear {
                idle_watts,
                max_watts,
            },
            sleep_watts: 0.0,
        }
    }

    pub fn full_power(max_watts: f64) -> Self {
        PowerModel {
            kind: PowerKind::FullPowerAlways { max_watts },
            sleep_watts: 0.0,
        }
    }

    pub fn with_sleep_watts(mut self, sleep_watts: f64) -> Self {
        self.sleep_watts = sleep_watts;
        self
    }

    pub fn max_watts(&self) -> f64 {
        match self.kind {
            PowerKind::Linear { max_watts, .. } | PowerKind::FullPowerAlways { max_watts } => {
                max_watts
            }
        }
    }

    /// The same model with the load-independent NPA behaviour.
    pub fn to_full_power(self) -> Self {
        PowerModel {
            kind: PowerKind::FullPowerAlways {
                max_watts: self.max_watts(),
            },
            sleep_watts: self.sleep_watts,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sleep_watts >= 0.0) {
            return Err(Error::config("sleep_watts must be >= 0"));
        }
        match self.kind {
            PowerKind::Linear {
                idle_watts,
                max_watts,
            } if !(0.0 <= idle_watts && idle_watts <= max_watts) => Err(Error::config(format!(
                "linear power model needs 0 <= idle ({idle_watts}) <= max ({max_watts})"
            ))),
            PowerKind::FullPowerAlways { max_watts } if !(max_watts >= 0.0) => {
                Err(Error::config("max_watts must be >= 0"))
            }
            _ => Ok(()),
        }
    }

    /// Instantaneous draw in watts.
    ///
    /// A utilization outside `[0, 1]` is a caller bug and is rejected.
    pub fn power_draw(&self, utilization: f64, status: HostStatus) -> Result<f64> {
        if !(0.0..=1.0).contains(&utilization) {
            return Err(Error::Contract(format!(
                "utilization {utilization} outside [0, 1]"
            )));
        }
        Ok(self.power_draw_unchecked(utilization, status))
    }

    #[inline]
    pub(crate) fn power_draw_unchecked(&self, utilization: f64, status: HostStatus) -> f64 {
        match status {
            HostStatus::Sleeping => self.sleep_watts,
            HostStatus::Active => match self.kind {
                PowerKind::Linear {
                    idle_watts,
                    max_watts,
                } => idle_watts + (max_watts - idle_watts) * utilization,
                PowerKind::FullPowerAlways { max_watts } => max_watts,
            },
        }
    }
}

impl Default for PowerModel {
    fn default() -> Self {
        PowerModel::linear(Self::DEFAULT_IDLE_WATTS, Self::DEFAULT_MAX_WATTS)
    }
}

/// Free-function form of [`PowerModel::power_draw`].
pub fn power_draw(model: &PowerModel, utilization: f64, status: HostStatus) -> Result<f64> {
    model.power_draw(utilization, status)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HostSpec {
    pub mips: f64,
    pub ram_mb: u64,
    pub storage_gb: u64,
    pub bandwidth_bps: f64,
    pub power_model: PowerModel,
}

impl HostSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.mips > 0.0) || self.ram_mb == 0 || !(self.bandwidth_bps > 0.0) {
            return Err(Error::config(
                "host mips, ram_mb and bandwidth_bps must all be > 0",
            ));
        }
        self.power_model.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VmSpec {
    pub mips: f64,
    pub ram_mb: u64,
    pub storage_gb: u64,
}

/// CPU load of one host: the capped utilization and the raw demand ratio,
/// which exceeds 1 when the host is oversubscribed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CpuLoad {
    pub utilization: f64,
    pub raw_ratio: f64,
}

impl CpuLoad {
    pub fn from_demand(demand_mips: f64, capacity_mips: f64) -> Self {
        let raw_ratio = (demand_mips / capacity_mips).max(0.0);
        CpuLoad {
            utilization: raw_ratio.min(1.0),
            raw_ratio,
        }
    }
}

pub fn host_cpu_utilization(host: &HostSpec, demands: impl IntoIterator<Item = f64>) -> CpuLoad {
    CpuLoad::from_demand(demands.into_iter().sum(), host.mips)
}

/// What a host currently carries.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HostLoad {
    pub ram_used_mb: u64,
    pub demand_mips: f64,
}

/// Admission test used by placement. RAM is a hard limit; CPU is admitted
/// while the resulting raw demand ratio stays within `headroom`.
pub fn can_fit(
    host: &HostSpec,
    load: HostLoad,
    vm_ram_mb: u64,
    vm_cpu_mips: f64,
    headroom: f64,
) -> bool {
    load.ram_used_mb + vm_ram_mb <= host.ram_mb
        && (load.demand_mips + vm_cpu_mips) / host.mips <= headroom
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HostCatalog {
    pub mips_choices: Vec<f64>,
    pub ram_mb: u64,
    pub storage_gb: u64,
    pub power_model: PowerModel,
}

impl Default for HostCatalog {
    fn default() -> Self {
        HostCatalog {
            mips_choices: vec![1000.0, 2000.0, 3000.0],
            ram_mb: 32 * 1024,
            storage_gb: 4096,
            power_model: PowerModel::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VmCatalog {
    pub mips_choices: Vec<f64>,
    pub ram_mb: u64,
    pub storage_gb: u64,
}

impl Default for VmCatalog {
    fn default() -> Self {
        VmCatalog {
            mips_choices: vec![1000.0, 750.0, 500.0, 250.0],
            ram_mb: 1024,
            storage_gb: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataCenterConfig {
    pub n_hosts: usize,
    pub n_vms: usize,
    pub host_catalog: HostCatalog,
    pub vm_catalog: VmCatalog,
    pub step_seconds: f64,
    pub rng_seed: u64,
}

impl Default for DataCenterConfig {
    fn default() -> Self {
        DataCenterConfig {
            n_hosts: 800,
            n_vms: 1000,
            host_catalog: HostCatalog::default(),
            vm_catalog: VmCatalog::default(),
            step_seconds: 300.0,
            rng_seed: 42,
        }
    }
}

const HOST_STREAM: u64 = 1;
const VM_STREAM: u64 = 2;

impl DataCenterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_hosts == 0 || self.n_vms == 0 {
            return Err(Error::config("n_hosts and n_vms must be > 0"));
        }
        if !(self.step_seconds > 0.0) {
            return Err(Error::config("step_seconds must be > 0"));
        }
        if self.host_catalog.mips_choices.is_empty() || self.vm_catalog.mips_choices.is_empty() {
            return Err(Error::config("mips catalogs must not be empty"));
        }
        if self.vm_catalog.mips_choices.iter().any(|&m| !(m > 0.0)) {
            return Err(Error::config("vm mips must be > 0"));
        }
        for &mips in &self.host_catalog.mips_choices {
            self.host_spec(mips, 1.0).validate()?;
        }
        Ok(())
    }

    fn host_spec(&self, mips: f64, bandwidth_bps: f64) -> HostSpec {
        let c = &self.host_catalog;
        HostSpec {
            mips,
            ram_mb: c.ram_mb,
            storage_gb: c.storage_gb,
            bandwidth_bps,
            power_model: c.power_model,
        }
    }

    /// Draws host capacities uniformly from the catalog. Deterministic in `rng_seed`.
    pub fn build_hosts(&self, bandwidth_bps: f64) -> Vec<HostSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_stream(HOST_STREAM);
        (0..self.n_hosts)
            .map(|_| {
                let mips = *self.host_catalog.mips_choices.choose(&mut rng).unwrap();
                self.host_spec(mips, bandwidth_bps)
            })
            .collect()
    }

    pub fn build_vms(&self) -> Vec<VmSpec> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.rng_seed);
        rng.set_stream(VM_STREAM);
        let c = &self.vm_catalog;
        (0..self.n_vms)
            .map(|_| VmSpec {
                mips: *c.mips_choices.choose(&mut rng).unwrap(),
                ram_mb: c.ram_mb,
                storage_gb: c.storage_gb,
            })
            .collect()
    }
}
