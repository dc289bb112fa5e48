//! Mutable placement state of one data center: which VM runs where, and
//! what each host currently carries.

use crate::error::{Error, Result};
use crate::model::{CpuLoad, HostId, HostLoad, HostSpec, HostStatus, VmId, VmSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct HostState {
    pub spec: HostSpec,
    pub status: HostStatus,
    /// Resident VMs, ascending by id.
    pub vms: Vec<VmId>,
    pub ram_used_mb: u64,
    pub demand_mips: f64,
}

impl HostState {
    pub fn load(&self) -> HostLoad {
        HostLoad {
            ram_used_mb: self.ram_used_mb,
            demand_mips: self.demand_mips,
        }
    }

    pub fn cpu(&self) -> CpuLoad {
        CpuLoad::from_demand(self.demand_mips, self.spec.mips)
    }

    pub fn is_active(&self) -> bool {
        self.status == HostStatus::Active
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VmState {
    pub spec: VmSpec,
    pub host: Option<HostId>,
    pub demand_mips: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cluster {
    pub hosts: Vec<HostState>,
    pub vms: Vec<VmState>,
}

impl Cluster {
    /// All hosts start in `status` with no VMs; VMs start unplaced.
    pub fn new(hosts: &[HostSpec], vms: &[VmSpec], status: HostStatus) -> Self {
        Cluster {
            hosts: hosts
                .iter()
                .map(|&spec| HostState {
                    spec,
                    status,
                    vms: Vec::new(),
                    ram_used_mb: 0,
                    demand_mips: 0.0,
                })
                .collect(),
            vms: vms
                .iter()
                .map(|&spec| VmState {
                    spec,
                    host: None,
                    demand_mips: spec.mips,
                })
                .collect(),
        }
    }

    pub fn host(&self, id: HostId) -> &HostState {
        &self.hosts[id.0]
    }

    pub fn vm(&self, id: VmId) -> &VmState {
        &self.vms[id.0]
    }

    pub fn host_ids(&self) -> impl Iterator<Item = HostId> {
        (0..self.hosts.len()).map(HostId)
    }

    pub fn active_hosts(&self) -> impl Iterator<Item = HostId> + '_ {
        self.host_ids().filter(|&h| self.host(h).is_active())
    }

    pub fn attach(&mut self, vm: VmId, host: HostId) {
        let v = &mut self.vms[vm.0];
        debug_assert!(v.host.is_none(), "{vm} already placed");
        v.host = Some(host);
        let (ram, demand) = (v.spec.ram_mb, v.demand_mips);
        let h = &mut self.hosts[host.0];
        let pos = h.vms.binary_search(&vm).unwrap_or_else(|p| p);
        h.vms.insert(pos, vm);
        h.ram_used_mb += ram;
        h.demand_mips += demand;
    }

    pub fn detach(&mut self, vm: VmId) -> Option<HostId> {
        let v = &mut self.vms[vm.0];
        let host = v.host.take()?;
        let (ram, demand) = (v.spec.ram_mb, v.demand_mips);
        let h = &mut self.hosts[host.0];
        if let Ok(pos) = h.vms.binary_search(&vm) {
            h.vms.remove(pos);
        }
        h.ram_used_mb -= ram;
        h.demand_mips -= demand;
        if h.vms.is_empty() {
            h.demand_mips = 0.0;
        }
        Some(host)
    }

    /// Sets per-VM demand and recomputes every host's demand from scratch,
    /// summing residents in id order.
    pub fn set_demands(&mut self, demands: impl IntoIterator<Item = f64>) {
        for (vm, d) in self.vms.iter_mut().zip(demands) {
            vm.demand_mips = d;
        }
        self.recompute_host_demands();
    }

    pub fn recompute_host_demands(&mut self) {
        for h in &mut self.hosts {
            h.demand_mips = h.vms.iter().map(|v| self.vms[v.0].demand_mips).sum();
        }
    }

    /// Checks the structural invariants: every VM on exactly one host,
    /// host bookkeeping consistent, sleeping hosts empty, RAM respected.
    pub fn audit(&self) -> Result<()> {
        let mut seen = vec![0usize; self.vms.len()];
        for (i, h) in self.hosts.iter().enumerate() {
            let host = HostId(i);
            if h.status == HostStatus::Sleeping && !h.vms.is_empty() {
                return Err(Error::Contract(format!("{host} sleeps with VMs")));
            }
            if !h.vms.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::Contract(format!("{host} VM list not sorted")));
            }
            let mut ram = 0;
            for &vm in &h.vms {
                seen[vm.0] += 1;
                if self.vm(vm).host != Some(host) {
                    return Err(Error::Contract(format!(
                        "{vm} listed on {host} but bound elsewhere"
                    )));
                }
                ram += self.vm(vm).spec.ram_mb;
            }
            if ram != h.ram_used_mb || ram > h.spec.ram_mb {
                return Err(Error::Contract(format!("{host} RAM bookkeeping broken")));
            }
        }
        if let Some(vm) = seen.iter().position(|&n| n != 1) {
            return Err(Error::Contract(format!(
                "{} resident on {} hosts",
                VmId(vm),
                seen[vm]
            )));
        }
        Ok(())
    }
}
