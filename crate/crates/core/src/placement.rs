//! Power-aware best fit decreasing placement and the two procedures that
//! feed it: overload resolution and underload consolidation.

use serde::Serialize;

use crate::cluster::Cluster;
use crate::detection::{is_overloaded, DetectorConfig, HostHistory};
use crate::error::{Error, Result};
use crate::model::{can_fit, HostId, HostLoad, HostSpec, HostStatus, VmId};
use crate::selection::{Candidate, VmHistory, VmSelector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Move {
    pub vm: VmId,
    pub source: HostId,
    pub dest: HostId,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct MigrationPlan {
    pub moves: Vec<Move>,
    pub hosts_to_sleep: Vec<HostId>,
    pub hosts_to_wake: Vec<HostId>,
    /// Evicted VMs no host could take; they stay on their source.
    pub unplaced: Vec<VmId>,
    /// Hosts the detector flagged this step.
    pub overloaded: Vec<HostId>,
}

impl MigrationPlan {
    pub fn validate(&self) -> Result<()> {
        let mut vms: Vec<VmId> = self.moves.iter().map(|m| m.vm).collect();
        vms.sort();
        if vms.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Contract("a VM moves twice in one plan".into()));
        }
        if let Some(m) = self.moves.iter().find(|m| m.source == m.dest) {
            return Err(Error::Contract(format!("{} moves onto its own host", m.vm)));
        }
        if let Some(h) = self
            .hosts_to_sleep
            .iter()
            .find(|h| self.moves.iter().any(|m| m.dest == **h))
        {
            return Err(Error::Contract(format!("{h} both receives VMs and sleeps")));
        }
        Ok(())
    }
}

/// Extra power drawn by `spec` when `added_mips` joins `demand_mips`.
pub fn power_increase(spec: &HostSpec, demand_mips: f64, added_mips: f64) -> f64 {
    let u = |d: f64| (d / spec.mips).clamp(0.0, 1.0);
    let m = &spec.power_model;
    m.power_draw_unchecked(u(demand_mips + added_mips), HostStatus::Active)
        - m.power_draw_unchecked(u(demand_mips), HostStatus::Active)
}

#[derive(Debug, Clone, Copy)]
pub struct PlacementOptions<'a> {
    /// CPU admission cap passed to [`can_fit`].
    pub headroom: f64,
    /// Wake the lowest-id sleeping host that fits when no active host does.
    pub allow_wake: bool,
    /// Hosts that must not receive VMs, indexed by host id.
    pub excluded: &'a [bool],
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PlacementOutcome {
    pub placed: Vec<(VmId, HostId)>,
    pub woken: Vec<HostId>,
    pub unplaced: Vec<VmId>,
    /// Load of every receiving host before its first placement.
    touched: Vec<(HostId, HostLoad)>,
}

/// Power-aware best fit decreasing.
///
/// `vms` must be detached from the cluster; each carries the host it is
/// leaving, which is never chosen as its destination. VMs go in decreasing
/// order of current demand (ties by id) to the active host with the smallest
/// power increase among those that fit (ties by host id). Placed VMs are
/// attached to the cluster; the rest are returned as unplaced.
pub fn pabfd_place(
    cluster: &mut Cluster,
    vms: &[(VmId, Option<HostId>)],
    opts: PlacementOptions<'_>,
) -> PlacementOutcome {
    let mut order: Vec<(VmId, Option<HostId>)> = vms.to_vec();
    order.sort_by(|a, b| {
        let (da, db) = (cluster.vm(a.0).demand_mips, cluster.vm(b.0).demand_mips);
        db.total_cmp(&da).then(a.0.cmp(&b.0))
    });

    let mut out = PlacementOutcome::default();
    for (vm, source) in order {
        debug_assert!(cluster.vm(vm).host.is_none());
        let (ram, cpu) = (cluster.vm(vm).spec.ram_mb, cluster.vm(vm).demand_mips);
        let eligible =
            |h: usize| !opts.excluded.get(h).copied().unwrap_or(false) && Some(HostId(h)) != source;

        let mut best: Option<(HostId, f64)> = None;
        for (i, host) in cluster.hosts.iter().enumerate() {
            if !host.is_active()
                || !eligible(i)
                || !can_fit(&host.spec, host.load(), ram, cpu, opts.headroom)
            {
                continue;
            }
            let delta = power_increase(&host.spec, host.demand_mips, cpu);
            if best.is_none_or(|(_, b)| delta < b) {
                best = Some((HostId(i), delta));
            }
        }

        let dest = best.map(|(h, _)| h).or_else(|| {
            if !opts.allow_wake {
                return None;
            }
            cluster
                .hosts
                .iter()
                .enumerate()
                .find(|(i, h)| {
                    h.status == HostStatus::Sleeping
                        && eligible(*i)
                        && can_fit(&h.spec, h.load(), ram, cpu, opts.headroom)
                })
                .map(|(i, _)| HostId(i))
        });

        match dest {
            Some(h) => {
                if !cluster.host(h).is_active() {
                    cluster.hosts[h.0].status = HostStatus::Active;
                    out.woken.push(h);
                }
                if !out.touched.iter().any(|(t, _)| *t == h) {
                    out.touched.push((h, cluster.host(h).load()));
                }
                cluster.attach(vm, h);
                out.placed.push((vm, h));
            }
            None => out.unplaced.push(vm),
        }
    }
    out
}

fn restore_load(cluster: &mut Cluster, host: HostId, load: HostLoad) {
    let h = &mut cluster.hosts[host.0];
    h.ram_used_mb = load.ram_used_mb;
    h.demand_mips = load.demand_mips;
}

/// Undoes a placement exactly, including the hosts' float bookkeeping.
fn rollback(cluster: &mut Cluster, outcome: &PlacementOutcome) {
    for &(vm, _) in &outcome.placed {
        cluster.detach(vm);
    }
    for &(h, load) in &outcome.touched {
        restore_load(cluster, h, load);
    }
    for &h in &outcome.woken {
        cluster.hosts[h.0].status = HostStatus::Sleeping;
    }
}

/// Picks VMs off an overloaded host until the detector, re-run on the
/// history with its latest sample replaced by the reduced utilization,
/// no longer flags it (or the host is empty). Evicted VMs are detached
/// from the cluster and returned in eviction order.
pub fn resolve_overload(
    cluster: &mut Cluster,
    host: HostId,
    history: &HostHistory,
    detector: &DetectorConfig,
    selector: &mut VmSelector,
    vm_histories: &[VmHistory],
    migration_bandwidth_bps: f64,
) -> Result<Vec<VmId>> {
    if !is_overloaded(detector, history.as_slice())? {
        return Err(Error::Contract(format!("{host} is not overloaded")));
    }
    let mut adjusted = history.clone();
    let mut evicted = Vec::new();
    loop {
        let h = cluster.host(host);
        if h.vms.is_empty() {
            break;
        }
        let candidates: Vec<Candidate<'_>> = h
            .vms
            .iter()
            .map(|&vm| Candidate {
                id: vm,
                ram_mb: cluster.vm(vm).spec.ram_mb,
                history: vm_histories[vm.0].as_slice(),
            })
            .collect();
        let pick = selector.select(&candidates, migration_bandwidth_bps)?;
        cluster.detach(pick);
        evicted.push(pick);
        adjusted.replace_last(cluster.host(host).cpu().utilization);
        if !is_overloaded(detector, adjusted.as_slice())? {
            break;
        }
    }
    Ok(evicted)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConsolidationOutcome {
    pub moves: Vec<Move>,
    pub slept: Vec<HostId>,
    pub kept: Vec<HostId>,
}

/// Evacuates the least-loaded eligible hosts one at a time.
///
/// Candidates are active hosts that were not flagged overloaded and have
/// not received VMs this step (`received`). A candidate is emptied only if
/// all of its VMs fit on other active hosts, never waking sleeping ones;
/// otherwise it is kept untouched. Emptied hosts are returned for sleep but
/// their status is left to the caller.
pub fn consolidate_underloaded(
    cluster: &mut Cluster,
    overloaded: &[bool],
    received: &mut [bool],
    headroom: f64,
) -> ConsolidationOutcome {
    let n = cluster.hosts.len();
    // Utilization of a host changes only when it receives or loses VMs, and
    // both remove it from candidacy, so one sort replaces a repeated argmin.
    let mut candidates: Vec<(f64, HostId)> = cluster
        .active_hosts()
        .filter(|h| !overloaded[h.0] && !received[h.0])
        .map(|h| (cluster.host(h).cpu().utilization, h))
        .collect();
    candidates.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

    let mut excluded: Vec<bool> = overloaded.to_vec();
    excluded.resize(n, false);
    let mut out = ConsolidationOutcome::default();
    for (_, host) in candidates {
        if received[host.0] || excluded[host.0] {
            continue;
        }
        let saved = cluster.host(host).load();
        let vms: Vec<VmId> = cluster.host(host).vms.clone();
        for &vm in &vms {
            cluster.detach(vm);
        }
        let batch: Vec<(VmId, Option<HostId>)> = vms.iter().map(|&vm| (vm, Some(host))).collect();
        excluded[host.0] = true;
        let placed = pabfd_place(
            cluster,
            &batch,
            PlacementOptions {
                headroom,
                allow_wake: false,
                excluded: &excluded,
            },
        );
        if placed.unplaced.is_empty() {
            for &(vm, dest) in &placed.placed {
                received[dest.0] = true;
                out.moves.push(Move {
                    vm,
                    source: host,
                    dest,
                });
            }
            out.slept.push(host);
        } else {
            rollback(cluster, &placed);
            for &vm in &vms {
                cluster.attach(vm, host);
            }
            restore_load(cluster, host, saved);
            excluded[host.0] = overloaded[host.0];
            out.kept.push(host);
        }
    }
    out
}

/// Plans one consolidation round on a copy of `cluster`.
///
/// Overloaded active hosts are handled in ascending id order, their evictees
/// placed together (sleeping hosts may be woken), then underloaded hosts are
/// consolidated.
pub fn plan_step(
    cluster: &Cluster,
    host_histories: &[HostHistory],
    vm_histories: &[VmHistory],
    detector: &DetectorConfig,
    selector: &mut VmSelector,
    migration_bandwidth_bps: f64,
) -> Result<MigrationPlan> {
    let mut scratch = cluster.clone();
    let n = scratch.hosts.len();
    let headroom = detector.admission_headroom();
    let mut plan = MigrationPlan::default();

    let mut overloaded = vec![false; n];
    for h in cluster.active_hosts() {
        let history = host_histories[h.0].as_slice();
        if !history.is_empty() && is_overloaded(detector, history)? {
            overloaded[h.0] = true;
            plan.overloaded.push(h);
        }
    }

    let mut evictees: Vec<(VmId, Option<HostId>)> = Vec::new();
    for &h in &plan.overloaded {
        let evicted = resolve_overload(
            &mut scratch,
            h,
            &host_histories[h.0],
            detector,
            selector,
            vm_histories,
            migration_bandwidth_bps,
        )?;
        evictees.extend(evicted.into_iter().map(|vm| (vm, Some(h))));
    }

    let mut received = vec![false; n];
    if !evictees.is_empty() {
        let placed = pabfd_place(
            &mut scratch,
            &evictees,
            PlacementOptions {
                headroom,
                allow_wake: true,
                excluded: &overloaded,
            },
        );
        for &(vm, dest) in &placed.placed {
            let source = evictees
                .iter()
                .find(|e| e.0 == vm)
                .and_then(|e| e.1)
                .unwrap();
            received[dest.0] = true;
            plan.moves.push(Move { vm, source, dest });
        }
        for &vm in &placed.unplaced {
            let source = evictees
                .iter()
                .find(|e| e.0 == vm)
                .and_then(|e| e.1)
                .unwrap();
            scratch.attach(vm, source);
        }
        plan.hosts_to_wake = placed.woken;
        plan.unplaced = placed.unplaced;
    }

    let consolidated = consolidate_underloaded(&mut scratch, &overloaded, &mut received, headroom);
    plan.moves.extend(consolidated.moves);
    plan.hosts_to_sleep = consolidated.slept;
    plan.validate()?;
    Ok(plan)
}

/// Commits a plan: wakes hosts, performs the moves, puts hosts to sleep.
pub fn apply_plan(cluster: &mut Cluster, plan: &MigrationPlan) -> Result<()> {
    plan.validate()?;
    for &h in &plan.hosts_to_wake {
        cluster.hosts[h.0].status = HostStatus::Active;
    }
    for m in &plan.moves {
        if cluster.vm(m.vm).host != Some(m.source) {
            return Err(Error::Contract(format!("{} is not on {}", m.vm, m.source)));
        }
        if !cluster.host(m.dest).is_active() {
            return Err(Error::Contract(format!(
                "{} moves onto sleeping {}",
                m.vm, m.dest
            )));
        }
        cluster.detach(m.vm);
        cluster.attach(m.vm, m.dest);
    }
    for &h in &plan.hosts_to_sleep {
        if !cluster.host(h).vms.is_empty() {
            return Err(Error::Contract(format!("{h} still has VMs at sleep time")));
        }
        cluster.hosts[h.0].status = HostStatus::Sleeping;
    }
    cluster.recompute_host_demands();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{PowerModel, VmSpec};
    use crate::selection::{SelectorConfig, SelectorKind};

    fn host(mips: f64) -> HostSpec {
        HostSpec {
            mips,
            ram_mb: 32768,
            storage_gb: 4096,
            bandwidth_bps: 1e9,
            power_model: PowerModel::default(),
        }
    }

    fn vm(mips: f64) -> VmSpec {
        VmSpec {
            mips,
            ram_mb: 1024,
            storage_gb: 100,
        }
    }

    fn opts(excluded: &[bool]) -> PlacementOptions<'_> {
        PlacementOptions {
            headroom: 1.0,
            allow_wake: true,
            excluded,
        }
    }

    #[test]
    fn prefers_smaller_power_increase() {
        let mut c = Cluster::new(
            &[host(2000.0), host(3000.0)],
            &[vm(500.0)],
            HostStatus::Active,
        );
        assert!((power_increase(&host(2000.0), 0.0, 500.0) - 18.75).abs() < 1e-12);
        assert!((power_increase(&host(3000.0), 0.0, 500.0) - 12.5).abs() < 1e-12);
        let out = pabfd_place(&mut c, &[(VmId(0), None)], opts(&[false, false]));
        assert_eq!(out.placed, vec![(VmId(0), HostId(1))]);
    }

    #[test]
    fn ties_go_to_lowest_host() {
        let mut c = Cluster::new(
            &[host(2000.0), host(2000.0)],
            &[vm(500.0)],
            HostStatus::Active,
        );
        let out = pabfd_place(&mut c, &[(VmId(0), None)], opts(&[false, false]));
        assert_eq!(out.placed, vec![(VmId(0), HostId(0))]);
    }

    #[test]
    fn ram_full_hosts_leave_vm_unplaced() {
        let mut tiny = host(2000.0);
        tiny.ram_mb = 512;
        let mut c = Cluster::new(&[tiny, tiny], &[vm(100.0)], HostStatus::Active);
        let out = pabfd_place(&mut c, &[(VmId(0), None)], opts(&[false, false]));
        assert_eq!(out.unplaced, vec![VmId(0)]);
        assert!(out.placed.is_empty());
        assert_eq!(c.vm(VmId(0)).host, None);
    }

    #[test]
    fn wakes_lowest_sleeping_host_when_needed() {
        let mut c = Cluster::new(
            &[host(1000.0); 3],
            &[vm(800.0), vm(800.0)],
            HostStatus::Sleeping,
        );
        c.hosts[2].status = HostStatus::Active;
        c.attach(VmId(0), HostId(2));
        let out = pabfd_place(&mut c, &[(VmId(1), None)], opts(&[false; 3]));
        assert_eq!(out.placed, vec![(VmId(1), HostId(0))]);
        assert_eq!(out.woken, vec![HostId(0)]);

        let mut c = Cluster::new(&[host(1000.0); 2], &[vm(800.0)], HostStatus::Sleeping);
        let no_wake = PlacementOptions {
            allow_wake: false,
            ..opts(&[false; 2])
        };
        let out = pabfd_place(&mut c, &[(VmId(0), None)], no_wake);
        assert_eq!(out.unplaced, vec![VmId(0)]);
    }

    #[test]
    fn source_and_excluded_hosts_are_skipped() {
        let mut c = Cluster::new(
            &[host(3000.0), host(2000.0), host(1000.0)],
            &[vm(100.0)],
            HostStatus::Active,
        );
        let out = pabfd_place(
            &mut c,
            &[(VmId(0), Some(HostId(0)))],
            opts(&[false, true, false]),
        );
        assert_eq!(out.placed, vec![(VmId(0), HostId(2))]);
    }

    #[test]
    fn places_in_decreasing_demand_order() {
        // Host 1 has room for one VM; the larger VM goes first and takes it.
        let mut c = Cluster::new(
            &[host(1000.0), host(3000.0)],
            &[vm(300.0), vm(900.0)],
            HostStatus::Active,
        );
        c.vms[1].demand_mips = 900.0;
        c.hosts[1].ram_used_mb = 32768 - 1024;
        let out = pabfd_place(
            &mut c,
            &[(VmId(0), None), (VmId(1), None)],
            PlacementOptions {
                headroom: 1.0,
                allow_wake: false,
                excluded: &[false, false],
            },
        );
        assert_eq!(out.placed[0], (VmId(1), HostId(1)));
        assert_eq!(out.placed[1], (VmId(0), HostId(0)));
    }

    #[test]
    fn resolve_overload_evicts_once() {
        let mut c = Cluster::new(&[host(1000.0)], &[vm(600.0), vm(500.0)], HostStatus::Active);
        c.attach(VmId(0), HostId(0));
        c.attach(VmId(1), HostId(0));
        let history = HostHistory::from_values(12, &[1.0]);
        let det = DetectorConfig::thr(0.9);
        let mut sel = VmSelector::new(SelectorConfig::new(SelectorKind::Mmt, 0));
        let vh = vec![VmHistory::new(12); 2];
        let evicted =
            resolve_overload(&mut c, HostId(0), &history, &det, &mut sel, &vh, 5e8).unwrap();
        assert_eq!(evicted, vec![VmId(0)]);
        assert_eq!(c.host(HostId(0)).vms, vec![VmId(1)]);
    }

    #[test]
    fn resolve_overload_requires_overload() {
        let mut c = Cluster::new(&[host(1000.0)], &[vm(100.0)], HostStatus::Active);
        c.attach(VmId(0), HostId(0));
        let history = HostHistory::from_values(12, &[0.1]);
        let mut sel = VmSelector::new(SelectorConfig::new(SelectorKind::Mmt, 0));
        let vh = vec![VmHistory::new(12)];
        assert!(resolve_overload(
            &mut c,
            HostId(0),
            &history,
            &DetectorConfig::thr(0.9),
            &mut sel,
            &vh,
            5e8
        )
        .is_err());
    }

    fn three_host_fixture(utils: [f64; 3]) -> Cluster {
        let vms: Vec<VmSpec> = utils.iter().map(|u| vm(u * 1000.0)).collect();
        let mut c = Cluster::new(&[host(1000.0); 3], &vms, HostStatus::Active);
        for i in 0..3 {
            c.attach(VmId(i), HostId(i));
        }
        c
    }

    #[test]
    fn consolidation_evacuates_least_loaded() {
        let mut c = three_host_fixture([0.1, 0.3, 0.4]);
        let mut received = vec![false; 3];
        let out = consolidate_underloaded(&mut c, &[false; 3], &mut received, 1.0);
        // equal ΔP on both other hosts, so host 0's VM goes to host 1
        assert_eq!(out.slept[0], HostId(0));
        assert_eq!(
            out.moves[0],
            Move {
                vm: VmId(0),
                source: HostId(0),
                dest: HostId(1)
            }
        );
        // host 1 received, host 2 can then be emptied onto host 1
        assert_eq!(out.slept, vec![HostId(0), HostId(2)]);
        assert_eq!(c.host(HostId(1)).vms, vec![VmId(0), VmId(1), VmId(2)]);
        c.audit().unwrap();
    }

    #[test]
    fn single_active_host_is_never_slept() {
        let mut c = Cluster::new(
            &[host(1000.0), host(1000.0)],
            &[vm(100.0)],
            HostStatus::Sleeping,
        );
        c.hosts[0].status = HostStatus::Active;
        c.attach(VmId(0), HostId(0));
        let out = consolidate_underloaded(&mut c, &[false; 2], &mut [false; 2], 1.0);
        assert!(out.slept.is_empty());
        assert_eq!(out.kept, vec![HostId(0)]);
        assert_eq!(c.host(HostId(0)).vms, vec![VmId(0)]);
    }

    #[test]
    fn failed_evacuation_restores_state_exactly() {
        let mut c = three_host_fixture([0.5, 0.6, 0.7]);
        let before = c.clone();
        let out = consolidate_underloaded(&mut c, &[false; 3], &mut [false; 3], 0.9);
        assert!(out.slept.is_empty());
        assert_eq!(c, before);
    }

    #[test]
    fn plan_step_resolves_overload_and_commits() {
        let mut c = Cluster::new(
            &[host(1000.0), host(1000.0)],
            &[vm(600.0), vm(500.0)],
            HostStatus::Sleeping,
        );
        c.hosts[0].status = HostStatus::Active;
        c.attach(VmId(0), HostId(0));
        c.attach(VmId(1), HostId(0));
        let hh = vec![HostHistory::from_values(12, &[1.0]), HostHistory::new(12)];
        let vh = vec![VmHistory::new(12); 2];
        let mut sel = VmSelector::new(SelectorConfig::new(SelectorKind::Mmt, 0));
        let plan = plan_step(&c, &hh, &vh, &DetectorConfig::thr(0.9), &mut sel, 5e8).unwrap();
        assert_eq!(plan.overloaded, vec![HostId(0)]);
        assert_eq!(
            plan.moves,
            vec![Move {
                vm: VmId(0),
                source: HostId(0),
                dest: HostId(1)
            }]
        );
        assert_eq!(plan.hosts_to_wake, vec![HostId(1)]);
        assert!(plan.hosts_to_sleep.is_empty());
        // planning leaves the input untouched
        assert_eq!(c.host(HostId(1)).status, HostStatus::Sleeping);
        apply_plan(&mut c, &plan).unwrap();
        c.audit().unwrap();
        assert_eq!(c.host(HostId(1)).vms, vec![VmId(0)]);
    }

    #[test]
    fn plan_validation() {
        let m = Move {
            vm: VmId(0),
            source: HostId(0),
            dest: HostId(1),
        };
        let twice = MigrationPlan {
            moves: vec![m, m],
            ..Default::default()
        };
        assert!(twice.validate().is_err());
        let self_move = MigrationPlan {
            moves: vec![Move {
                dest: HostId(0),
                ..m
            }],
            ..Default::default()
        };
        assert!(self_move.validate().is_err());
        let sleep_dest = MigrationPlan {
            moves: vec![m],
            hosts_to_sleep: vec![HostId(1)],
            ..Default::default()
        };
        assert!(sleep_dest.validate().is_err());
    }
}
