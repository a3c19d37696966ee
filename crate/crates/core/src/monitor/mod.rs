//! Monitor host: the greedy end-host distribution, OH liveness and load
//! bookkeeping, failure handling and an exhaustive optimum for small
//! instances.

mod host;

use std::collections::{BTreeMap, BTreeSet};

use crate::endhost::{cumm_lat, MeasurementReport};
use crate::model::{DurationMs, NodeId};

pub use host::{AssignmentRecord, MonitorConfig, MonitorHost, ServiceModel};

/// Symmetric inter-OH latencies keyed by unordered pair.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct InterOhLatencyMatrix {
    entries: BTreeMap<(NodeId, NodeId), DurationMs>,
}

fn norm(a: NodeId, b: NodeId) -> (NodeId, NodeId) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl InterOhLatencyMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, a: NodeId, b: NodeId, latency: DurationMs) {
        assert!(a != b, "no self pairs");
        self.entries.insert(norm(a, b), latency);
    }

    pub fn get(&self, a: NodeId, b: NodeId) -> Option<DurationMs> {
        self.entries.get(&norm(a, b)).copied()
    }

    pub fn remove(&mut self, a: NodeId, b: NodeId) {
        self.entries.remove(&norm(a, b));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, NodeId, DurationMs)> + '_ {
        self.entries.iter().map(|(&(a, b), &l)| (a, b, l))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DistributionWeights {
    /// Milliseconds of cost per unit of reported load.
    pub w_load: f64,
}

impl Default for DistributionWeights {
    fn default() -> Self {
        Self { w_load: 0.0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OhEntry {
    pub reported_load: f64,
    pub alive: bool,
    pub assigned_count: u32,
    pub missed_reports: u32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Assignment {
    pub eh: NodeId,
    pub oh: NodeId,
    pub cost_ms: DurationMs,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MonitorError {
    #[error("no latency entry for {0} - {1}")]
    MissingEntry(NodeId, NodeId),
    #[error("report from {0} has no usable candidate")]
    NoCandidate(NodeId),
    #[error("unknown OH {0}")]
    UnknownOh(NodeId),
    #[error("reported load {0} is outside [0, 1]")]
    LoadOutOfRange(f64),
    #[error("instance too large for exhaustive search ({ohs} OHs, {ehs} EHs)")]
    TooLarge { ohs: usize, ehs: usize },
}

pub const DEFAULT_MISSED_LIMIT: u32 = 3;

/// The EH's own edge to an OH: the mean probe round trip.
pub fn l_meas(sample: &crate::endhost::LatencySample) -> Option<DurationMs> {
    cumm_lat(sample).ok().map(|c| c / 3.0)
}

/// Sum over unordered pairs of `chosen ∪ {candidate}` of `L`, plus the EH's
/// edge and the load penalty.
pub fn latency_cost(
    chosen: &BTreeSet<NodeId>,
    candidate: NodeId,
    l_meas: DurationMs,
    matrix: &InterOhLatencyMatrix,
    load: f64,
    weights: DistributionWeights,
) -> Result<DurationMs, MonitorError> {
    let mut set = chosen.clone();
    set.insert(candidate);
    let set: Vec<NodeId> = set.into_iter().collect();
    let mut sum = 0.0;
    for (i, &a) in set.iter().enumerate() {
        for &b in &set[i + 1..] {
            sum += matrix.get(a, b).ok_or(MonitorError::MissingEntry(a, b))?.ms();
        }
    }
    Ok(DurationMs::new(sum + l_meas.ms() + weights.w_load * load))
}

/// Usable candidates of a report: Ok samples, one per OH (the smallest edge
/// wins if an OH appears twice), sorted by id.
pub fn candidates(report: &MeasurementReport) -> Vec<(NodeId, DurationMs)> {
    let mut best: BTreeMap<NodeId, DurationMs> = BTreeMap::new();
    for s in &report.samples {
        if let Some(l) = l_meas(s) {
            best.entry(s.oh)
                .and_modify(|cur| *cur = cur.min(l))
                .or_insert(l);
        }
    }
    best.into_iter().collect()
}

/// The monitor's decision state.
#[derive(Clone, Debug, Default)]
pub struct DistributionState {
    pub chosen: BTreeSet<NodeId>,
    pub oh_table: BTreeMap<NodeId, OhEntry>,
    pub assignments: BTreeMap<NodeId, NodeId>,
    pub weights: DistributionWeights,
    pub matrix: InterOhLatencyMatrix,
    pub missed_limit: u32,
    /// Pair sum over `chosen`, kept in step with every change to it.
    chosen_sum: f64,
    ops: u64,
}

impl DistributionState {
    pub fn new(weights: DistributionWeights) -> Self {
        Self {
            weights,
            missed_limit: DEFAULT_MISSED_LIMIT,
            ..Self::default()
        }
    }

    /// Registers (or revives) an OH with the given load.
    pub fn register_oh(&mut self, oh: NodeId, load: f64) {
        let e = self.oh_table.entry(oh).or_insert(OhEntry {
            reported_load: load,
            alive: true,
            assigned_count: 0,
            missed_reports: 0,
        });
        e.alive = true;
        e.reported_load = load;
        e.missed_reports = 0;
    }

    pub fn is_alive(&self, oh: NodeId) -> bool {
        self.oh_table.get(&oh).is_some_and(|e| e.alive)
    }

    /// Matrix lookups performed by `distribute` so far.
    pub fn ops(&self) -> u64 {
        self.ops
    }

    /// Cached pair sum over the chosen set.
    pub fn chosen_pair_sum(&self) -> f64 {
        self.chosen_sum
    }

    fn recompute_chosen_sum(&mut self) {
        let set: Vec<NodeId> = self.chosen.iter().copied().collect();
        let mut sum = 0.0;
        for (i, &a) in set.iter().enumerate() {
            for &b in &set[i + 1..] {
                sum += self.matrix.get(a, b).map_or(0.0, DurationMs::ms);
            }
        }
        self.chosen_sum = sum;
    }

    /// Records an OH-pair latency. Changing an entry inside the chosen set
    /// refreshes the cached sum.
    pub fn set_latency(&mut self, a: NodeId, b: NodeId, l: Option<DurationMs>) {
        match l {
            Some(l) => self.matrix.insert(a, b, l),
            None => self.matrix.remove(a, b),
        }
        if self.chosen.contains(&a) && self.chosen.contains(&b) {
            self.recompute_chosen_sum();
        }
    }
}

/// Greedy placement of one EH (one request of the distribution algorithm).
pub fn distribute(
    report: &MeasurementReport,
    state: &mut DistributionState,
) -> Result<Assignment, MonitorError> {
    let base = state.chosen_sum;
    let chosen: Vec<NodeId> = state.chosen.iter().copied().collect();
    let mut best: Option<(NodeId, f64, f64)> = None;
    for (c, l) in candidates(report) {
        let Some(entry) = state.oh_table.get(&c) else { continue };
        if !entry.alive {
            continue;
        }
        let mut extra = 0.0;
        if !state.chosen.contains(&c) {
            let mut missing = false;
            for &a in &chosen {
                state.ops += 1;
                match state.matrix.get(a, c) {
                    Some(x) => extra += x.ms(),
                    None => {
                        missing = true;
                        break;
                    }
                }
            }
            if missing {
                continue;
            }
        } else {
            state.ops += 1;
        }
        let cost = base + extra + l.ms() + state.weights.w_load * entry.reported_load;
        if best.is_none_or(|(_, b, _)| cost < b) {
            best = Some((c, cost, extra));
        }
    }
    let (oh, cost, extra) = best.ok_or(MonitorError::NoCandidate(report.eh))?;
    if state.chosen.insert(oh) {
        state.chosen_sum += extra;
    }
    if let Some(old) = state.assignments.insert(report.eh, oh) {
        if let Some(e) = state.oh_table.get_mut(&old) {
            e.assigned_count = e.assigned_count.saturating_sub(1);
        }
    }
    state.oh_table.get_mut(&oh).unwrap().assigned_count += 1;
    Ok(Assignment {
        eh: report.eh,
        oh,
        cost_ms: DurationMs::new(cost),
    })
}

/// Marks an OH dead, drops it from the chosen set and releases its EHs,
/// which are returned in id order.
pub fn handle_oh_failure(oh: NodeId, state: &mut DistributionState) -> Result<Vec<NodeId>, MonitorError> {
    let entry = state.oh_table.get_mut(&oh).ok_or(MonitorError::UnknownOh(oh))?;
    entry.alive = false;
    entry.assigned_count = 0;
    if state.chosen.remove(&oh) {
        state.recompute_chosen_sum();
    }
    let affected: Vec<NodeId> = state
        .assignments
        .iter()
        .filter(|(_, &o)| o == oh)
        .map(|(&e, _)| e)
        .collect();
    for e in &affected {
        state.assignments.remove(e);
    }
    Ok(affected)
}

/// Stores a load report. Returns `true` if the report revived a dead OH.
pub fn update_load(oh: NodeId, reported_load: f64, state: &mut DistributionState) -> Result<bool, MonitorError> {
    if !(0.0..=1.0).contains(&reported_load) {
        return Err(MonitorError::LoadOutOfRange(reported_load));
    }
    let revived = state.oh_table.get(&oh).is_some_and(|e| !e.alive);
    state.register_oh(oh, reported_load);
    Ok(revived)
}

/// One load interval elapsed. Every alive OH that has now missed
/// `missed_limit` consecutive reports is failed; returns them with their
/// released EHs.
pub fn tick(state: &mut DistributionState) -> Vec<(NodeId, Vec<NodeId>)> {
    let limit = state.missed_limit.max(1);
    let mut dead = Vec::new();
    for (&oh, e) in state.oh_table.iter_mut() {
        if e.alive {
            e.missed_reports += 1;
            if e.missed_reports >= limit {
                dead.push(oh);
            }
        }
    }
    dead.into_iter()
        .map(|oh| {
            let affected = handle_oh_failure(oh, state).expect("known OH");
            (oh, affected)
        })
        .collect()
}

/// Total cost of a complete assignment: pairwise latency over the union of
/// used OHs plus each EH's edge and load penalty. `None` if an EH is mapped
/// to an OH it cannot use or a needed matrix entry is missing.
pub fn assignment_total_cost(
    reports: &[MeasurementReport],
    assignment: &BTreeMap<NodeId, NodeId>,
    matrix: &InterOhLatencyMatrix,
    loads: &BTreeMap<NodeId, f64>,
    weights: DistributionWeights,
) -> Option<f64> {
    let mut used = BTreeSet::new();
    let mut edges = 0.0;
    for r in reports {
        let oh = *assignment.get(&r.eh)?;
        let (_, l) = candidates(r).into_iter().find(|&(c, _)| c == oh)?;
        edges += l.ms() + weights.w_load * loads.get(&oh).copied().unwrap_or(0.0);
        used.insert(oh);
    }
    let used: Vec<NodeId> = used.into_iter().collect();
    let mut pairs = 0.0;
    for (i, &a) in used.iter().enumerate() {
        for &b in &used[i + 1..] {
            pairs += matrix.get(a, b)?.ms();
        }
    }
    Some(pairs + edges)
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalOptimum {
    pub assignment: BTreeMap<NodeId, NodeId>,
    pub total_cost: f64,
    /// Number of complete assignments examined.
    pub evaluated: u64,
}

pub const GLOBAL_MAX_OHS: usize = 4;
pub const GLOBAL_MAX_EHS: usize = 8;

/// Exhaustive optimum over all assignments of EHs to their usable OHs, for
/// at most 4 OHs and 8 EHs. Assignments are visited in lexicographic order
/// (EHs by id, OHs by id) and the first strict minimum is kept.
pub fn global_optimal_assignment(
    reports: &[MeasurementReport],
    matrix: &InterOhLatencyMatrix,
    loads: &BTreeMap<NodeId, f64>,
    weights: DistributionWeights,
) -> Result<GlobalOptimum, MonitorError> {
    let mut reports: Vec<&MeasurementReport> = reports.iter().collect();
    reports.sort_by_key(|r| r.eh);
    let options: Vec<Vec<NodeId>> = reports
        .iter()
        .map(|r| candidates(r).into_iter().map(|(c, _)| c).collect())
        .collect();
    let ohs: BTreeSet<NodeId> = options.iter().flatten().copied().collect();
    if ohs.len() > GLOBAL_MAX_OHS || reports.len() > GLOBAL_MAX_EHS {
        return Err(MonitorError::TooLarge {
            ohs: ohs.len(),
            ehs: reports.len(),
        });
    }
    if let Some(r) = reports.iter().zip(&options).find(|(_, o)| o.is_empty()) {
        return Err(MonitorError::NoCandidate(r.0.eh));
    }
    let owned: Vec<MeasurementReport> = reports.iter().map(|r| (*r).clone()).collect();
    let mut idx = vec![0usize; reports.len()];
    let mut best: Option<(f64, BTreeMap<NodeId, NodeId>)> = None;
    let mut evaluated = 0u64;
    loop {
        let assignment: BTreeMap<NodeId, NodeId> = reports
            .iter()
            .zip(&idx)
            .zip(&options)
            .map(|((r, &i), o)| (r.eh, o[i]))
            .collect();
        evaluated += 1;
        if let Some(cost) = assignment_total_cost(&owned, &assignment, matrix, loads, weights) {
            if best.as_ref().is_none_or(|(b, _)| cost < *b) {
                best = Some((cost, assignment));
            }
        }
        // Advance the mixed-radix counter, last EH fastest.
        let mut k = idx.len();
        loop {
            if k == 0 {
                let (total_cost, assignment) = best.ok_or_else(|| {
                    MonitorError::NoCandidate(reports.first().map_or(NodeId::eh(0), |r| r.eh))
                })?;
                return Ok(GlobalOptimum {
                    assignment,
                    total_cost,
                    evaluated,
                });
            }
            k -= 1;
            idx[k] += 1;
            if idx[k] < options[k].len() {
                break;
            }
            idx[k] = 0;
        }
    }
}
