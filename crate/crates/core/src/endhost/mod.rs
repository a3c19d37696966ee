//! End-host measurement: per-OH samples, the total measurement time, the
//! connect strategies and sub-group partitioning, plus the end-host state
//! machine that probes, reports, joins and streams.

mod host;

use crate::model::{DurationMs, NodeId};

pub use host::{EndHost, EndHostConfig, EndHostMode, EndHostPhase};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SampleStatus {
    Ok,
    /// Connect failed, possibly after several attempts; carries the total time
    /// spent.
    ConnFailed(DurationMs),
    /// Abandoned at the application timeout (or probe deadline).
    TimedOut(DurationMs),
}

/// One end-host to overlay-host probe result.
#[derive(Clone, Debug, PartialEq)]
pub struct LatencySample {
    pub oh: NodeId,
    pub conn_ms: DurationMs,
    /// Three probe round trips; present only for `Ok` samples.
    pub lats: Option<[DurationMs; 3]>,
    pub status: SampleStatus,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SampleError {
    #[error("no samples")]
    Empty,
    #[error("sample for {0} is not Ok")]
    NotOk(NodeId),
}

impl LatencySample {
    pub fn ok(oh: NodeId, conn_ms: DurationMs, lats: [DurationMs; 3]) -> Self {
        Self {
            oh,
            conn_ms,
            lats: Some(lats),
            status: SampleStatus::Ok,
        }
    }

    pub fn conn_failed(oh: NodeId, elapsed: DurationMs) -> Self {
        Self {
            oh,
            conn_ms: elapsed,
            lats: None,
            status: SampleStatus::ConnFailed(elapsed),
        }
    }

    pub fn timed_out(oh: NodeId, elapsed: DurationMs) -> Self {
        Self {
            oh,
            conn_ms: elapsed,
            lats: None,
            status: SampleStatus::TimedOut(elapsed),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == SampleStatus::Ok
    }

    /// `conn + lat1 + lat2 + lat3` for Ok samples, the elapsed time otherwise.
    pub fn total_ms(&self) -> DurationMs {
        match (self.status, self.lats) {
            (SampleStatus::Ok, Some([a, b, c])) => self.conn_ms + a + b + c,
            (SampleStatus::ConnFailed(e) | SampleStatus::TimedOut(e), _) => e,
            (SampleStatus::Ok, None) => self.conn_ms,
        }
    }
}

/// Sum of the three probe round trips.
pub fn cumm_lat(sample: &LatencySample) -> Result<DurationMs, SampleError> {
    match (sample.status, sample.lats) {
        (SampleStatus::Ok, Some([a, b, c])) => Ok(a + b + c),
        _ => Err(SampleError::NotOk(sample.oh)),
    }
}

/// Total measurement time: the largest per-OH total.
pub fn compute_mi(samples: &[LatencySample]) -> Result<DurationMs, SampleError> {
    samples
        .iter()
        .map(LatencySample::total_ms)
        .max_by(DurationMs::total_cmp)
        .ok_or(SampleError::Empty)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MeasurementReport {
    pub eh: NodeId,
    pub samples: Vec<LatencySample>,
    pub m_i_ms: DurationMs,
}

impl MeasurementReport {
    pub fn new(eh: NodeId, samples: Vec<LatencySample>) -> Result<Self, SampleError> {
        let m_i_ms = compute_mi(&samples)?;
        Ok(Self {
            eh,
            samples,
            m_i_ms,
        })
    }

    /// True when at least one sample is Ok.
    pub fn usable(&self) -> bool {
        self.samples.iter().any(LatencySample::is_ok)
    }

    pub fn ok_count(&self) -> usize {
        self.samples.iter().filter(|s| s.is_ok()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PartitionError {
    #[error("group count must be at least 1")]
    NoGroups,
    #[error("{groups} groups exceed the {ohs} available OHs")]
    TooManyGroups { groups: usize, ohs: usize },
}

/// The end-hosts of one sub-group and the OHs they probe.
pub type SubGroup = (Vec<NodeId>, Vec<NodeId>);

/// Splits EHs and OHs into `groups` disjoint sub-groups by round-robin over
/// sorted ids, so any remainder lands in the earliest groups.
pub fn partition(ehs: &[NodeId], ohs: &[NodeId], groups: usize) -> Result<Vec<SubGroup>, PartitionError> {
    if groups < 1 {
        return Err(PartitionError::NoGroups);
    }
    if groups > ohs.len() {
        return Err(PartitionError::TooManyGroups {
            groups,
            ohs: ohs.len(),
        });
    }
    let deal = |ids: &[NodeId]| {
        let mut sorted = ids.to_vec();
        sorted.sort();
        sorted.dedup();
        let mut out = vec![Vec::new(); groups];
        for (i, id) in sorted.into_iter().enumerate() {
            out[i % groups].push(id);
        }
        out
    };
    Ok(deal(ehs).into_iter().zip(deal(ohs)).collect())
}

/// The OHs an end-host probes under a partitioned strategy: those of the
/// group selected by the end-host's rank among `ehs`.
pub fn group_ohs(eh: NodeId, ehs: &[NodeId], ohs: &[NodeId], groups: usize) -> Vec<NodeId> {
    match partition(ehs, ohs, groups) {
        Ok(parts) => parts
            .into_iter()
            .find(|(e, _)| e.contains(&eh))
            .map(|(_, o)| o)
            .unwrap_or_default(),
        Err(_) => ohs.to_vec(),
    }
}
