//! Overlay hosts: complete-graph construction with duplicate elimination,
//! one-hop forwarding, load reporting and peer reconnection.

mod host;

use std::collections::{BTreeMap, BTreeSet};

use crate::model::{DurationMs, NodeId};

pub use host::{OverlayConfig, OverlayHost, PairOutcome};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Hop {
    /// Sent by the originating end-host to its own OH.
    SourceHop,
    /// Relayed by an OH to its peers; never relayed again.
    PeerHop,
}

impl Hop {
    pub fn to_byte(self) -> u8 {
        match self {
            Hop::SourceHop => 0,
            Hop::PeerHop => 1,
        }
    }

    pub fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(Hop::SourceHop),
            1 => Some(Hop::PeerHop),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DataMessage {
    pub msg_id: u64,
    pub origin_eh: NodeId,
    pub hop: Hop,
    pub payload: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Outgoing,
    Incoming,
}

/// Picks the connection to keep for an OH pair from the two directional
/// measurements (`None` = that direction failed). Lower latency wins; an exact
/// tie keeps the direction initiated by the lower id. Both endpoints reach the
/// same decision when fed mirrored inputs. Returns `None` when neither
/// direction survived.
pub fn resolve_duplicate(
    meas_out: Option<DurationMs>,
    meas_in: Option<DurationMs>,
    out_initiator: NodeId,
    in_initiator: NodeId,
) -> Option<Direction> {
    match (meas_out, meas_in) {
        (None, None) => None,
        (Some(_), None) => Some(Direction::Outgoing),
        (None, Some(_)) => Some(Direction::Incoming),
        (Some(o), Some(i)) => Some(if o.ms() < i.ms() {
            Direction::Outgoing
        } else if i.ms() < o.ms() || in_initiator < out_initiator {
            Direction::Incoming
        } else {
            Direction::Outgoing
        }),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Delivery {
    /// Relay to a peer OH as a `PeerHop` message.
    Peer(NodeId),
    LocalEh(NodeId),
}

/// One-hop forwarding targets for a data message at one OH.
pub fn forward(msg: &DataMessage, peers: &[NodeId], local_ehs: &[NodeId]) -> Vec<Delivery> {
    let mut out = Vec::new();
    if msg.hop == Hop::SourceHop {
        let peers: BTreeSet<_> = peers.iter().copied().collect();
        out.extend(peers.into_iter().map(Delivery::Peer));
    }
    let ehs: BTreeSet<_> = local_ehs
        .iter()
        .copied()
        .filter(|&eh| eh != msg.origin_eh)
        .collect();
    out.extend(ehs.into_iter().map(Delivery::LocalEh));
    out
}

pub const BACKOFF_BASE_MS: f64 = 1_000.0;
pub const BACKOFF_CAP_MS: f64 = 30_000.0;

/// Delay before reconnect attempt `attempt` (0-based): 1, 2, 4, 8 ... s,
/// capped at 30 s.
pub fn reconnect_backoff(attempt: u32) -> DurationMs {
    let ms = BACKOFF_BASE_MS * 2f64.powi(attempt.min(16) as i32);
    DurationMs::new(ms.min(BACKOFF_CAP_MS))
}

/// Per-OH construction times of one overlay and their maximum.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GraphStats {
    pub per_oh_gtime_ms: BTreeMap<NodeId, DurationMs>,
    pub construction_time_ms: DurationMs,
}

impl GraphStats {
    pub fn from_gtimes(per_oh_gtime_ms: BTreeMap<NodeId, DurationMs>) -> Self {
        let construction_time_ms = per_oh_gtime_ms
            .values()
            .copied()
            .fold(DurationMs::ZERO, DurationMs::max);
        Self {
            per_oh_gtime_ms,
            construction_time_ms,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(ms: f64) -> Option<DurationMs> {
        Some(DurationMs::new(ms))
    }

    #[test]
    fn lower_latency_direction_survives() {
        let (a, b) = (NodeId::oh(3), NodeId::oh(7));
        assert_eq!(resolve_duplicate(d(10.0), d(12.0), a, b), Some(Direction::Outgoing));
        assert_eq!(resolve_duplicate(d(12.0), d(10.0), a, b), Some(Direction::Incoming));
    }

    #[test]
    fn ties_keep_lower_initiator() {
        let (a, b) = (NodeId::oh(3), NodeId::oh(7));
        // Seen from oh3: its outgoing was initiated by 3.
        assert_eq!(resolve_duplicate(d(5.0), d(5.0), a, b), Some(Direction::Outgoing));
        // Seen from oh7: the incoming one was initiated by 3.
        assert_eq!(resolve_duplicate(d(5.0), d(5.0), b, a), Some(Direction::Incoming));
    }

    #[test]
    fn failed_direction_loses() {
        let (a, b) = (NodeId::oh(1), NodeId::oh(2));
        assert_eq!(resolve_duplicate(None, d(9.0), a, b), Some(Direction::Incoming));
        assert_eq!(resolve_duplicate(d(9.0), None, a, b), Some(Direction::Outgoing));
        assert_eq!(resolve_duplicate(None, None, a, b), None);
    }

    fn msg(origin: u32, hop: Hop) -> DataMessage {
        DataMessage {
            msg_id: 1,
            origin_eh: NodeId::eh(origin),
            hop,
            payload: vec![],
        }
    }

    #[test]
    fn source_hop_floods_peers_and_locals() {
        let out = forward(
            &msg(0, Hop::SourceHop),
            &[NodeId::oh(1)],
            &[NodeId::eh(0), NodeId::eh(2)],
        );
        assert_eq!(out, vec![Delivery::Peer(NodeId::oh(1)), Delivery::LocalEh(NodeId::eh(2))]);
    }

    #[test]
    fn peer_hop_is_not_relayed() {
        let out = forward(&msg(0, Hop::PeerHop), &[NodeId::oh(2)], &[NodeId::eh(5)]);
        assert_eq!(out, vec![Delivery::LocalEh(NodeId::eh(5))]);
    }

    #[test]
    fn backoff_schedule() {
        let s: Vec<f64> = (0..7).map(|i| reconnect_backoff(i).ms()).collect();
        assert_eq!(s, vec![1000.0, 2000.0, 4000.0, 8000.0, 16000.0, 30000.0, 30000.0]);
    }

    #[test]
    fn construction_time_is_max() {
        let g = GraphStats::from_gtimes(
            [(0, 5000.0), (1, 7000.0), (2, 9000.0)]
                .into_iter()
                .map(|(i, t)| (NodeId::oh(i), DurationMs::new(t)))
                .collect(),
        );
        assert_eq!(g.construction_time_ms.ms(), 9000.0);
    }
}
