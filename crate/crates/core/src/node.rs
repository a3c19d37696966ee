//! The I/O-free interface between host state machines and the network that
//! drives them (the simulator or real sockets).

use crate::endhost::MeasurementReport;
use crate::model::{DurationMs, NodeId};
use crate::wire::Message;

pub type ConnId = u64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum FailReason {
    OsTimeout,
    AppTimeout,
}

impl FailReason {
    pub fn as_str(self) -> &'static str {
        match self {
            FailReason::OsTimeout => "os_timeout",
            FailReason::AppTimeout => "app_timeout",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Input {
    Connected {
        token: u64,
        conn: ConnId,
        elapsed: DurationMs,
    },
    ConnectFailed {
        token: u64,
        reason: FailReason,
        elapsed: DurationMs,
    },
    /// A peer connected to us; its identity arrives in a later `Hello`.
    Accepted { conn: ConnId },
    Received { conn: ConnId, msg: Message },
    Closed { conn: ConnId },
    Timer { token: u64 },
    /// Local request to broadcast a payload (end-hosts only).
    Broadcast { payload: Vec<u8> },
}

#[derive(Clone, Debug, PartialEq)]
pub enum Output {
    Connect {
        token: u64,
        to: NodeId,
        timeout: Option<DurationMs>,
    },
    Send { conn: ConnId, msg: Message },
    Close { conn: ConnId },
    SetTimer { after: DurationMs, token: u64 },
    Event(NodeEvent),
}

/// Observable milestones, used for statistics in simulation and status lines
/// in real mode.
#[derive(Clone, Debug, PartialEq)]
pub enum NodeEvent {
    GraphBuilt {
        gtime: DurationMs,
        kept: Vec<(NodeId, DurationMs)>,
        absent: Vec<NodeId>,
    },
    PeerRestored { peer: NodeId },
    PeerLost { peer: NodeId },
    Measured(MeasurementReport),
    Streaming { oh: NodeId },
    Rejected,
    Delivered { origin: NodeId, msg_id: u64, payload: Vec<u8> },
    Assigned {
        eh: NodeId,
        oh: NodeId,
        cost: DurationMs,
        decision_us: f64,
        response: DurationMs,
    },
    OhDead { oh: NodeId, affected: Vec<NodeId> },
    OhAlive { oh: NodeId },
}

/// A host state machine.
pub trait Node {
    fn id(&self) -> NodeId;
    fn start(&mut self, now: DurationMs, out: &mut Vec<Output>);
    fn handle(&mut self, now: DurationMs, input: Input, out: &mut Vec<Output>);
}
