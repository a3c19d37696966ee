//! Deterministic discrete-event network.
//!
//! The simulator owns virtual time, connections and a single event queue.
//! Callers issue `connect`, `send`, `close` and `set_timer` and pull
//! dispatched events one at a time with [`SimNet::next_event`]. Every random
//! draw comes from a stream keyed by `(seed, src, dst, purpose)` and each
//! operation consumes a fixed number of draws, so runs are reproducible and
//! independent of how unrelated links are exercised.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::io::{self, Write};

use crate::model::{
    derive_link_rng, DurationMs, FailureEvent, LinkModel, NetParams, NodeId, RngStream,
    ScenarioSpec,
};
use crate::node::{ConnId, FailReason};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConnState {
    Open,
    Closed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimConn {
    pub conn_id: ConnId,
    pub initiator: NodeId,
    pub acceptor: NodeId,
    pub established_at: DurationMs,
    pub state: ConnState,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ConnResult {
    Ok(SimConn),
    Failed {
        reason: FailReason,
        elapsed: DurationMs,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub enum NetEvent {
    ConnectDone {
        node: NodeId,
        token: u64,
        peer: NodeId,
        started: DurationMs,
        result: ConnResult,
    },
    Accepted {
        node: NodeId,
        conn: SimConn,
    },
    Deliver {
        node: NodeId,
        from: NodeId,
        conn: ConnId,
        payload: Vec<u8>,
    },
    Closed {
        node: NodeId,
        conn: ConnId,
    },
    Timer {
        node: NodeId,
        token: u64,
    },
    Failure(FailureEvent),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dispatched {
    pub at: DurationMs,
    pub event: NetEvent,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("unknown node {0}")]
    UnknownNode(NodeId),
    #[error("node {0} cannot connect to itself")]
    SelfConnect(NodeId),
    #[error("unknown connection {0}")]
    UnknownConn(ConnId),
    #[error("connection {0} is closed")]
    ConnClosed(ConnId),
    #[error("{node} is not an endpoint of connection {conn}")]
    NotEndpoint { node: NodeId, conn: ConnId },
    #[error("node {0} is down")]
    NodeDown(NodeId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
enum Purpose {
    Connect,
    Latency,
}

impl Purpose {
    fn label(self) -> &'static str {
        match self {
            Purpose::Connect => "connect",
            Purpose::Latency => "latency",
        }
    }
}

#[derive(Debug)]
enum Planned {
    Success(DurationMs),
    Fail(FailReason, DurationMs),
}

#[derive(Debug)]
struct Attempt {
    src: NodeId,
    dst: NodeId,
    src_epoch: u32,
    token: u64,
    started: DurationMs,
    deadline: (FailReason, DurationMs),
    planned: Planned,
}

#[derive(Debug)]
enum Ev {
    ConnectDone { attempt: u64 },
    Accepted { node: NodeId, epoch: u32, conn: ConnId },
    Deliver { to: NodeId, conn: ConnId, payload: Vec<u8> },
    Closed { node: NodeId, conn: ConnId },
    Timer { node: NodeId, epoch: u32, token: u64 },
    Failure(FailureEvent),
}

#[derive(Debug)]
struct Scheduled {
    at: DurationMs,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Scheduled {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Scheduled {}

impl PartialOrd for Scheduled {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Scheduled {
    // Reversed so the max-heap pops the earliest (at, seq).
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .at
            .total_cmp(&self.at)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

#[derive(Debug)]
struct SimNode {
    region: usize,
    load_factor: f64,
    up: bool,
    epoch: u32,
}

#[derive(Debug)]
struct Conn {
    info: SimConn,
    closed_by: Option<NodeId>,
    aborted: bool,
    /// Latest scheduled delivery per direction: [initiator->acceptor, back].
    last_delivery: [DurationMs; 2],
    notified: [bool; 2],
}

impl Conn {
    fn side(&self, node: NodeId) -> Option<usize> {
        if node == self.info.initiator {
            Some(0)
        } else if node == self.info.acceptor {
            Some(1)
        } else {
            None
        }
    }

    fn other(&self, side: usize) -> NodeId {
        if side == 0 {
            self.info.acceptor
        } else {
            self.info.initiator
        }
    }
}

pub struct SimNet {
    seed: u64,
    now: DurationMs,
    seq: u64,
    queue: BinaryHeap<Scheduled>,
    nodes: BTreeMap<NodeId, SimNode>,
    region_count: usize,
    links: Vec<LinkModel>,
    net: NetParams,
    rngs: HashMap<(NodeId, NodeId, Purpose), RngStream>,
    conns: HashMap<ConnId, Conn>,
    next_conn: ConnId,
    attempts: HashMap<u64, Attempt>,
    next_attempt: u64,
    down_links: BTreeSet<(NodeId, NodeId)>,
    trace: Option<Vec<String>>,
    dispatched: u64,
}

impl SimNet {
    /// Builds the network for every node of `spec`, scheduling its failure
    /// list. `seed` keys all random streams.
    pub fn new(spec: &ScenarioSpec, seed: u64) -> Self {
        let regions: Vec<String> = spec.regions().into_iter().collect();
        let index = |r: &str| regions.binary_search_by(|x| x.as_str().cmp(r)).unwrap();
        let n = regions.len();
        let mut links = Vec::with_capacity(n * n);
        for from in &regions {
            for to in &regions {
                links.push(
                    spec.link(from, to)
                        .cloned()
                        .expect("scenario validated link coverage"),
                );
            }
        }
        let nodes = spec
            .all_nodes()
            .map(|n| {
                (
                    n.id,
                    SimNode {
                        region: index(&n.region),
                        load_factor: n.load.load_factor,
                        up: true,
                        epoch: 0,
                    },
                )
            })
            .collect();
        let mut net = Self {
            seed,
            now: DurationMs::ZERO,
            seq: 0,
            queue: BinaryHeap::new(),
            nodes,
            region_count: n,
            links,
            net: spec.net.clone(),
            rngs: HashMap::new(),
            conns: HashMap::new(),
            next_conn: 1,
            attempts: HashMap::new(),
            next_attempt: 1,
            down_links: BTreeSet::new(),
            trace: None,
            dispatched: 0,
        };
        for f in &spec.failures {
            net.push(f.at, Ev::Failure(f.event));
        }
        net
    }

    pub fn now(&self) -> DurationMs {
        self.now
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn os_cap(&self) -> DurationMs {
        self.net.os_cap
    }

    /// Number of events handed out so far.
    pub fn dispatched(&self) -> u64 {
        self.dispatched
    }

    pub fn is_up(&self, node: NodeId) -> bool {
        self.nodes.get(&node).is_some_and(|n| n.up)
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> &[String] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn write_trace<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "t_ms,kind,src,dst,detail")?;
        for line in self.trace() {
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    fn log(&mut self, kind: &str, src: &dyn std::fmt::Display, dst: &dyn std::fmt::Display, detail: &str) {
        if let Some(t) = self.trace.as_mut() {
            t.push(format!("{},{kind},{src},{dst},{detail}", self.now));
        }
    }

    fn push(&mut self, at: DurationMs, ev: Ev) {
        debug_assert!(at >= self.now, "event scheduled in the past");
        self.seq += 1;
        self.queue.push(Scheduled {
            at,
            seq: self.seq,
            ev,
        });
    }

    fn node(&self, id: NodeId) -> Result<&SimNode, SimError> {
        self.nodes.get(&id).ok_or(SimError::UnknownNode(id))
    }

    fn link(&self, src: NodeId, dst: NodeId) -> &LinkModel {
        let (a, b) = (self.nodes[&src].region, self.nodes[&dst].region);
        &self.links[a * self.region_count + b]
    }

    fn rng(&mut self, src: NodeId, dst: NodeId, purpose: Purpose) -> &mut RngStream {
        let seed = self.seed;
        self.rngs
            .entry((src, dst, purpose))
            .or_insert_with(|| derive_link_rng(seed, src, dst, purpose.label()))
    }

    fn link_blocked(&self, a: NodeId, b: NodeId) -> bool {
        self.down_links.contains(&(a, b)) || self.down_links.contains(&(b, a))
    }

    /// Starts a connect attempt. The outcome arrives as a `ConnectDone` event
    /// for `src` (and an `Accepted` event for `dst` on success).
    pub fn connect(
        &mut self,
        src: NodeId,
        dst: NodeId,
        app_timeout: Option<DurationMs>,
        token: u64,
    ) -> Result<u64, SimError> {
        let src_epoch = self.node(src)?.epoch;
        if !self.node(src)?.up {
            return Err(SimError::NodeDown(src));
        }
        let dst_node = self.node(dst)?;
        if src == dst {
            return Err(SimError::SelfConnect(src));
        }
        let dst_up = dst_node.up;
        let load = dst_node.load_factor;
        let link = self.link(src, dst).clone();
        let os_cap = self.net.os_cap;
        let deadline = match app_timeout {
            Some(t) if t < os_cap => (FailReason::AppTimeout, t),
            _ => (FailReason::OsTimeout, os_cap),
        };

        // Fixed draw count per attempt: one per SYN, then slow chance and
        // slow magnitude.
        let retx = self.net.syn_retx.clone();
        let rng = self.rng(src, dst, Purpose::Connect);
        let mut syn_offset = None;
        for k in 0..=retx.len() {
            let lost = rng.chance(link.syn_loss_probability);
            if !lost && syn_offset.is_none() {
                syn_offset = Some(if k == 0 { DurationMs::ZERO } else { retx[k - 1] });
            }
        }
        let slow = rng.chance(link.slow_connect_probability);
        let u = rng.unit();
        let tail = if slow {
            link.slow_connect_ms * (1.0 + u)
        } else {
            DurationMs::ZERO
        };

        let planned = match syn_offset {
            _ if !dst_up || self.link_blocked(src, dst) => Planned::Fail(deadline.0, deadline.1),
            None => Planned::Fail(deadline.0, deadline.1),
            Some(off) => {
                let elapsed = off + (link.connect_fast_ms + tail) * (1.0 + load);
                if elapsed > deadline.1 {
                    Planned::Fail(deadline.0, deadline.1)
                } else {
                    Planned::Success(elapsed)
                }
            }
        };
        let at = self.now
            + match planned {
                Planned::Success(e) | Planned::Fail(_, e) => e,
            };
        let id = self.next_attempt;
        self.next_attempt += 1;
        let detail = match &planned {
            Planned::Success(e) => format!("ok {e}"),
            Planned::Fail(r, e) => format!("{} {e}", r.as_str()),
        };
        self.log("connect", &src, &dst, &detail);
        self.attempts.insert(
            id,
            Attempt {
                src,
                dst,
                src_epoch,
                token,
                started: self.now,
                deadline,
                planned,
            },
        );
        self.push(at, Ev::ConnectDone { attempt: id });
        Ok(id)
    }

    /// Sends `payload` from `from` over `conn`. Returns the scheduled delivery
    /// time, or `None` when the packet is lost.
    pub fn send(
        &mut self,
        from: NodeId,
        conn: ConnId,
        payload: Vec<u8>,
    ) -> Result<Option<DurationMs>, SimError> {
        let c = self.conns.get(&conn).ok_or(SimError::UnknownConn(conn))?;
        let side = c.side(from).ok_or(SimError::NotEndpoint { node: from, conn })?;
        if c.aborted || c.closed_by.is_some() || c.info.state == ConnState::Closed {
            return Err(SimError::ConnClosed(conn));
        }
        let to = c.other(side);
        let link = self.link(from, to).clone();
        let load = self.nodes[&to].load_factor;
        let rng = self.rng(from, to, Purpose::Latency);
        let dropped = rng.chance(link.drop_probability);
        let u = rng.unit();
        if dropped || self.down_links.contains(&(from, to)) {
            self.log("drop", &from, &to, &format!("conn={conn} bytes={}", payload.len()));
            return Ok(None);
        }
        let one_way = (link.base_latency_ms.ms() + link.jitter_ms.ms() * (2.0 * u - 1.0)).max(0.0);
        let delay = DurationMs::new(one_way * (1.0 + load));
        let c = self.conns.get_mut(&conn).unwrap();
        let at = (self.now + delay).max(c.last_delivery[side]);
        c.last_delivery[side] = at;
        self.push(at, Ev::Deliver { to, conn, payload });
        Ok(Some(at))
    }

    /// Graceful close by `node`: the peer sees `Closed` after any data already
    /// in flight towards it.
    pub fn close(&mut self, node: NodeId, conn: ConnId) -> Result<(), SimError> {
        let c = self.conns.get(&conn).ok_or(SimError::UnknownConn(conn))?;
        let side = c.side(node).ok_or(SimError::NotEndpoint { node, conn })?;
        if c.aborted || c.closed_by.is_some() {
            if c.closed_by.is_some() && c.closed_by != Some(node) {
                let c = self.conns.get_mut(&conn).unwrap();
                c.info.state = ConnState::Closed;
            }
            return Ok(());
        }
        let to = c.other(side);
        let link = self.link(node, to);
        let delay = link.base_latency_ms * (1.0 + self.nodes[&to].load_factor);
        let c = self.conns.get_mut(&conn).unwrap();
        c.closed_by = Some(node);
        c.notified[side] = true;
        let at = (self.now + delay).max(c.last_delivery[side]);
        self.log("close", &node, &to, &format!("conn={conn}"));
        self.push(at, Ev::Closed { node: to, conn });
        Ok(())
    }

    pub fn set_timer(&mut self, node: NodeId, after: DurationMs, token: u64) -> Result<(), SimError> {
        let epoch = self.node(node)?.epoch;
        let at = self.now + after;
        self.push(at, Ev::Timer { node, epoch, token });
        Ok(())
    }

    pub fn schedule_failure(&mut self, at: DurationMs, event: FailureEvent) -> Result<(), SimError> {
        self.check_failure(&event)?;
        let at = at.max(self.now);
        self.push(at, Ev::Failure(event));
        Ok(())
    }

    fn check_failure(&self, event: &FailureEvent) -> Result<(), SimError> {
        match *event {
            FailureEvent::NodeDown(n) | FailureEvent::NodeUp(n) => self.node(n).map(|_| ()),
            FailureEvent::LinkDown { from, to } | FailureEvent::LinkUp { from, to } => {
                self.node(from)?;
                self.node(to).map(|_| ())
            }
        }
    }

    /// Applies a failure at the current time.
    pub fn inject_failure(&mut self, event: FailureEvent) -> Result<(), SimError> {
        self.check_failure(&event)?;
        self.apply_failure(event);
        Ok(())
    }

    fn abort_where(&mut self, pred: impl Fn(&SimConn) -> bool) {
        let mut ids: Vec<ConnId> = self
            .conns
            .iter()
            .filter(|(_, c)| !c.aborted && c.info.state == ConnState::Open && pred(&c.info))
            .map(|(&id, _)| id)
            .collect();
        ids.sort_unstable();
        let now = self.now;
        for id in ids {
            let c = self.conns.get_mut(&id).unwrap();
            c.aborted = true;
            c.info.state = ConnState::Closed;
            let ends = [c.info.initiator, c.info.acceptor];
            let notify: Vec<NodeId> = (0..2)
                .filter(|&s| !c.notified[s])
                .map(|s| ends[s])
                .collect();
            for node in notify {
                if self.nodes[&node].up {
                    self.push(now, Ev::Closed { node, conn: id });
                }
            }
        }
    }

    fn apply_failure(&mut self, event: FailureEvent) {
        match event {
            FailureEvent::NodeDown(n) => {
                let node = self.nodes.get_mut(&n).unwrap();
                if node.up {
                    node.up = false;
                    node.epoch += 1;
                    self.abort_where(|c| c.initiator == n || c.acceptor == n);
                }
                self.log("node_down", &n, &"-", "");
            }
            FailureEvent::NodeUp(n) => {
                let node = self.nodes.get_mut(&n).unwrap();
                if !node.up {
                    node.up = true;
                    node.epoch += 1;
                }
                self.log("node_up", &n, &"-", "");
            }
            FailureEvent::LinkDown { from, to } => {
                self.down_links.insert((from, to));
                self.abort_where(|c| {
                    (c.initiator == from && c.acceptor == to) || (c.initiator == to && c.acceptor == from)
                });
                self.log("link_down", &from, &to, "");
            }
            FailureEvent::LinkUp { from, to } => {
                self.down_links.remove(&(from, to));
                self.log("link_up", &from, &to, "");
            }
        }
    }

    /// Pops and dispatches the next event, or `None` when the queue is empty.
    /// Events addressed to downed nodes or dead connections are discarded.
    pub fn next_event(&mut self) -> Option<Dispatched> {
        loop {
            let Scheduled { at, ev, .. } = self.queue.pop()?;
            debug_assert!(at >= self.now);
            self.now = at;
            if let Some(event) = self.dispatch(ev) {
                self.dispatched += 1;
                return Some(Dispatched { at, event });
            }
        }
    }

    /// Time of the next queued event.
    pub fn peek_time(&self) -> Option<DurationMs> {
        self.queue.peek().map(|s| s.at)
    }

    /// Dispatches every queued event (discarding them) and returns the time of
    /// the last one.
    pub fn run_until_idle(&mut self) -> DurationMs {
        let mut last = self.now;
        while let Some(d) = self.next_event() {
            last = d.at;
        }
        last
    }

    fn dispatch(&mut self, ev: Ev) -> Option<NetEvent> {
        match ev {
            Ev::ConnectDone { attempt } => self.finish_connect(attempt),
            Ev::Accepted { node, epoch, conn } => {
                let n = &self.nodes[&node];
                let c = &self.conns[&conn];
                if !n.up || n.epoch != epoch || c.aborted {
                    return None;
                }
                let info = c.info.clone();
                self.log("accepted", &info.initiator, &node, &format!("conn={conn}"));
                Some(NetEvent::Accepted { node, conn: info })
            }
            Ev::Deliver { to, conn, payload } => {
                let c = &self.conns[&conn];
                if c.aborted || c.closed_by == Some(to) || !self.nodes[&to].up {
                    return None;
                }
                let from = c.other(c.side(to).unwrap());
                let ty = payload.get(4).copied().unwrap_or(0);
                self.log(
                    "deliver",
                    &from,
                    &to,
                    &format!("conn={conn} type={ty} bytes={}", payload.len()),
                );
                Some(NetEvent::Deliver {
                    node: to,
                    from,
                    conn,
                    payload,
                })
            }
            Ev::Closed { node, conn } => {
                let c = self.conns.get_mut(&conn).unwrap();
                let side = c.side(node).unwrap();
                if c.notified[side] || !self.nodes[&node].up {
                    return None;
                }
                c.notified[side] = true;
                c.info.state = ConnState::Closed;
                let peer = c.other(side);
                self.log("closed", &peer, &node, &format!("conn={conn}"));
                Some(NetEvent::Closed { node, conn })
            }
            Ev::Timer { node, epoch, token } => {
                let n = &self.nodes[&node];
                if !n.up || n.epoch != epoch {
                    return None;
                }
                self.log("timer", &node, &"-", &token.to_string());
                Some(NetEvent::Timer { node, token })
            }
            Ev::Failure(f) => {
                self.apply_failure(f);
                Some(NetEvent::Failure(f))
            }
        }
    }

    fn finish_connect(&mut self, id: u64) -> Option<NetEvent> {
        let a = self.attempts.remove(&id).expect("attempt registered");
        let src = &self.nodes[&a.src];
        if !src.up || src.epoch != a.src_epoch {
            return None;
        }
        let result = match a.planned {
            Planned::Fail(reason, elapsed) => ConnResult::Failed { reason, elapsed },
            Planned::Success(_) => {
                if !self.nodes[&a.dst].up || self.link_blocked(a.src, a.dst) {
                    // The peer vanished during the handshake; the attempt now
                    // runs into its deadline.
                    let fail_at = a.started + a.deadline.1;
                    if fail_at > self.now {
                        let at = fail_at;
                        self.attempts.insert(
                            id,
                            Attempt {
                                planned: Planned::Fail(a.deadline.0, a.deadline.1),
                                ..a
                            },
                        );
                        self.push(at, Ev::ConnectDone { attempt: id });
                        return None;
                    }
                    ConnResult::Failed {
                        reason: a.deadline.0,
                        elapsed: a.deadline.1,
                    }
                } else {
                    let conn_id = self.next_conn;
                    self.next_conn += 1;
                    let info = SimConn {
                        conn_id,
                        initiator: a.src,
                        acceptor: a.dst,
                        established_at: self.now,
                        state: ConnState::Open,
                    };
                    self.conns.insert(
                        conn_id,
                        Conn {
                            info: info.clone(),
                            closed_by: None,
                            aborted: false,
                            last_delivery: [self.now; 2],
                            notified: [false; 2],
                        },
                    );
                    let epoch = self.nodes[&a.dst].epoch;
                    let now = self.now;
                    self.push(
                        now,
                        Ev::Accepted {
                            node: a.dst,
                            epoch,
                            conn: conn_id,
                        },
                    );
                    ConnResult::Ok(info)
                }
            }
        };
        let detail = match &result {
            ConnResult::Ok(c) => format!("ok conn={}", c.conn_id),
            ConnResult::Failed { reason, elapsed } => format!("{} {elapsed}", reason.as_str()),
        };
        self.log("connect_done", &a.src, &a.dst, &detail);
        Some(NetEvent::ConnectDone {
            node: a.src,
            token: a.token,
            peer: a.dst,
            started: a.started,
            result,
        })
    }
}
