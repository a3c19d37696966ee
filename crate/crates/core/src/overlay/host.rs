use std::collections::{BTreeMap, BTreeSet, HashMap};

use super::{forward, reconnect_backoff, resolve_duplicate, DataMessage, Delivery, Direction, Hop};
use crate::endhost::{LatencySample, MeasurementReport};
use crate::model::{DurationMs, NodeId, Role};
use crate::node::{ConnId, Input, Node, NodeEvent, Output};
use crate::wire::Message;

#[derive(Clone, Debug)]
pub struct OverlayConfig {
    pub id: NodeId,
    pub peers: Vec<NodeId>,
    pub monitor: Option<NodeId>,
    /// Value advertised in load reports.
    pub load: f64,
    pub load_interval: DurationMs,
    /// Pairs still unresolved this long after start are dropped from the graph.
    pub construction_timeout: DurationMs,
    pub reconnect_max_retries: u32,
    pub reconnect_timeout: Option<DurationMs>,
}

impl OverlayConfig {
    pub fn new(id: NodeId, peers: Vec<NodeId>, monitor: Option<NodeId>) -> Self {
        Self {
            id,
            peers,
            monitor,
            load: 0.0,
            load_interval: DurationMs::new(5_000.0),
            construction_timeout: DurationMs::new(90_000.0),
            reconnect_max_retries: 5,
            reconnect_timeout: Some(DurationMs::new(10_000.0)),
        }
    }
}

/// Both directional measurements of a pair and the decision taken on them.
#[derive(Clone, Debug, PartialEq)]
pub struct PairOutcome {
    pub peer: NodeId,
    pub meas_out: Option<DurationMs>,
    pub meas_in: Option<DurationMs>,
    pub kept: Option<Direction>,
}

const K_PEER_CONNECT: u64 = 1;
const K_MH_CONNECT: u64 = 2;
const K_LOAD: u64 = 3;
const K_DEADLINE: u64 = 4;
const K_BACKOFF: u64 = 5;
const K_MH_RETRY: u64 = 6;

fn token(kind: u64, gen: u32, idx: usize) -> u64 {
    (kind << 56) | (u64::from(gen) << 24) | idx as u64
}

fn untoken(t: u64) -> (u64, u32, usize) {
    (t >> 56, ((t >> 24) & 0xffff_ffff) as u32, (t & 0xff_ffff) as usize)
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Out {
    Idle,
    Connecting,
    Backoff,
    Open { conn: ConnId, ping_at: Option<DurationMs> },
    Done,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Kept {
    Out(ConnId, DurationMs),
    In(ConnId, DurationMs),
    Absent,
}

#[derive(Debug)]
struct Pair {
    peer: NodeId,
    round: u32,
    gen: u32,
    retries: u32,
    out: Out,
    in_conn: Option<ConnId>,
    my_meas: Option<Option<DurationMs>>,
    peer_meas: Option<Option<DurationMs>>,
    report_sent: bool,
    kept: Option<Kept>,
}

impl Pair {
    fn new(peer: NodeId) -> Self {
        Self {
            peer,
            round: 0,
            gen: 0,
            retries: 0,
            out: Out::Idle,
            in_conn: None,
            my_meas: None,
            peer_meas: None,
            report_sent: false,
            kept: None,
        }
    }

    fn out_conn(&self) -> Option<ConnId> {
        match self.out {
            Out::Open { conn, .. } => Some(conn),
            _ => None,
        }
    }

    fn kept_conn(&self) -> Option<ConnId> {
        match self.kept {
            Some(Kept::Out(c, _) | Kept::In(c, _)) => Some(c),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum ConnRole {
    Unknown,
    PeerOut(usize),
    PeerIn(usize),
    Eh(NodeId),
    Monitor,
}

/// Overlay host state machine.
pub struct OverlayHost {
    cfg: OverlayConfig,
    pairs: Vec<Pair>,
    peer_index: HashMap<NodeId, usize>,
    conns: HashMap<ConnId, ConnRole>,
    t1: DurationMs,
    pending_out: usize,
    gtime: Option<DurationMs>,
    outcomes: BTreeMap<NodeId, PairOutcome>,
    local_ehs: BTreeMap<NodeId, ConnId>,
    seen: BTreeSet<(NodeId, u64)>,
    duplicate_peer_deliveries: u64,
    peer_deliveries: u64,
    mh_conn: Option<ConnId>,
    load_reports_sent: u64,
    load_probe: Option<Box<dyn FnMut() -> f64 + Send>>,
}

impl OverlayHost {
    pub fn new(mut cfg: OverlayConfig) -> Self {
        cfg.peers.sort();
        cfg.peers.dedup();
        cfg.peers.retain(|&p| p != cfg.id);
        let pairs: Vec<Pair> = cfg.peers.iter().map(|&p| Pair::new(p)).collect();
        let peer_index = cfg.peers.iter().enumerate().map(|(i, &p)| (p, i)).collect();
        Self {
            cfg,
            pairs,
            peer_index,
            conns: HashMap::new(),
            t1: DurationMs::ZERO,
            pending_out: 0,
            gtime: None,
            outcomes: BTreeMap::new(),
            local_ehs: BTreeMap::new(),
            seen: BTreeSet::new(),
            duplicate_peer_deliveries: 0,
            peer_deliveries: 0,
            mh_conn: None,
            load_reports_sent: 0,
            load_probe: None,
        }
    }

    /// Replaces the fixed configured load with a sampled one.
    pub fn with_load_probe(mut self, probe: impl FnMut() -> f64 + Send + 'static) -> Self {
        self.load_probe = Some(Box::new(probe));
        self
    }

    pub fn config(&self) -> &OverlayConfig {
        &self.cfg
    }

    /// Construction time, once every pair has been resolved.
    pub fn gtime(&self) -> Option<DurationMs> {
        self.gtime
    }

    /// Round-0 measurements and decisions per peer.
    pub fn outcomes(&self) -> &BTreeMap<NodeId, PairOutcome> {
        &self.outcomes
    }

    /// Peers with a live kept connection: (peer, direction, latency).
    pub fn kept_peers(&self) -> Vec<(NodeId, Direction, DurationMs)> {
        self.pairs
            .iter()
            .filter_map(|p| match p.kept {
                Some(Kept::Out(_, l)) => Some((p.peer, Direction::Outgoing, l)),
                Some(Kept::In(_, l)) => Some((p.peer, Direction::Incoming, l)),
                _ => None,
            })
            .collect()
    }

    pub fn absent_peers(&self) -> Vec<NodeId> {
        self.pairs
            .iter()
            .filter(|p| p.kept == Some(Kept::Absent))
            .map(|p| p.peer)
            .collect()
    }

    /// Open peer connections of any direction.
    pub fn open_peer_conns(&self) -> usize {
        self.conns
            .values()
            .filter(|r| matches!(r, ConnRole::PeerIn(_) | ConnRole::PeerOut(_)))
            .count()
    }

    pub fn local_ehs(&self) -> Vec<NodeId> {
        self.local_ehs.keys().copied().collect()
    }

    pub fn duplicate_peer_deliveries(&self) -> u64 {
        self.duplicate_peer_deliveries
    }

    pub fn peer_deliveries(&self) -> u64 {
        self.peer_deliveries
    }

    pub fn load_reports_sent(&self) -> u64 {
        self.load_reports_sent
    }

    fn current_load(&mut self) -> f64 {
        let load = match self.load_probe.as_mut() {
            Some(probe) => probe(),
            None => self.cfg.load,
        };
        load.clamp(0.0, 1.0)
    }

    fn connect_peer(&mut self, idx: usize, timeout: Option<DurationMs>, out: &mut Vec<Output>) {
        let p = &mut self.pairs[idx];
        p.gen += 1;
        p.out = Out::Connecting;
        out.push(Output::Connect {
            token: token(K_PEER_CONNECT, p.gen, idx),
            to: p.peer,
            timeout,
        });
    }

    fn send_ping(&mut self, idx: usize, now: DurationMs, out: &mut Vec<Output>) {
        let p = &mut self.pairs[idx];
        if let Out::Open { conn, ping_at } = &mut p.out {
            if ping_at.is_none() {
                *ping_at = Some(now);
                out.push(Output::Send {
                    conn: *conn,
                    msg: Message::Ping { seq: p.round },
                });
            }
        }
    }

    fn peer_report(&self, peer: NodeId, meas: Option<DurationMs>) -> MeasurementReport {
        let sample = match meas {
            Some(l) => LatencySample::ok(peer, DurationMs::ZERO, [l, DurationMs::ZERO, DurationMs::ZERO]),
            None => LatencySample::conn_failed(peer, DurationMs::ZERO),
        };
        MeasurementReport::new(self.cfg.id, vec![sample]).expect("one sample")
    }

    fn maybe_send_report(&mut self, idx: usize, out: &mut Vec<Output>) {
        let p = &self.pairs[idx];
        let Some(meas) = p.my_meas else { return };
        if p.report_sent {
            return;
        }
        let Some(conn) = p.out_conn().or(p.in_conn) else {
            return;
        };
        let report = self.peer_report(p.peer, meas);
        self.pairs[idx].report_sent = true;
        out.push(Output::Send {
            conn,
            msg: Message::MeasReport(report),
        });
    }

    fn try_resolve(&mut self, idx: usize, now: DurationMs, out: &mut Vec<Output>) {
        let me = self.cfg.id;
        let p = &self.pairs[idx];
        if p.kept.is_some() {
            return;
        }
        let (Some(my), Some(theirs)) = (p.my_meas, p.peer_meas) else {
            return;
        };
        let decision = resolve_duplicate(my, theirs, me, p.peer);
        let kept = match decision {
            Some(Direction::Outgoing) => p.out_conn().map(|c| Kept::Out(c, my.unwrap())),
            Some(Direction::Incoming) => p.in_conn.map(|c| Kept::In(c, theirs.unwrap())),
            None => None,
        }
        .unwrap_or(Kept::Absent);
        let round = p.round;
        let peer = p.peer;
        if round == 0 {
            self.outcomes.insert(
                peer,
                PairOutcome {
                    peer,
                    meas_out: my,
                    meas_in: theirs,
                    kept: decision,
                },
            );
        }
        self.apply_decision(idx, kept, out);
        if round == 0 {
            self.check_graph_done(now, out);
        } else {
            let ev = match kept {
                Kept::Absent => NodeEvent::PeerLost { peer },
                _ => NodeEvent::PeerRestored { peer },
            };
            out.push(Output::Event(ev));
            self.report_peers_to_mh(&[idx], out);
        }
    }

    fn apply_decision(&mut self, idx: usize, kept: Kept, out: &mut Vec<Output>) {
        let p = &mut self.pairs[idx];
        p.kept = Some(kept);
        // Only the initiator closes its own losing connection.
        if !matches!(kept, Kept::Out(..)) {
            if let Some(c) = p.out_conn() {
                self.conns.remove(&c);
                out.push(Output::Close { conn: c });
            }
            p.out = Out::Done;
        }
        if kept == Kept::Absent {
            if let Some(c) = p.in_conn.take() {
                self.conns.remove(&c);
                out.push(Output::Close { conn: c });
            }
        }
    }

    fn check_graph_done(&mut self, now: DurationMs, out: &mut Vec<Output>) {
        if self.gtime.is_some() || self.pairs.iter().any(|p| p.round == 0 && p.kept.is_none()) {
            return;
        }
        let gtime = now - self.t1;
        self.gtime = Some(gtime);
        out.push(Output::Event(NodeEvent::GraphBuilt {
            gtime,
            kept: self.kept_peers().into_iter().map(|(p, _, l)| (p, l)).collect(),
            absent: self.absent_peers(),
        }));
        let all: Vec<usize> = (0..self.pairs.len()).collect();
        self.report_peers_to_mh(&all, out);
    }

    fn report_peers_to_mh(&mut self, idxs: &[usize], out: &mut Vec<Output>) {
        let Some(conn) = self.mh_conn else { return };
        let samples: Vec<LatencySample> = idxs
            .iter()
            .filter_map(|&i| {
                let p = &self.pairs[i];
                match p.kept? {
                    Kept::Out(_, l) | Kept::In(_, l) => Some(LatencySample::ok(
                        p.peer,
                        DurationMs::ZERO,
                        [l, DurationMs::ZERO, DurationMs::ZERO],
                    )),
                    Kept::Absent => Some(LatencySample::conn_failed(p.peer, DurationMs::ZERO)),
                }
            })
            .collect();
        if let Ok(report) = MeasurementReport::new(self.cfg.id, samples) {
            out.push(Output::Send {
                conn,
                msg: Message::MeasReport(report),
            });
        }
    }

    fn start_pings(&mut self, now: DurationMs, out: &mut Vec<Output>) {
        for idx in 0..self.pairs.len() {
            if self.pairs[idx].round == 0 {
                self.send_ping(idx, now, out);
            }
        }
    }

    /// The kept connection of a pair is gone: start a reconnect round.
    fn pair_lost(&mut self, idx: usize, out: &mut Vec<Output>) {
        let p = &mut self.pairs[idx];
        if p.round == 0 && p.kept.is_none() {
            return;
        }
        for c in [p.out_conn(), p.in_conn].into_iter().flatten() {
            if self.conns.remove(&c).is_some() {
                out.push(Output::Close { conn: c });
            }
        }
        p.round += 1;
        p.retries = 0;
        p.in_conn = None;
        p.my_meas = None;
        p.peer_meas = None;
        p.report_sent = false;
        p.kept = None;
        p.out = Out::Idle;
        let timeout = self.cfg.reconnect_timeout;
        self.connect_peer(idx, timeout, out);
    }

    fn handle_data(&mut self, msg: DataMessage, from_peer: bool, out: &mut Vec<Output>) {
        if from_peer {
            self.peer_deliveries += 1;
        }
        if !self.seen.insert((msg.origin_eh, msg.msg_id)) {
            if from_peer {
                self.duplicate_peer_deliveries += 1;
            }
            return;
        }
        let peers: Vec<NodeId> = self
            .pairs
            .iter()
            .filter(|p| p.kept_conn().is_some())
            .map(|p| p.peer)
            .collect();
        let ehs: Vec<NodeId> = self.local_ehs.keys().copied().collect();
        for d in forward(&msg, &peers, &ehs) {
            match d {
                Delivery::Peer(p) => {
                    let conn = self.pairs[self.peer_index[&p]].kept_conn().unwrap();
                    out.push(Output::Send {
                        conn,
                        msg: Message::Data(DataMessage {
                            hop: Hop::PeerHop,
                            ..msg.clone()
                        }),
                    });
                }
                Delivery::LocalEh(eh) => out.push(Output::Send {
                    conn: self.local_ehs[&eh],
                    msg: Message::Data(msg.clone()),
                }),
            }
        }
    }

    fn on_hello(&mut self, conn: ConnId, node: NodeId, out: &mut Vec<Output>) {
        match node.role {
            Role::Eh => {
                if let Some(old) = self.local_ehs.insert(node, conn) {
                    if old != conn {
                        self.conns.remove(&old);
                    }
                }
                self.conns.insert(conn, ConnRole::Eh(node));
            }
            Role::Oh => {
                let Some(&idx) = self.peer_index.get(&node) else {
                    return;
                };
                let p = &self.pairs[idx];
                let resolved_live = p.kept.is_some();
                if resolved_live {
                    // The peer is rebuilding the pair: drop ours and join in.
                    self.pair_lost(idx, out);
                }
                let p = &mut self.pairs[idx];
                if let Some(old) = p.in_conn.replace(conn) {
                    if old != conn && self.conns.remove(&old).is_some() {
                        out.push(Output::Close { conn: old });
                    }
                }
                self.conns.insert(conn, ConnRole::PeerIn(idx));
                self.maybe_send_report(idx, out);
            }
            Role::Mh => {}
        }
    }

    fn on_peer_report(&mut self, idx: usize, report: MeasurementReport, now: DurationMs, out: &mut Vec<Output>) {
        let Some(sample) = report.samples.first() else { return };
        let meas = sample.lats.map(|l| l[0]);
        let p = &mut self.pairs[idx];
        if p.kept.is_some() {
            return;
        }
        p.peer_meas = Some(meas);
        // Outside construction, a working reverse direction ends our own
        // reconnect attempts.
        if p.round > 0 && meas.is_some() && p.my_meas.is_none() && p.out_conn().is_none() {
            p.gen += 1;
            p.out = Out::Done;
            p.my_meas = Some(None);
            self.maybe_send_report(idx, out);
        }
        self.try_resolve(idx, now, out);
    }

    fn on_timer(&mut self, now: DurationMs, t: u64, out: &mut Vec<Output>) {
        let (kind, gen, idx) = untoken(t);
        match kind {
            K_LOAD => {
                if let Some(conn) = self.mh_conn {
                    let load = self.current_load();
                    self.load_reports_sent += 1;
                    out.push(Output::Send {
                        conn,
                        msg: Message::load_report(load),
                    });
                }
                out.push(Output::SetTimer {
                    after: self.cfg.load_interval,
                    token: token(K_LOAD, 0, 0),
                });
            }
            K_MH_RETRY => {
                if let Some(mh) = self.cfg.monitor {
                    out.push(Output::Connect {
                        token: token(K_MH_CONNECT, 0, 0),
                        to: mh,
                        timeout: Some(self.cfg.load_interval),
                    });
                }
            }
            K_DEADLINE => {
                for idx in 0..self.pairs.len() {
                    let p = &mut self.pairs[idx];
                    if p.round == 0 && p.kept.is_none() {
                        let peer = p.peer;
                        self.outcomes.insert(
                            peer,
                            PairOutcome {
                                peer,
                                meas_out: p.my_meas.flatten(),
                                meas_in: p.peer_meas.flatten(),
                                kept: None,
                            },
                        );
                        p.gen += 1;
                        self.apply_decision(idx, Kept::Absent, out);
                    }
                }
                self.check_graph_done(now, out);
            }
            K_BACKOFF => {
                let p = &self.pairs[idx];
                if p.gen == gen && p.out == Out::Backoff {
                    let timeout = self.cfg.reconnect_timeout;
                    self.connect_peer(idx, timeout, out);
                }
            }
            _ => {}
        }
    }

    fn on_connected(&mut self, now: DurationMs, t: u64, conn: ConnId, out: &mut Vec<Output>) {
        let (kind, gen, idx) = untoken(t);
        let hello = Message::Hello { node: self.cfg.id };
        match kind {
            K_MH_CONNECT => {
                self.mh_conn = Some(conn);
                self.conns.insert(conn, ConnRole::Monitor);
                out.push(Output::Send { conn, msg: hello });
                let load = self.current_load();
                self.load_reports_sent += 1;
                out.push(Output::Send {
                    conn,
                    msg: Message::load_report(load),
                });
                out.push(Output::SetTimer {
                    after: self.cfg.load_interval,
                    token: token(K_LOAD, 0, 0),
                });
                if self.gtime.is_some() {
                    let all: Vec<usize> = (0..self.pairs.len()).collect();
                    self.report_peers_to_mh(&all, out);
                }
            }
            K_PEER_CONNECT => {
                let p = &mut self.pairs[idx];
                if p.gen != gen || p.out != Out::Connecting {
                    out.push(Output::Close { conn });
                    return;
                }
                p.out = Out::Open { conn, ping_at: None };
                self.conns.insert(conn, ConnRole::PeerOut(idx));
                out.push(Output::Send { conn, msg: hello });
                if p.round == 0 {
                    self.pending_out -= 1;
                    if self.pending_out == 0 {
                        self.start_pings(now, out);
                    }
                } else {
                    self.send_ping(idx, now, out);
                }
                self.maybe_send_report(idx, out);
            }
            _ => out.push(Output::Close { conn }),
        }
    }

    fn on_connect_failed(&mut self, now: DurationMs, t: u64, out: &mut Vec<Output>) {
        let (kind, gen, idx) = untoken(t);
        match kind {
            K_MH_CONNECT => out.push(Output::SetTimer {
                after: self.cfg.load_interval,
                token: token(K_MH_RETRY, 0, 0),
            }),
            K_PEER_CONNECT => {
                let max = self.cfg.reconnect_max_retries;
                let p = &mut self.pairs[idx];
                if p.gen != gen || p.out != Out::Connecting {
                    return;
                }
                if p.round == 0 {
                    p.out = Out::Done;
                    p.my_meas = Some(None);
                    self.pending_out -= 1;
                    self.maybe_send_report(idx, out);
                    if self.pending_out == 0 {
                        self.start_pings(now, out);
                    }
                    self.try_resolve(idx, now, out);
                    return;
                }
                p.retries += 1;
                if p.retries >= max {
                    p.out = Out::Done;
                    p.my_meas = Some(None);
                    if p.in_conn.is_none() {
                        // Nothing left to wait for.
                        p.peer_meas.get_or_insert(None);
                    }
                    self.maybe_send_report(idx, out);
                    self.try_resolve(idx, now, out);
                } else {
                    p.out = Out::Backoff;
                    out.push(Output::SetTimer {
                        after: reconnect_backoff(p.retries - 1),
                        token: token(K_BACKOFF, p.gen, idx),
                    });
                }
            }
            _ => {}
        }
    }

    fn on_closed(&mut self, now: DurationMs, conn: ConnId, out: &mut Vec<Output>) {
        let Some(role) = self.conns.remove(&conn) else { return };
        match role {
            ConnRole::Eh(eh) => {
                if self.local_ehs.get(&eh) == Some(&conn) {
                    self.local_ehs.remove(&eh);
                }
            }
            ConnRole::Monitor => {
                self.mh_conn = None;
                out.push(Output::SetTimer {
                    after: self.cfg.load_interval,
                    token: token(K_MH_RETRY, 0, 0),
                });
            }
            ConnRole::PeerOut(idx) | ConnRole::PeerIn(idx) => {
                let p = &mut self.pairs[idx];
                if p.kept_conn() == Some(conn) {
                    self.pair_lost(idx, out);
                    return;
                }
                if p.kept.is_none() {
                    // A direction vanished before resolution.
                    if p.in_conn == Some(conn) {
                        p.in_conn = None;
                        if p.round > 0 && p.peer_meas.is_none() && p.my_meas == Some(None) {
                            p.peer_meas = Some(None);
                        }
                    } else if p.out_conn() == Some(conn) {
                        p.out = Out::Done;
                        if p.my_meas.is_none() {
                            p.my_meas = Some(None);
                            self.maybe_send_report(idx, out);
                        }
                    }
                    self.try_resolve(idx, now, out);
                }
            }
            ConnRole::Unknown => {}
        }
    }
}

impl Node for OverlayHost {
    fn id(&self) -> NodeId {
        self.cfg.id
    }

    fn start(&mut self, now: DurationMs, out: &mut Vec<Output>) {
        self.t1 = now;
        if let Some(mh) = self.cfg.monitor {
            out.push(Output::Connect {
                token: token(K_MH_CONNECT, 0, 0),
                to: mh,
                timeout: Some(self.cfg.load_interval),
            });
        }
        self.pending_out = self.pairs.len();
        for idx in 0..self.pairs.len() {
            self.connect_peer(idx, None, out);
        }
        if self.pairs.is_empty() {
            self.check_graph_done(now, out);
        } else {
            out.push(Output::SetTimer {
                after: self.cfg.construction_timeout,
                token: token(K_DEADLINE, 0, 0),
            });
        }
    }

    fn handle(&mut self, now: DurationMs, input: Input, out: &mut Vec<Output>) {
        match input {
            Input::Connected { token, conn, .. } => self.on_connected(now, token, conn, out),
            Input::ConnectFailed { token, .. } => self.on_connect_failed(now, token, out),
            Input::Accepted { conn } => {
                self.conns.insert(conn, ConnRole::Unknown);
            }
            Input::Closed { conn } => self.on_closed(now, conn, out),
            Input::Timer { token } => self.on_timer(now, token, out),
            Input::Broadcast { .. } => {}
            Input::Received { conn, msg } => {
                let role = self.conns.get(&conn).copied();
                match msg {
                    Message::Ping { seq } => out.push(Output::Send {
                        conn,
                        msg: Message::Pong { seq },
                    }),
                    Message::Hello { node } => self.on_hello(conn, node, out),
                    Message::Pong { .. } => {
                        if let Some(ConnRole::PeerOut(idx)) = role {
                            let p = &mut self.pairs[idx];
                            if let Out::Open { ping_at: Some(at), .. } = p.out {
                                if p.my_meas.is_none() {
                                    p.my_meas = Some(Some(now - at));
                                    self.maybe_send_report(idx, out);
                                    self.try_resolve(idx, now, out);
                                }
                            }
                        }
                    }
                    Message::MeasReport(r) => {
                        if let Some(ConnRole::PeerOut(idx) | ConnRole::PeerIn(idx)) = role {
                            if r.eh == self.pairs[idx].peer {
                                self.on_peer_report(idx, r, now, out);
                            }
                        }
                    }
                    Message::Data(d) => match (role, d.hop) {
                        (Some(ConnRole::Eh(_)), Hop::SourceHop) => self.handle_data(d, false, out),
                        (Some(ConnRole::PeerIn(_) | ConnRole::PeerOut(_)), Hop::PeerHop) => {
                            self.handle_data(d, true, out)
                        }
                        _ => {}
                    },
                    Message::Bye => {
                        if self.conns.contains_key(&conn) {
                            out.push(Output::Close { conn });
                            self.on_closed(now, conn, out);
                        }
                    }
                    Message::Assign { .. } | Message::Reject | Message::LoadReport { .. } => {}
                }
            }
        }
    }
}
