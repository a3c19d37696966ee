use std::collections::HashMap;

use super::{group_ohs, LatencySample, MeasurementReport};
use crate::model::{DurationMs, NodeId, Strategy};
use crate::node::{ConnId, FailReason, Input, Node, NodeEvent, Output};
use crate::overlay::{reconnect_backoff, DataMessage, Hop};
use crate::wire::Message;

/// What the end-host does once started.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EndHostMode {
    /// Measure, report to the monitor, stream on the assigned OH.
    Join,
    /// Measure once and stop.
    MeasureOnly,
    /// Skip measurement and stream on a fixed OH.
    Attach(NodeId),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EndHostPhase {
    Idle,
    Measuring,
    AwaitingAssign,
    Connecting(NodeId),
    Streaming(NodeId),
    Done,
    Failed,
}

#[derive(Clone, Debug)]
pub struct EndHostConfig {
    pub id: NodeId,
    pub monitor: Option<NodeId>,
    /// OHs this end-host probes (already narrowed to its sub-group).
    pub ohs: Vec<NodeId>,
    pub strategy: Strategy,
    pub mode: EndHostMode,
    /// A probe still running this long after it started is abandoned.
    pub probe_deadline: DurationMs,
    /// Timeout for connects to the monitor and the assigned OH.
    pub control_timeout: DurationMs,
    /// Measurement rounds before giving up on unusable reports or rejections.
    pub max_rounds: u32,
    pub mh_max_retries: u32,
}

impl EndHostConfig {
    pub fn new(id: NodeId, monitor: Option<NodeId>, ohs: Vec<NodeId>, strategy: Strategy) -> Self {
        Self {
            id,
            monitor,
            ohs,
            strategy,
            mode: EndHostMode::Join,
            probe_deadline: DurationMs::new(600_000.0),
            control_timeout: DurationMs::new(10_000.0),
            max_rounds: 5,
            mh_max_retries: 5,
        }
    }

    /// Narrows `ohs` to this end-host's sub-group when the strategy is
    /// partitioned. `all_ehs` is the full end-host population.
    pub fn partitioned(mut self, all_ehs: &[NodeId]) -> Self {
        if let Some(g) = self.strategy.group_count() {
            self.ohs = group_ohs(self.id, all_ehs, &self.ohs, g as usize);
        }
        self
    }

    pub fn mode(mut self, mode: EndHostMode) -> Self {
        self.mode = mode;
        self
    }
}

const K_PROBE: u64 = 1;
const K_PROBE_DEADLINE: u64 = 2;
const K_MH: u64 = 3;
const K_MH_RETRY: u64 = 4;
const K_STREAM: u64 = 5;

fn token(kind: u64, round: u32, idx: usize) -> u64 {
    (kind << 56) | (u64::from(round) << 24) | idx as u64
}

fn untoken(t: u64) -> (u64, u32, usize) {
    (t >> 56, ((t >> 24) & 0xffff_ffff) as u32, (t & 0xff_ffff) as usize)
}

#[derive(Clone, Debug, PartialEq)]
enum ProbeState {
    Connecting,
    Pinging {
        conn: ConnId,
        conn_ms: DurationMs,
        sent_at: DurationMs,
        lats: Vec<DurationMs>,
    },
    Finished(LatencySample),
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum ConnRole {
    Probe(usize),
    Monitor,
    Stream(NodeId),
}

/// End-host state machine.
pub struct EndHost {
    cfg: EndHostConfig,
    phase: EndHostPhase,
    round: u32,
    probe_started: DurationMs,
    probes: Vec<(NodeId, u32, ProbeState)>,
    conns: HashMap<ConnId, ConnRole>,
    mh_conn: Option<ConnId>,
    mh_retries: u32,
    pending_report: Option<MeasurementReport>,
    reports: Vec<MeasurementReport>,
    stream: Option<(NodeId, ConnId)>,
    stream_retry_used: bool,
    next_msg: u64,
    received: Vec<(NodeId, u64, Vec<u8>)>,
    assignments: Vec<NodeId>,
}

impl EndHost {
    pub fn new(cfg: EndHostConfig) -> Self {
        Self {
            cfg,
            phase: EndHostPhase::Idle,
            round: 0,
            probe_started: DurationMs::ZERO,
            probes: Vec::new(),
            conns: HashMap::new(),
            mh_conn: None,
            mh_retries: 0,
            pending_report: None,
            reports: Vec::new(),
            stream: None,
            stream_retry_used: false,
            next_msg: 0,
            received: Vec::new(),
            assignments: Vec::new(),
        }
    }

    pub fn config(&self) -> &EndHostConfig {
        &self.cfg
    }

    pub fn phase(&self) -> EndHostPhase {
        self.phase
    }

    /// Every completed measurement, oldest first.
    pub fn reports(&self) -> &[MeasurementReport] {
        &self.reports
    }

    /// OHs assigned by the monitor, oldest first.
    pub fn assignments(&self) -> &[NodeId] {
        &self.assignments
    }

    pub fn streaming_oh(&self) -> Option<NodeId> {
        match self.phase {
            EndHostPhase::Streaming(oh) => Some(oh),
            _ => None,
        }
    }

    /// Data received from the overlay: (origin, msg_id, payload).
    pub fn received(&self) -> &[(NodeId, u64, Vec<u8>)] {
        &self.received
    }

    /// Measurement rounds started so far.
    pub fn measure_rounds(&self) -> u32 {
        self.round
    }

    fn start_measuring(&mut self, now: DurationMs, out: &mut Vec<Output>) {
        if self.round >= self.cfg.max_rounds {
            self.phase = EndHostPhase::Failed;
            return;
        }
        self.round += 1;
        self.phase = EndHostPhase::Measuring;
        self.probe_started = now;
        self.probes = self.cfg.ohs.iter().map(|&oh| (oh, 0, ProbeState::Connecting)).collect();
        if self.probes.is_empty() {
            self.phase = EndHostPhase::Failed;
            return;
        }
        let timeout = self.cfg.strategy.connect_timeout();
        for idx in 0..self.probes.len() {
            self.probes[idx].1 = 1;
            out.push(Output::Connect {
                token: token(K_PROBE, self.round, idx),
                to: self.probes[idx].0,
                timeout,
            });
        }
        out.push(Output::SetTimer {
            after: self.cfg.probe_deadline,
            token: token(K_PROBE_DEADLINE, self.round, 0),
        });
    }

    fn finish_probe(&mut self, idx: usize, sample: LatencySample, now: DurationMs, out: &mut Vec<Output>) {
        if let ProbeState::Pinging { conn, .. } = self.probes[idx].2 {
            if self.conns.remove(&conn).is_some() {
                out.push(Output::Close { conn });
            }
        }
        self.probes[idx].2 = ProbeState::Finished(sample);
        if self.probes.iter().all(|p| matches!(p.2, ProbeState::Finished(_))) {
            self.measurement_done(now, out);
        }
    }

    fn measurement_done(&mut self, now: DurationMs, out: &mut Vec<Output>) {
        let samples: Vec<LatencySample> = self
            .probes
            .drain(..)
            .filter_map(|(_, _, s)| match s {
                ProbeState::Finished(s) => Some(s),
                _ => None,
            })
            .collect();
        let report = MeasurementReport::new(self.cfg.id, samples).expect("at least one probe");
        self.reports.push(report.clone());
        out.push(Output::Event(NodeEvent::Measured(report.clone())));
        match self.cfg.mode {
            EndHostMode::MeasureOnly => self.phase = EndHostPhase::Done,
            EndHostMode::Attach(_) => {}
            EndHostMode::Join => {
                if !report.usable() {
                    self.start_measuring(now, out);
                    return;
                }
                self.phase = EndHostPhase::AwaitingAssign;
                match self.mh_conn {
                    Some(conn) => out.push(Output::Send {
                        conn,
                        msg: Message::MeasReport(report),
                    }),
                    None => {
                        self.pending_report = Some(report);
                        self.mh_retries = 0;
                        self.connect_mh(out);
                    }
                }
            }
        }
    }

    fn connect_mh(&mut self, out: &mut Vec<Output>) {
        match self.cfg.monitor {
            Some(mh) => out.push(Output::Connect {
                token: token(K_MH, 0, 0),
                to: mh,
                timeout: Some(self.cfg.control_timeout),
            }),
            None => self.phase = EndHostPhase::Failed,
        }
    }

    fn connect_stream(&mut self, oh: NodeId, out: &mut Vec<Output>) {
        self.phase = EndHostPhase::Connecting(oh);
        out.push(Output::Connect {
            token: token(K_STREAM, self.round, 0),
            to: oh,
            timeout: Some(self.cfg.control_timeout),
        });
    }

    fn on_connected(&mut self, now: DurationMs, t: u64, conn: ConnId, elapsed: DurationMs, out: &mut Vec<Output>) {
        let (kind, round, idx) = untoken(t);
        match kind {
            K_PROBE if round == self.round && self.phase == EndHostPhase::Measuring => {
                let started = self.probe_started;
                let Some(p) = self.probes.get_mut(idx) else {
                    out.push(Output::Close { conn });
                    return;
                };
                if p.2 != ProbeState::Connecting {
                    out.push(Output::Close { conn });
                    return;
                }
                // Retries follow each other immediately, so the connect time
                // of the whole attempt chain is the time since the probe began.
                let conn_ms = (now - started).max(elapsed);
                p.2 = ProbeState::Pinging {
                    conn,
                    conn_ms,
                    sent_at: now,
                    lats: Vec::with_capacity(3),
                };
                self.conns.insert(conn, ConnRole::Probe(idx));
                out.push(Output::Send {
                    conn,
                    msg: Message::Ping { seq: 0 },
                });
            }
            K_MH => {
                self.mh_conn = Some(conn);
                self.conns.insert(conn, ConnRole::Monitor);
                out.push(Output::Send {
                    conn,
                    msg: Message::Hello { node: self.cfg.id },
                });
                if let Some(report) = self.pending_report.take() {
                    out.push(Output::Send {
                        conn,
                        msg: Message::MeasReport(report),
                    });
                }
            }
            K_STREAM => match self.phase {
                EndHostPhase::Connecting(oh) if round == self.round => {
                    self.stream = Some((oh, conn));
                    self.conns.insert(conn, ConnRole::Stream(oh));
                    self.phase = EndHostPhase::Streaming(oh);
                    self.stream_retry_used = false;
                    out.push(Output::Send {
                        conn,
                        msg: Message::Hello { node: self.cfg.id },
                    });
                    out.push(Output::Event(NodeEvent::Streaming { oh }));
                }
                _ => out.push(Output::Close { conn }),
            },
            _ => out.push(Output::Close { conn }),
        }
    }

    fn on_connect_failed(&mut self, now: DurationMs, t: u64, reason: FailReason, out: &mut Vec<Output>) {
        let (kind, round, idx) = untoken(t);
        match kind {
            K_PROBE if round == self.round && self.phase == EndHostPhase::Measuring => {
                let max = self.cfg.strategy.max_attempts();
                let Some(p) = self.probes.get_mut(idx) else { return };
                if p.2 != ProbeState::Connecting {
                    return;
                }
                if p.1 < max {
                    p.1 += 1;
                    out.push(Output::Connect {
                        token: t,
                        to: p.0,
                        timeout: self.cfg.strategy.connect_timeout(),
                    });
                    return;
                }
                let oh = p.0;
                let spent = now - self.probe_started;
                let sample = match reason {
                    FailReason::AppTimeout => LatencySample::timed_out(oh, spent),
                    FailReason::OsTimeout => LatencySample::conn_failed(oh, spent),
                };
                self.finish_probe(idx, sample, now, out);
            }
            K_MH => {
                self.mh_retries += 1;
                if self.mh_retries > self.cfg.mh_max_retries {
                    self.phase = EndHostPhase::Failed;
                } else {
                    out.push(Output::SetTimer {
                        after: reconnect_backoff(self.mh_retries - 1),
                        token: token(K_MH_RETRY, 0, 0),
                    });
                }
            }
            K_STREAM => {
                if let EndHostPhase::Connecting(oh) = self.phase {
                    if round == self.round {
                        self.stream_lost(oh, now, out);
                    }
                }
            }
            _ => {}
        }
    }

    /// The streaming path to `oh` is gone or could not be opened.
    fn stream_lost(&mut self, oh: NodeId, now: DurationMs, out: &mut Vec<Output>) {
        self.stream = None;
        if let EndHostMode::Attach(_) = self.cfg.mode {
            self.phase = EndHostPhase::Failed;
            return;
        }
        if !self.stream_retry_used {
            self.stream_retry_used = true;
            self.connect_stream(oh, out);
        } else {
            self.stream_retry_used = false;
            self.start_measuring(now, out);
        }
    }

    fn on_closed(&mut self, now: DurationMs, conn: ConnId, out: &mut Vec<Output>) {
        let Some(role) = self.conns.remove(&conn) else { return };
        match role {
            ConnRole::Probe(idx) => {
                if self.phase == EndHostPhase::Measuring {
                    let oh = self.probes[idx].0;
                    let spent = now - self.probe_started;
                    self.finish_probe(idx, LatencySample::timed_out(oh, spent), now, out);
                }
            }
            ConnRole::Monitor => {
                self.mh_conn = None;
                if self.phase == EndHostPhase::AwaitingAssign {
                    // The request may be lost with the connection.
                    self.pending_report = self.reports.last().cloned();
                    self.mh_retries = 0;
                    self.connect_mh(out);
                }
            }
            ConnRole::Stream(oh) => {
                if self.stream.map(|s| s.1) == Some(conn) {
                    self.stream_lost(oh, now, out);
                }
            }
        }
    }

    fn on_received(&mut self, now: DurationMs, conn: ConnId, msg: Message, out: &mut Vec<Output>) {
        let role = self.conns.get(&conn).copied();
        match (role, msg) {
            (Some(ConnRole::Probe(idx)), Message::Pong { seq }) => {
                let Some(p) = self.probes.get_mut(idx) else { return };
                let ProbeState::Pinging {
                    conn,
                    conn_ms,
                    sent_at,
                    lats,
                } = &mut p.2
                else {
                    return;
                };
                if seq as usize != lats.len() {
                    return;
                }
                lats.push(now - *sent_at);
                if lats.len() == 3 {
                    let sample = LatencySample::ok(p.0, *conn_ms, [lats[0], lats[1], lats[2]]);
                    self.finish_probe(idx, sample, now, out);
                } else {
                    *sent_at = now;
                    out.push(Output::Send {
                        conn: *conn,
                        msg: Message::Ping { seq: seq + 1 },
                    });
                }
            }
            (Some(ConnRole::Monitor), Message::Assign { oh }) => {
                if self.phase == EndHostPhase::AwaitingAssign {
                    self.assignments.push(oh);
                    self.connect_stream(oh, out);
                }
            }
            (Some(ConnRole::Monitor), Message::Reject) => {
                if self.phase == EndHostPhase::AwaitingAssign {
                    out.push(Output::Event(NodeEvent::Rejected));
                    self.start_measuring(now, out);
                }
            }
            (Some(ConnRole::Stream(_)), Message::Data(d)) => {
                out.push(Output::Event(NodeEvent::Delivered {
                    origin: d.origin_eh,
                    msg_id: d.msg_id,
                    payload: d.payload.clone(),
                }));
                self.received.push((d.origin_eh, d.msg_id, d.payload));
            }
            (_, Message::Ping { seq }) => out.push(Output::Send {
                conn,
                msg: Message::Pong { seq },
            }),
            (Some(_), Message::Bye) => {
                out.push(Output::Close { conn });
                self.on_closed(now, conn, out);
            }
            _ => {}
        }
    }

    fn broadcast(&mut self, payload: Vec<u8>, out: &mut Vec<Output>) -> bool {
        let Some((_, conn)) = self.stream.filter(|_| self.streaming_oh().is_some()) else {
            return false;
        };
        let msg_id = self.next_msg;
        self.next_msg += 1;
        out.push(Output::Send {
            conn,
            msg: Message::Data(DataMessage {
                msg_id,
                origin_eh: self.cfg.id,
                hop: Hop::SourceHop,
                payload,
            }),
        });
        true
    }
}

impl Node for EndHost {
    fn id(&self) -> NodeId {
        self.cfg.id
    }

    fn start(&mut self, now: DurationMs, out: &mut Vec<Output>) {
        match self.cfg.mode {
            EndHostMode::Attach(oh) => self.connect_stream(oh, out),
            _ => self.start_measuring(now, out),
        }
    }

    fn handle(&mut self, now: DurationMs, input: Input, out: &mut Vec<Output>) {
        match input {
            Input::Connected { token, conn, elapsed } => self.on_connected(now, token, conn, elapsed, out),
            Input::ConnectFailed { token, reason, .. } => self.on_connect_failed(now, token, reason, out),
            Input::Accepted { conn } => out.push(Output::Close { conn }),
            Input::Received { conn, msg } => self.on_received(now, conn, msg, out),
            Input::Closed { conn } => self.on_closed(now, conn, out),
            Input::Timer { token: t } => {
                let (kind, round, _) = untoken(t);
                match kind {
                    K_PROBE_DEADLINE if round == self.round && self.phase == EndHostPhase::Measuring => {
                        let spent = now - self.probe_started;
                        for idx in 0..self.probes.len() {
                            if !matches!(self.probes[idx].2, ProbeState::Finished(_)) {
                                let oh = self.probes[idx].0;
                                if self.phase != EndHostPhase::Measuring {
                                    break;
                                }
                                self.finish_probe(idx, LatencySample::timed_out(oh, spent), now, out);
                            }
                        }
                    }
                    K_MH_RETRY => self.connect_mh(out),
                    _ => {}
                }
            }
            Input::Broadcast { payload } => {
                self.broadcast(payload, out);
            }
        }
    }
}
