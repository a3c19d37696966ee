use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::{self, Write};
use std::time::Instant;

use super::{distribute, handle_oh_failure, tick, update_load, DistributionState, DistributionWeights, MonitorError};
use crate::endhost::MeasurementReport;
use crate::model::{DurationMs, NodeId, Role};
use crate::node::{ConnId, Input, Node, NodeEvent, Output};
use crate::wire::{load_from_wire, Message};

/// How long one decision occupies the monitor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ServiceModel {
    /// Virtual time: a fixed per-request cost plus a cost per matrix lookup.
    Modeled {
        per_request: DurationMs,
        per_op: DurationMs,
    },
    /// Wall-clock measurement; replies go out as soon as the decision is made.
    Measured,
}

impl Default for ServiceModel {
    fn default() -> Self {
        ServiceModel::Modeled {
            per_request: DurationMs::new(0.2),
            per_op: DurationMs::new(0.000_5),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MonitorConfig {
    pub id: NodeId,
    pub weights: DistributionWeights,
    pub load_interval: DurationMs,
    pub missed_limit: u32,
    pub service: ServiceModel,
}

impl MonitorConfig {
    pub fn new(id: NodeId) -> Self {
        Self {
            id,
            weights: DistributionWeights::default(),
            load_interval: DurationMs::new(5_000.0),
            missed_limit: super::DEFAULT_MISSED_LIMIT,
            service: ServiceModel::default(),
        }
    }
}

/// One row of the assignment log.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentRecord {
    pub eh: NodeId,
    /// `None` for a rejection.
    pub oh: Option<NodeId>,
    pub cost_ms: Option<DurationMs>,
    pub decision_us: f64,
    pub response: DurationMs,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Peer {
    Unknown,
    Oh(NodeId),
    Eh(NodeId),
}

struct Pending {
    conn: ConnId,
    report: MeasurementReport,
    arrived: DurationMs,
}

struct InFlight {
    conn: ConnId,
    reply: Message,
    record: AssignmentRecord,
    arrived: DurationMs,
}

const T_TICK: u64 = 1;
const T_SERVICE: u64 = 2;

/// Monitor host state machine. Requests are decided one at a time in
/// arrival order.
pub struct MonitorHost {
    cfg: MonitorConfig,
    state: DistributionState,
    queue: VecDeque<Pending>,
    in_flight: Option<InFlight>,
    conns: HashMap<ConnId, Peer>,
    oh_conns: BTreeMap<NodeId, ConnId>,
    log: Vec<AssignmentRecord>,
}

impl MonitorHost {
    pub fn new(cfg: MonitorConfig) -> Self {
        let mut state = DistributionState::new(cfg.weights);
        state.missed_limit = cfg.missed_limit;
        Self {
            cfg,
            state,
            queue: VecDeque::new(),
            in_flight: None,
            conns: HashMap::new(),
            oh_conns: BTreeMap::new(),
            log: Vec::new(),
        }
    }

    pub fn config(&self) -> &MonitorConfig {
        &self.cfg
    }

    pub fn state(&self) -> &DistributionState {
        &self.state
    }

    pub fn state_mut(&mut self) -> &mut DistributionState {
        &mut self.state
    }

    pub fn log(&self) -> &[AssignmentRecord] {
        &self.log
    }

    pub fn queued(&self) -> usize {
        self.queue.len() + usize::from(self.in_flight.is_some())
    }

    /// Writes the assignment log as `eh_id,oh_id,cost_ms,decision_us`.
    pub fn write_log_csv(&self, mut w: impl Write) -> io::Result<()> {
        writeln!(w, "eh_id,oh_id,cost_ms,decision_us")?;
        for r in &self.log {
            let oh = r.oh.map(|o| o.to_string()).unwrap_or_else(|| "reject".into());
            let cost = r.cost_ms.map(|c| format!("{:.3}", c.ms())).unwrap_or_default();
            writeln!(w, "{},{},{},{:.3}", r.eh, oh, cost, r.decision_us)?;
        }
        Ok(())
    }

    fn decide(&mut self, p: &Pending) -> (Message, AssignmentRecord, DurationMs) {
        let ops_before = self.state.ops();
        let started = Instant::now();
        let result = distribute(&p.report, &mut self.state);
        let wall_us = started.elapsed().as_secs_f64() * 1e6;
        let service = match self.cfg.service {
            ServiceModel::Modeled { per_request, per_op } => {
                per_request + per_op * (self.state.ops() - ops_before) as f64
            }
            ServiceModel::Measured => DurationMs::ZERO,
        };
        let decision_us = match self.cfg.service {
            ServiceModel::Modeled { .. } => service.ms() * 1000.0,
            ServiceModel::Measured => wall_us,
        };
        let (reply, oh, cost) = match result {
            Ok(a) => (Message::Assign { oh: a.oh }, Some(a.oh), Some(a.cost_ms)),
            Err(_) => (Message::Reject, None, None),
        };
        let record = AssignmentRecord {
            eh: p.report.eh,
            oh,
            cost_ms: cost,
            decision_us,
            response: DurationMs::ZERO,
        };
        (reply, record, service)
    }

    fn finish(&mut self, now: DurationMs, f: InFlight, out: &mut Vec<Output>) {
        let mut record = f.record;
        record.response = now - f.arrived;
        out.push(Output::Send {
            conn: f.conn,
            msg: f.reply,
        });
        if let Some(oh) = record.oh {
            out.push(Output::Event(NodeEvent::Assigned {
                eh: record.eh,
                oh,
                cost: record.cost_ms.unwrap_or(DurationMs::ZERO),
                decision_us: record.decision_us,
                response: record.response,
            }));
        }
        self.log.push(record);
    }

    fn pump(&mut self, now: DurationMs, out: &mut Vec<Output>) {
        while self.in_flight.is_none() {
            let Some(p) = self.queue.pop_front() else { return };
            let (reply, record, service) = self.decide(&p);
            let f = InFlight {
                conn: p.conn,
                reply,
                record,
                arrived: p.arrived,
            };
            if service.ms() > 0.0 {
                self.in_flight = Some(f);
                out.push(Output::SetTimer {
                    after: service,
                    token: T_SERVICE,
                });
            } else {
                self.finish(now, f, out);
            }
        }
    }

    fn oh_failed(&mut self, oh: NodeId, out: &mut Vec<Output>) {
        if let Ok(affected) = handle_oh_failure(oh, &mut self.state) {
            out.push(Output::Event(NodeEvent::OhDead { oh, affected }));
        }
    }

    fn on_oh_report(&mut self, oh: NodeId, report: &MeasurementReport) {
        for s in &report.samples {
            if s.oh == oh || s.oh.role != Role::Oh {
                continue;
            }
            let l = s.lats.filter(|_| s.is_ok()).map(|l| l[0]);
            self.state.set_latency(oh, s.oh, l);
        }
    }

    /// Queues a request as if it had arrived on `conn` (used by the
    /// response-time experiment).
    pub fn submit(&mut self, now: DurationMs, conn: ConnId, report: MeasurementReport, out: &mut Vec<Output>) {
        self.queue.push_back(Pending {
            conn,
            report,
            arrived: now,
        });
        self.pump(now, out);
    }

    pub fn fail_oh(&mut self, oh: NodeId) -> Result<Vec<NodeId>, MonitorError> {
        handle_oh_failure(oh, &mut self.state)
    }
}

impl Node for MonitorHost {
    fn id(&self) -> NodeId {
        self.cfg.id
    }

    fn start(&mut self, _now: DurationMs, out: &mut Vec<Output>) {
        out.push(Output::SetTimer {
            after: self.cfg.load_interval,
            token: T_TICK,
        });
    }

    fn handle(&mut self, now: DurationMs, input: Input, out: &mut Vec<Output>) {
        match input {
            Input::Accepted { conn } => {
                self.conns.insert(conn, Peer::Unknown);
            }
            Input::Closed { conn } => {
                if let Some(Peer::Oh(oh)) = self.conns.remove(&conn) {
                    if self.oh_conns.get(&oh) == Some(&conn) {
                        self.oh_conns.remove(&oh);
                        self.oh_failed(oh, out);
                    }
                }
            }
            Input::Timer { token: T_TICK } => {
                for (oh, affected) in tick(&mut self.state) {
                    out.push(Output::Event(NodeEvent::OhDead { oh, affected }));
                }
                out.push(Output::SetTimer {
                    after: self.cfg.load_interval,
                    token: T_TICK,
                });
            }
            Input::Timer { token: T_SERVICE } => {
                if let Some(f) = self.in_flight.take() {
                    self.finish(now, f, out);
                }
                self.pump(now, out);
            }
            Input::Received { conn, msg } => match msg {
                Message::Hello { node } => match node.role {
                    Role::Oh => {
                        self.conns.insert(conn, Peer::Oh(node));
                        self.oh_conns.insert(node, conn);
                        let load = self.state.oh_table.get(&node).map_or(0.0, |e| e.reported_load);
                        self.state.register_oh(node, load);
                        out.push(Output::Event(NodeEvent::OhAlive { oh: node }));
                    }
                    Role::Eh => {
                        self.conns.insert(conn, Peer::Eh(node));
                    }
                    Role::Mh => {}
                },
                Message::LoadReport { scaled } => {
                    if let Some(Peer::Oh(oh)) = self.conns.get(&conn).copied() {
                        if let Ok(true) = update_load(oh, load_from_wire(scaled), &mut self.state) {
                            out.push(Output::Event(NodeEvent::OhAlive { oh }));
                        }
                    }
                }
                Message::MeasReport(report) => match self.conns.get(&conn).copied() {
                    Some(Peer::Oh(oh)) if report.eh == oh => self.on_oh_report(oh, &report),
                    Some(Peer::Oh(_)) => {}
                    _ if report.eh.role == Role::Eh => self.submit(now, conn, report, out),
                    _ => {}
                },
                Message::Ping { seq } => out.push(Output::Send {
                    conn,
                    msg: Message::Pong { seq },
                }),
                Message::Bye => {
                    out.push(Output::Close { conn });
                    self.handle(now, Input::Closed { conn }, out);
                }
                _ => {}
            },
            _ => {}
        }
    }
}
