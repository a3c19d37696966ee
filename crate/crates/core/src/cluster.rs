//! Runs host state machines on the simulated network.

use std::collections::{BTreeMap, VecDeque};

use crate::endhost::{EndHost, EndHostConfig, MeasurementReport};
use crate::model::{DurationMs, FailureEvent, NodeId, ScenarioSpec};
use crate::monitor::{MonitorConfig, MonitorHost};
use crate::node::{Input, Node, NodeEvent, Output};
use crate::overlay::{GraphStats, OverlayConfig, OverlayHost};
use crate::simnet::{ConnResult, NetEvent, SimNet};
use crate::wire;

#[derive(Clone, Debug)]
pub enum HostConfig {
    Overlay(OverlayConfig),
    End(EndHostConfig),
    Monitor(MonitorConfig),
}

impl HostConfig {
    pub fn id(&self) -> NodeId {
        match self {
            HostConfig::Overlay(c) => c.id,
            HostConfig::End(c) => c.id,
            HostConfig::Monitor(c) => c.id,
        }
    }

    fn build(&self) -> Host {
        match self {
            HostConfig::Overlay(c) => Host::Overlay(OverlayHost::new(c.clone())),
            HostConfig::End(c) => Host::End(EndHost::new(c.clone())),
            HostConfig::Monitor(c) => Host::Monitor(MonitorHost::new(c.clone())),
        }
    }
}

pub enum Host {
    Overlay(OverlayHost),
    End(EndHost),
    Monitor(MonitorHost),
}

impl Host {
    fn node(&mut self) -> &mut dyn Node {
        match self {
            Host::Overlay(h) => h,
            Host::End(h) => h,
            Host::Monitor(h) => h,
        }
    }
}

/// An event raised by a host, stamped with virtual time.
#[derive(Clone, Debug, PartialEq)]
pub struct Observed {
    pub at: DurationMs,
    pub node: NodeId,
    pub event: NodeEvent,
}

/// A set of hosts driven by one simulator instance.
pub struct Cluster {
    net: SimNet,
    configs: BTreeMap<NodeId, HostConfig>,
    hosts: BTreeMap<NodeId, Host>,
    events: Vec<Observed>,
    decode_errors: u64,
    pending: VecDeque<(NodeId, Input)>,
}

impl Cluster {
    pub fn new(spec: &ScenarioSpec, seed: u64) -> Self {
        Self {
            net: SimNet::new(spec, seed),
            configs: BTreeMap::new(),
            hosts: BTreeMap::new(),
            events: Vec::new(),
            decode_errors: 0,
            pending: VecDeque::new(),
        }
    }

    /// Adds a host; it starts on the next call to [`Cluster::start`].
    pub fn add(&mut self, cfg: HostConfig) {
        let id = cfg.id();
        self.configs.insert(id, cfg);
    }

    /// Starts every added host that is not running yet, in id order.
    pub fn start(&mut self) {
        let ids: Vec<NodeId> = self
            .configs
            .keys()
            .filter(|id| !self.hosts.contains_key(id))
            .copied()
            .collect();
        for id in ids {
            self.boot(id);
        }
        self.drain();
    }

    fn boot(&mut self, id: NodeId) {
        let mut host = self.configs[&id].build();
        let mut out = Vec::new();
        host.node().start(self.net.now(), &mut out);
        self.hosts.insert(id, host);
        self.apply(id, out);
    }

    pub fn net(&self) -> &SimNet {
        &self.net
    }

    pub fn net_mut(&mut self) -> &mut SimNet {
        &mut self.net
    }

    pub fn now(&self) -> DurationMs {
        self.net.now()
    }

    pub fn host(&self, id: NodeId) -> Option<&Host> {
        self.hosts.get(&id)
    }

    pub fn overlay(&self, id: NodeId) -> Option<&OverlayHost> {
        match self.hosts.get(&id) {
            Some(Host::Overlay(h)) => Some(h),
            _ => None,
        }
    }

    pub fn end_host(&self, id: NodeId) -> Option<&EndHost> {
        match self.hosts.get(&id) {
            Some(Host::End(h)) => Some(h),
            _ => None,
        }
    }

    pub fn monitor(&self, id: NodeId) -> Option<&MonitorHost> {
        match self.hosts.get(&id) {
            Some(Host::Monitor(h)) => Some(h),
            _ => None,
        }
    }

    pub fn overlays(&self) -> impl Iterator<Item = &OverlayHost> {
        self.hosts.values().filter_map(|h| match h {
            Host::Overlay(h) => Some(h),
            _ => None,
        })
    }

    pub fn end_hosts(&self) -> impl Iterator<Item = &EndHost> {
        self.hosts.values().filter_map(|h| match h {
            Host::End(h) => Some(h),
            _ => None,
        })
    }

    pub fn events(&self) -> &[Observed] {
        &self.events
    }

    /// Frames that failed to decode (always zero unless something is broken).
    pub fn decode_errors(&self) -> u64 {
        self.decode_errors
    }

    /// Construction statistics over every OH that finished its graph.
    pub fn graph_stats(&self) -> GraphStats {
        GraphStats::from_gtimes(self.overlays().filter_map(|h| h.gtime().map(|g| (h.config().id, g))).collect())
    }

    /// The latest measurement of every end-host that completed one.
    pub fn reports(&self) -> Vec<MeasurementReport> {
        self.end_hosts()
            .filter_map(|h| h.reports().last().cloned())
            .collect()
    }

    /// Makes end-host `eh` broadcast `payload` now.
    pub fn broadcast(&mut self, eh: NodeId, payload: Vec<u8>) {
        self.pending.push_back((eh, Input::Broadcast { payload }));
        self.drain();
    }

    /// Applies a failure now.
    pub fn inject(&mut self, event: FailureEvent) {
        if self.net.inject_failure(event).is_ok() {
            self.after_failure(event);
        }
    }

    fn after_failure(&mut self, event: FailureEvent) {
        match event {
            FailureEvent::NodeDown(n) => {
                self.hosts.remove(&n);
            }
            FailureEvent::NodeUp(n) if !self.hosts.contains_key(&n) && self.configs.contains_key(&n) => {
                self.boot(n);
                self.drain();
            }
            _ => {}
        }
    }

    /// Processes one network event. Returns `false` when the queue is empty.
    pub fn step(&mut self) -> bool {
        let Some(d) = self.net.next_event() else {
            return false;
        };
        let (node, input) = match d.event {
            NetEvent::ConnectDone {
                node,
                token,
                started,
                result,
                ..
            } => (
                node,
                match result {
                    ConnResult::Ok(c) => Input::Connected {
                        token,
                        conn: c.conn_id,
                        elapsed: d.at - started,
                    },
                    ConnResult::Failed { reason, elapsed } => Input::ConnectFailed { token, reason, elapsed },
                },
            ),
            NetEvent::Accepted { node, conn } => (node, Input::Accepted { conn: conn.conn_id }),
            NetEvent::Deliver { node, conn, payload, .. } => match wire::decode(&payload) {
                Ok(Some((msg, []))) => (node, Input::Received { conn, msg }),
                _ => {
                    self.decode_errors += 1;
                    return true;
                }
            },
            NetEvent::Closed { node, conn } => (node, Input::Closed { conn }),
            NetEvent::Timer { node, token } => (node, Input::Timer { token }),
            NetEvent::Failure(f) => {
                self.after_failure(f);
                return true;
            }
        };
        self.pending.push_back((node, input));
        self.drain();
        true
    }

    /// Runs until no events remain.
    pub fn run_until_idle(&mut self) -> DurationMs {
        while self.step() {}
        self.now()
    }

    /// Runs every event scheduled at or before `deadline`.
    pub fn run_until(&mut self, deadline: DurationMs) {
        while self.net.peek_time().is_some_and(|t| t <= deadline) {
            self.step();
        }
    }

    /// Runs until `done` holds (checked after every event) or `deadline`
    /// passes. Returns whether `done` held.
    pub fn run_while(&mut self, deadline: DurationMs, mut done: impl FnMut(&Cluster) -> bool) -> bool {
        loop {
            if done(self) {
                return true;
            }
            if !self.net.peek_time().is_some_and(|t| t <= deadline) {
                return false;
            }
            self.step();
        }
    }

    fn drain(&mut self) {
        while let Some((node, input)) = self.pending.pop_front() {
            let Some(host) = self.hosts.get_mut(&node) else { continue };
            let mut out = Vec::new();
            host.node().handle(self.net.now(), input, &mut out);
            self.apply(node, out);
        }
    }

    fn apply(&mut self, node: NodeId, out: Vec<Output>) {
        for o in out {
            match o {
                Output::Connect { token, to, timeout } => {
                    if self.net.connect(node, to, timeout, token).is_err() {
                        self.pending.push_back((
                            node,
                            Input::ConnectFailed {
                                token,
                                reason: crate::node::FailReason::OsTimeout,
                                elapsed: DurationMs::ZERO,
                            },
                        ));
                    }
                }
                Output::Send { conn, msg } => {
                    if let Ok(bytes) = wire::encode(&msg) {
                        let _ = self.net.send(node, conn, bytes);
                    }
                }
                Output::Close { conn } => {
                    let _ = self.net.close(node, conn);
                }
                Output::SetTimer { after, token } => {
                    let _ = self.net.set_timer(node, after, token);
                }
                Output::Event(event) => self.events.push(Observed {
                    at: self.net.now(),
                    node,
                    event,
                }),
            }
        }
    }
}

/// Which hosts of a scenario to instantiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Topology {
    pub monitor: bool,
    /// End-host behaviour, or `None` to leave end-hosts out.
    pub end_hosts: Option<crate::endhost::EndHostMode>,
}

impl Topology {
    pub const FULL: Topology = Topology {
        monitor: true,
        end_hosts: Some(crate::endhost::EndHostMode::Join),
    };
    pub const OVERLAY_ONLY: Topology = Topology {
        monitor: false,
        end_hosts: None,
    };
    pub const MEASURE_ONLY: Topology = Topology {
        monitor: false,
        end_hosts: Some(crate::endhost::EndHostMode::MeasureOnly),
    };
}

/// Builds and starts a cluster for `spec`: OHs form a full mesh, end-hosts
/// use the scenario strategy (narrowed to their sub-group when partitioned).
pub fn build(spec: &ScenarioSpec, seed: u64, topo: Topology) -> Cluster {
    let mut c = Cluster::new(spec, seed);
    let ohs = spec.oh_ids();
    let ehs = spec.eh_ids();
    let mh = topo.monitor.then_some(spec.mh_node.id);
    if let Some(id) = mh {
        c.add(HostConfig::Monitor(MonitorConfig::new(id)));
    }
    for n in &spec.oh_nodes {
        let mut cfg = OverlayConfig::new(n.id, ohs.clone(), mh);
        cfg.load = n.load.reported_load;
        c.add(HostConfig::Overlay(cfg));
    }
    if let Some(mode) = topo.end_hosts {
        for &eh in &ehs {
            let cfg = EndHostConfig::new(eh, mh, ohs.clone(), spec.strategy.clone())
                .partitioned(&ehs)
                .mode(mode);
            c.add(HostConfig::End(cfg));
        }
    }
    c.start();
    c
}
