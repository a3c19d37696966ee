//! Scenario files: a line-oriented, sectioned text format describing nodes,
//! the region link matrix, OS connect parameters, the measurement strategy
//! and a failure schedule.
//!
//! ```text
//! # comment
//! preset=table1-40oh
//! preset=table2-1000eh
//! preset=heavy-tail
//! [mh] region=Romania
//! [oh] region=Germany count=2 load=0.8
//! [eh] region=US count=10 load=0
//! [link] from=* to=Korea base_ms=90 jitter_ms=9 fast_ms=290 slow_p=1 slow_ms=25000 syn_loss_p=0 drop_p=0
//! [net] syn_retx_ms=3000,6000,12000,24000,48000 os_cap_ms=75000
//! [run] strategy=apptimeout:10000 seed=42
//! [failure] at_ms=5000 kind=node_down target=oh3
//! [failure] at_ms=9000 kind=link_down target=oh1 peer=oh2
//! ```
//!
//! Nodes are numbered per role in order of appearance. Link lines are
//! directional, `*` matches every region, and later lines override earlier
//! ones. After all lines are applied every ordered pair of regions in use must
//! have a link model.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use super::preset::{eh_preset, link_profile, oh_preset, LinkProfile};
use super::{DurationMs, LinkModel, LoadClass, NodeId, Role, Strategy};

#[derive(Clone, Debug, PartialEq)]
pub struct NodeSpec {
    pub id: NodeId,
    pub region: String,
    pub load: LoadClass,
}

/// Operating-system connect behaviour.
#[derive(Clone, Debug, PartialEq)]
pub struct NetParams {
    /// SYN retransmission instants, measured from the initial SYN.
    pub syn_retx: Vec<DurationMs>,
    /// The OS abandons a connect attempt at this age.
    pub os_cap: DurationMs,
}

impl Default for NetParams {
    fn default() -> Self {
        Self {
            syn_retx: [3_000.0, 6_000.0, 12_000.0, 24_000.0, 48_000.0]
                .into_iter()
                .map(DurationMs::new)
                .collect(),
            os_cap: DurationMs::new(75_000.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FailureEvent {
    NodeDown(NodeId),
    NodeUp(NodeId),
    /// Drops traffic and new connects from `from` to `to`, and closes every
    /// connection between the two.
    LinkDown { from: NodeId, to: NodeId },
    LinkUp { from: NodeId, to: NodeId },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScheduledFailure {
    pub at: DurationMs,
    pub event: FailureEvent,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioSpec {
    pub oh_nodes: Vec<NodeSpec>,
    pub eh_nodes: Vec<NodeSpec>,
    pub mh_node: NodeSpec,
    /// Directed `(from_region, to_region)` link models.
    pub links: BTreeMap<(String, String), LinkModel>,
    pub net: NetParams,
    pub strategy: Strategy,
    pub failures: Vec<ScheduledFailure>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ScenarioError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: unknown region `{region}`")]
    UnknownRegion { line: usize, region: String },
    #[error("line {line}: {field}={value} is outside [0, 1]")]
    ProbabilityOutOfRange {
        line: usize,
        field: &'static str,
        value: f64,
    },
    #[error("line {line}: unknown preset `{name}`")]
    UnknownPreset { line: usize, name: String },
    #[error("line {line}: unknown node `{node}`")]
    UnknownNode { line: usize, node: String },
    #[error("no link model for {from} -> {to}")]
    MissingLink { from: String, to: String },
    #[error("{0}")]
    Invalid(String),
}

const DEFAULT_MH_REGION: &str = "Romania";

/// Parses a scenario file into a fully resolved [`ScenarioSpec`].
pub fn load_scenario(text: &str) -> Result<ScenarioSpec, ScenarioError> {
    let items = tokenize(text)?;
    let mut b = Builder::default();
    for item in &items {
        b.collect_nodes(item)?;
    }
    let regions = b.regions();
    for item in &items {
        b.apply_rest(item, &regions)?;
    }
    b.finish(regions)
}

enum Item<'a> {
    Preset(&'a str),
    Section(&'a str, Fields<'a>),
}

struct Line<'a> {
    no: usize,
    item: Item<'a>,
}

struct Fields<'a> {
    line: usize,
    pairs: Vec<(&'a str, &'a str)>,
}

impl<'a> Fields<'a> {
    fn err(&self, message: impl Into<String>) -> ScenarioError {
        ScenarioError::Parse {
            line: self.line,
            message: message.into(),
        }
    }

    fn get(&self, key: &str) -> Option<&'a str> {
        self.pairs.iter().find(|(k, _)| *k == key).map(|(_, v)| *v)
    }

    fn req(&self, key: &str) -> Result<&'a str, ScenarioError> {
        self.get(key)
            .ok_or_else(|| self.err(format!("missing `{key}`")))
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T, ScenarioError> {
        let v = self.req(key)?;
        v.parse()
            .map_err(|_| self.err(format!("`{key}` has invalid value `{v}`")))
    }

    fn duration(&self, key: &str) -> Result<DurationMs, ScenarioError> {
        let v: f64 = self.num(key)?;
        DurationMs::try_new(v).ok_or_else(|| self.err(format!("`{key}` must be >= 0")))
    }

    fn probability(&self, key: &'static str) -> Result<f64, ScenarioError> {
        let v: f64 = self.num(key)?;
        if (0.0..=1.0).contains(&v) {
            Ok(v)
        } else {
            Err(ScenarioError::ProbabilityOutOfRange {
                line: self.line,
                field: key,
                value: v,
            })
        }
    }

    fn only(&self, allowed: &[&str]) -> Result<(), ScenarioError> {
        match self.pairs.iter().find(|(k, _)| !allowed.contains(k)) {
            Some((k, _)) => Err(self.err(format!("unknown key `{k}`"))),
            None => Ok(()),
        }
    }
}

fn tokenize(text: &str) -> Result<Vec<Line<'_>>, ScenarioError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let no = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let item = if let Some(rest) = line.strip_prefix('[') {
            let (name, body) = rest.split_once(']').ok_or_else(|| ScenarioError::Parse {
                line: no,
                message: "unterminated section header".into(),
            })?;
            let mut pairs = Vec::new();
            for tok in body.split_whitespace() {
                let (k, v) = tok.split_once('=').ok_or_else(|| ScenarioError::Parse {
                    line: no,
                    message: format!("expected key=value, got `{tok}`"),
                })?;
                pairs.push((k, v));
            }
            Item::Section(name.trim(), Fields { line: no, pairs })
        } else if let Some(name) = line.strip_prefix("preset=") {
            Item::Preset(name.trim())
        } else {
            return Err(ScenarioError::Parse {
                line: no,
                message: format!("unrecognised line `{line}`"),
            });
        };
        out.push(Line { no, item });
    }
    Ok(out)
}

#[derive(Default)]
struct Builder {
    ohs: Vec<NodeSpec>,
    ehs: Vec<NodeSpec>,
    mh: Option<NodeSpec>,
    links: BTreeMap<(String, String), LinkModel>,
    net: NetParams,
    strategy: Strategy,
    failures: Vec<ScheduledFailure>,
    seed: u64,
}

fn parse_preset_size(name: &str, prefix: &str, suffix: &str) -> Option<u32> {
    name.strip_prefix(prefix)?.strip_suffix(suffix)?.parse().ok()
}

impl Builder {
    fn push_nodes(&mut self, role: Role, nodes: impl IntoIterator<Item = (String, LoadClass)>) {
        let list = match role {
            Role::Oh => &mut self.ohs,
            Role::Eh => &mut self.ehs,
            Role::Mh => unreachable!("single monitor"),
        };
        for (region, load) in nodes {
            let id = NodeId::new(role, list.len() as u32);
            list.push(NodeSpec { id, region, load });
        }
    }

    fn collect_nodes(&mut self, line: &Line<'_>) -> Result<(), ScenarioError> {
        match &line.item {
            Item::Preset(name) => {
                if let Some(n) = parse_preset_size(name, "table1-", "oh") {
                    let nodes = oh_preset(n).ok_or_else(|| ScenarioError::UnknownPreset {
                        line: line.no,
                        name: name.to_string(),
                    })?;
                    self.push_nodes(Role::Oh, nodes);
                } else if let Some(n) = parse_preset_size(name, "table2-", "eh") {
                    let nodes = eh_preset(n).ok_or_else(|| ScenarioError::UnknownPreset {
                        line: line.no,
                        name: name.to_string(),
                    })?;
                    self.push_nodes(Role::Eh, nodes);
                } else if LinkProfile::from_name(name).is_none() {
                    return Err(ScenarioError::UnknownPreset {
                        line: line.no,
                        name: name.to_string(),
                    });
                }
            }
            Item::Section(sec @ ("oh" | "eh"), f) => {
                f.only(&["region", "count", "load"])?;
                let region = f.req("region")?;
                check_region_name(region, f)?;
                let count: u32 = match f.get("count") {
                    Some(_) => f.num("count")?,
                    None => 1,
                };
                let load: f64 = match f.get("load") {
                    Some(_) => f.num("load")?,
                    None => 0.0,
                };
                if !(load >= 0.0 && load.is_finite()) {
                    return Err(f.err("`load` must be >= 0"));
                }
                let role = if *sec == "oh" { Role::Oh } else { Role::Eh };
                let lc = LoadClass::from_factor(load);
                self.push_nodes(role, (0..count).map(|_| (region.to_string(), lc)));
            }
            Item::Section("mh", f) => {
                f.only(&["region", "load"])?;
                if self.mh.is_some() {
                    return Err(f.err("exactly one [mh] line is allowed"));
                }
                let region = f.req("region")?;
                check_region_name(region, f)?;
                let load: f64 = match f.get("load") {
                    Some(_) => f.num("load")?,
                    None => 0.0,
                };
                if !(load >= 0.0 && load.is_finite()) {
                    return Err(f.err("`load` must be >= 0"));
                }
                self.mh = Some(NodeSpec {
                    id: NodeId::mh(0),
                    region: region.to_string(),
                    load: LoadClass::from_factor(load),
                });
            }
            Item::Section("link" | "net" | "run" | "failure", _) => {}
            Item::Section(other, f) => return Err(f.err(format!("unknown section [{other}]"))),
        }
        Ok(())
    }

    fn regions(&mut self) -> BTreeSet<String> {
        let mh = self.mh.get_or_insert_with(|| NodeSpec {
            id: NodeId::mh(0),
            region: DEFAULT_MH_REGION.to_string(),
            load: LoadClass::IDLE,
        });
        std::iter::once(&*mh)
            .chain(&self.ohs)
            .chain(&self.ehs)
            .map(|n| n.region.clone())
            .collect()
    }

    fn node_exists(&self, id: NodeId) -> bool {
        match id.role {
            Role::Oh => (id.id as usize) < self.ohs.len(),
            Role::Eh => (id.id as usize) < self.ehs.len(),
            Role::Mh => id.id == 0,
        }
    }

    fn apply_rest(&mut self, line: &Line<'_>, regions: &BTreeSet<String>) -> Result<(), ScenarioError> {
        match &line.item {
            Item::Preset(name) => {
                if let Some(profile) = LinkProfile::from_name(name) {
                    for from in regions {
                        for to in regions {
                            let model = link_profile(profile, from, to).ok_or_else(|| {
                                ScenarioError::UnknownRegion {
                                    line: line.no,
                                    region: if link_profile(profile, from, from).is_none() {
                                        from.clone()
                                    } else {
                                        to.clone()
                                    },
                                }
                            })?;
                            self.links.insert((from.clone(), to.clone()), model);
                        }
                    }
                }
            }
            Item::Section("link", f) => {
                f.only(&[
                    "from", "to", "base_ms", "jitter_ms", "fast_ms", "slow_p", "slow_ms",
                    "syn_loss_p", "drop_p",
                ])?;
                let model = LinkModel {
                    base_latency_ms: f.duration("base_ms")?,
                    jitter_ms: f.duration("jitter_ms")?,
                    connect_fast_ms: f.duration("fast_ms")?,
                    slow_connect_probability: f.probability("slow_p")?,
                    slow_connect_ms: f.duration("slow_ms")?,
                    syn_loss_probability: f.probability("syn_loss_p")?,
                    drop_probability: f.probability("drop_p")?,
                };
                let select = |key: &str| -> Result<Vec<String>, ScenarioError> {
                    let r = f.req(key)?;
                    if r == "*" {
                        Ok(regions.iter().cloned().collect())
                    } else if regions.contains(r) {
                        Ok(vec![r.to_string()])
                    } else {
                        Err(ScenarioError::UnknownRegion {
                            line: line.no,
                            region: r.to_string(),
                        })
                    }
                };
                for from in select("from")? {
                    for to in select("to")? {
                        self.links.insert((from.clone(), to), model.clone());
                    }
                }
            }
            Item::Section("net", f) => {
                f.only(&["syn_retx_ms", "os_cap_ms"])?;
                if let Some(list) = f.get("syn_retx_ms") {
                    let mut retx = Vec::new();
                    for v in list.split(',').filter(|s| !s.is_empty()) {
                        let ms: f64 = v
                            .parse()
                            .map_err(|_| f.err(format!("bad retransmit time `{v}`")))?;
                        retx.push(
                            DurationMs::try_new(ms)
                                .ok_or_else(|| f.err("retransmit times must be >= 0"))?,
                        );
                    }
                    if retx.windows(2).any(|w| w[0] >= w[1]) {
                        return Err(f.err("retransmit times must increase"));
                    }
                    self.net.syn_retx = retx;
                }
                if f.get("os_cap_ms").is_some() {
                    self.net.os_cap = f.duration("os_cap_ms")?;
                }
            }
            Item::Section("run", f) => {
                f.only(&["strategy", "seed"])?;
                if let Some(s) = f.get("strategy") {
                    self.strategy = s.parse().map_err(|e| f.err(format!("{e}")))?;
                }
                if f.get("seed").is_some() {
                    self.seed = f.num("seed")?;
                }
            }
            Item::Section("failure", f) => {
                f.only(&["at_ms", "kind", "target", "peer"])?;
                let at = f.duration("at_ms")?;
                let node = |key: &str| -> Result<NodeId, ScenarioError> {
                    let raw = f.req(key)?;
                    let id: NodeId = raw.parse().map_err(|e| f.err(format!("{e}")))?;
                    if self.node_exists(id) {
                        Ok(id)
                    } else {
                        Err(ScenarioError::UnknownNode {
                            line: line.no,
                            node: raw.to_string(),
                        })
                    }
                };
                let kind = f.req("kind")?;
                let event = match kind {
                    "node_down" | "node_up" => {
                        if f.get("peer").is_some() {
                            return Err(f.err("`peer` only applies to link events"));
                        }
                        let t = node("target")?;
                        if kind == "node_down" {
                            FailureEvent::NodeDown(t)
                        } else {
                            FailureEvent::NodeUp(t)
                        }
                    }
                    "link_down" | "link_up" => {
                        let (from, to) = (node("target")?, node("peer")?);
                        if from == to {
                            return Err(f.err("link endpoints must differ"));
                        }
                        if kind == "link_down" {
                            FailureEvent::LinkDown { from, to }
                        } else {
                            FailureEvent::LinkUp { from, to }
                        }
                    }
                    other => return Err(f.err(format!("unknown failure kind `{other}`"))),
                };
                self.failures.push(ScheduledFailure { at, event });
            }
            Item::Section(..) => {}
        }
        Ok(())
    }

    fn finish(self, regions: BTreeSet<String>) -> Result<ScenarioSpec, ScenarioError> {
        let spec = ScenarioSpec {
            oh_nodes: self.ohs,
            eh_nodes: self.ehs,
            mh_node: self.mh.expect("monitor resolved in regions()"),
            links: self.links,
            net: self.net,
            strategy: self.strategy,
            failures: self.failures,
            seed: self.seed,
        };
        spec.check_links(&regions)?;
        Ok(spec)
    }
}

fn check_region_name(region: &str, f: &Fields<'_>) -> Result<(), ScenarioError> {
    if region.is_empty() || region == "*" || region.contains(['=', '#', '[', ']']) {
        Err(f.err(format!("invalid region name `{region}`")))
    } else {
        Ok(())
    }
}

impl ScenarioSpec {
    /// Preset node sets plus a named link profile.
    pub fn from_presets(n_oh: u32, n_eh: u32, profile: LinkProfile) -> Result<Self, ScenarioError> {
        let mut text = format!("preset={}\n", profile.name());
        if n_oh > 0 {
            writeln!(text, "preset=table1-{n_oh}oh").unwrap();
        }
        if n_eh > 0 {
            writeln!(text, "preset=table2-{n_eh}eh").unwrap();
        }
        load_scenario(&text)
    }

    /// Every region any node lives in.
    pub fn regions(&self) -> BTreeSet<String> {
        self.all_nodes().map(|n| n.region.clone()).collect()
    }

    pub fn all_nodes(&self) -> impl Iterator<Item = &NodeSpec> {
        std::iter::once(&self.mh_node)
            .chain(&self.oh_nodes)
            .chain(&self.eh_nodes)
    }

    pub fn node(&self, id: NodeId) -> Option<&NodeSpec> {
        match id.role {
            Role::Oh => self.oh_nodes.get(id.id as usize),
            Role::Eh => self.eh_nodes.get(id.id as usize),
            Role::Mh => (id.id == 0).then_some(&self.mh_node),
        }
    }

    pub fn oh_ids(&self) -> Vec<NodeId> {
        self.oh_nodes.iter().map(|n| n.id).collect()
    }

    pub fn eh_ids(&self) -> Vec<NodeId> {
        self.eh_nodes.iter().map(|n| n.id).collect()
    }

    pub fn link(&self, from_region: &str, to_region: &str) -> Option<&LinkModel> {
        self.links
            .get(&(from_region.to_string(), to_region.to_string()))
    }

    fn check_links(&self, regions: &BTreeSet<String>) -> Result<(), ScenarioError> {
        for from in regions {
            for to in regions {
                let Some(model) = self.link(from, to) else {
                    return Err(ScenarioError::MissingLink {
                        from: from.clone(),
                        to: to.clone(),
                    });
                };
                if let Some((field, value)) = model.invalid_probability() {
                    return Err(ScenarioError::Invalid(format!(
                        "{from} -> {to}: {field}={value} is outside [0, 1]"
                    )));
                }
                if from != to && model.base_latency_ms.ms() <= 0.0 {
                    return Err(ScenarioError::Invalid(format!(
                        "{from} -> {to}: base latency must be positive"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Replaces the node sets, keeping only the link entries the new regions
    /// need. Fails if the existing matrix does not cover them. Failures that
    /// reference removed nodes are dropped.
    pub fn with_nodes(
        &self,
        ohs: Vec<(String, LoadClass)>,
        ehs: Vec<(String, LoadClass)>,
    ) -> Result<Self, ScenarioError> {
        let mk = |role: Role, nodes: Vec<(String, LoadClass)>| -> Vec<NodeSpec> {
            nodes
                .into_iter()
                .enumerate()
                .map(|(i, (region, load))| NodeSpec {
                    id: NodeId::new(role, i as u32),
                    region,
                    load,
                })
                .collect()
        };
        let mut out = ScenarioSpec {
            oh_nodes: mk(Role::Oh, ohs),
            eh_nodes: mk(Role::Eh, ehs),
            mh_node: self.mh_node.clone(),
            links: BTreeMap::new(),
            net: self.net.clone(),
            strategy: self.strategy.clone(),
            failures: Vec::new(),
            seed: self.seed,
        };
        let regions = out.regions();
        for from in &regions {
            for to in &regions {
                let model = self.link(from, to).ok_or_else(|| ScenarioError::MissingLink {
                    from: from.clone(),
                    to: to.clone(),
                })?;
                out.links.insert((from.clone(), to.clone()), model.clone());
            }
        }
        out.failures = self
            .failures
            .iter()
            .filter(|f| match f.event {
                FailureEvent::NodeDown(n) | FailureEvent::NodeUp(n) => out.node(n).is_some(),
                FailureEvent::LinkDown { from, to } | FailureEvent::LinkUp { from, to } => {
                    out.node(from).is_some() && out.node(to).is_some()
                }
            })
            .copied()
            .collect();
        out.check_links(&regions)?;
        Ok(out)
    }

    /// Canonical, fully expanded scenario text; parses back to an equal spec.
    pub fn serialize(&self) -> String {
        let mut s = String::new();
        writeln!(
            s,
            "[mh] region={} load={}",
            self.mh_node.region, self.mh_node.load.load_factor
        )
        .unwrap();
        for (tag, nodes) in [("oh", &self.oh_nodes), ("eh", &self.eh_nodes)] {
            let mut i = 0;
            while i < nodes.len() {
                let n = &nodes[i];
                let run = nodes[i..]
                    .iter()
                    .take_while(|m| m.region == n.region && m.load == n.load)
                    .count();
                writeln!(
                    s,
                    "[{tag}] region={} count={run} load={}",
                    n.region, n.load.load_factor
                )
                .unwrap();
                i += run;
            }
        }
        for ((from, to), m) in &self.links {
            writeln!(
                s,
                "[link] from={from} to={to} base_ms={} jitter_ms={} fast_ms={} slow_p={} slow_ms={} syn_loss_p={} drop_p={}",
                m.base_latency_ms,
                m.jitter_ms,
                m.connect_fast_ms,
                m.slow_connect_probability,
                m.slow_connect_ms,
                m.syn_loss_probability,
                m.drop_probability
            )
            .unwrap();
        }
        let retx: Vec<String> = self.net.syn_retx.iter().map(|d| d.to_string()).collect();
        writeln!(
            s,
            "[net] syn_retx_ms={} os_cap_ms={}",
            retx.join(","),
            self.net.os_cap
        )
        .unwrap();
        writeln!(s, "[run] strategy={} seed={}", self.strategy, self.seed).unwrap();
        for f in &self.failures {
            let (kind, target, peer) = match f.event {
                FailureEvent::NodeDown(n) => ("node_down", n, None),
                FailureEvent::NodeUp(n) => ("node_up", n, None),
                FailureEvent::LinkDown { from, to } => ("link_down", from, Some(to)),
                FailureEvent::LinkUp { from, to } => ("link_up", from, Some(to)),
            };
            write!(s, "[failure] at_ms={} kind={kind} target={target}", f.at).unwrap();
            if let Some(p) = peer {
                write!(s, " peer={p}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn named_presets_expand_to_table_counts() {
        let spec = load_scenario("preset=table1-40oh\npreset=table2-1000eh\npreset=fast-links\n")
            .unwrap();
        assert_eq!(spec.oh_nodes.len(), 40);
        assert_eq!(spec.eh_nodes.len(), 1000);
        let count = |nodes: &[NodeSpec], r: &str| nodes.iter().filter(|n| n.region == r).count();
        assert_eq!(count(&spec.oh_nodes, "Germany"), 9);
        assert_eq!(count(&spec.oh_nodes, "US"), 5);
        assert_eq!(count(&spec.eh_nodes, "US"), 240);
        assert_eq!(count(&spec.eh_nodes, "Germany"), 160);
        let oh_countries: BTreeSet<_> = spec.oh_nodes.iter().map(|n| &n.region).collect();
        assert_eq!(oh_countries.len(), 14);
        assert_eq!(spec.mh_node.region, "Romania");
    }

    #[test]
    fn zero_end_hosts_is_valid() {
        let text = "[oh] region=A count=3\n[link] from=* to=* base_ms=10 jitter_ms=0 fast_ms=30 slow_p=0 slow_ms=0 syn_loss_p=0 drop_p=0\n[mh] region=A\n";
        let spec = load_scenario(text).unwrap();
        assert_eq!(spec.oh_nodes.len(), 3);
        assert!(spec.eh_nodes.is_empty());
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = load_scenario("preset=fast-links\n\n[oh] region=US count=x\n").unwrap_err();
        assert!(matches!(err, ScenarioError::Parse { line: 3, .. }), "{err}");
        let err = load_scenario("garbage\n").unwrap_err();
        assert!(matches!(err, ScenarioError::Parse { line: 1, .. }));
    }

    #[test]
    fn unknown_region_in_link_is_rejected() {
        let text = "[mh] region=A\n[oh] region=A\n[link] from=A to=Mars base_ms=1 jitter_ms=0 fast_ms=1 slow_p=0 slow_ms=0 syn_loss_p=0 drop_p=0\n";
        let err = load_scenario(text).unwrap_err();
        assert_eq!(
            err,
            ScenarioError::UnknownRegion {
                line: 3,
                region: "Mars".into()
            }
        );
        // Link profiles do not know made-up regions either.
        let err = load_scenario("[mh] region=Atlantis\npreset=fast-links\n").unwrap_err();
        assert!(matches!(err, ScenarioError::UnknownRegion { line: 2, .. }));
    }

    #[test]
    fn out_of_range_probability_is_rejected() {
        let text = "[mh] region=A\n[link] from=* to=* base_ms=1 jitter_ms=0 fast_ms=1 slow_p=1.5 slow_ms=0 syn_loss_p=0 drop_p=0\n";
        let err = load_scenario(text).unwrap_err();
        assert_eq!(
            err,
            ScenarioError::ProbabilityOutOfRange {
                line: 2,
                field: "slow_p",
                value: 1.5
            }
        );
    }

    #[test]
    fn missing_link_pair_is_reported() {
        let text = "[mh] region=A\n[oh] region=B\n[link] from=A to=* base_ms=1 jitter_ms=0 fast_ms=1 slow_p=0 slow_ms=0 syn_loss_p=0 drop_p=0\n";
        let err = load_scenario(text).unwrap_err();
        assert_eq!(
            err,
            ScenarioError::MissingLink {
                from: "B".into(),
                to: "A".into()
            }
        );
    }

    #[test]
    fn later_link_lines_override() {
        let text = "preset=table1-3oh\npreset=heavy-tail\n[link] from=* to=US base_ms=7 jitter_ms=0 fast_ms=9 slow_p=0 slow_ms=0 syn_loss_p=0 drop_p=0\n";
        let spec = load_scenario(text).unwrap();
        assert_eq!(spec.link("Germany", "US").unwrap().base_latency_ms.ms(), 7.0);
        assert_eq!(spec.link("US", "Germany").unwrap().base_latency_ms.ms(), 55.0);
    }

    #[test]
    fn failures_and_run_section() {
        let text = "preset=table1-3oh\npreset=fast-links\n[run] strategy=partition:3+noreconnect seed=99\n[failure] at_ms=100 kind=node_down target=oh2\n[failure] at_ms=200 kind=link_down target=oh0 peer=oh1\n";
        let spec = load_scenario(text).unwrap();
        assert_eq!(spec.seed, 99);
        assert_eq!(spec.strategy.group_count(), Some(3));
        assert_eq!(spec.failures.len(), 2);
        assert_eq!(spec.failures[0].event, FailureEvent::NodeDown(NodeId::oh(2)));
        let err = load_scenario(
            "preset=table1-3oh\npreset=fast-links\n[failure] at_ms=1 kind=node_down target=oh9\n",
        )
        .unwrap_err();
        assert!(matches!(err, ScenarioError::UnknownNode { line: 3, .. }));
    }

    #[test]
    fn serialized_form_parses_to_equal_spec() {
        let text = "preset=table1-10oh\npreset=table2-50eh\npreset=heavy-tail\n[eh] region=US count=2 load=0.25\n[net] syn_retx_ms=1000,2500 os_cap_ms=9000\n[run] strategy=apptimeout:10000 seed=5\n[failure] at_ms=12.5 kind=link_up target=oh1 peer=oh0\n";
        let spec = load_scenario(text).unwrap();
        let again = load_scenario(&spec.serialize()).unwrap();
        assert_eq!(again, spec);
    }

    #[test]
    fn with_nodes_restricts_link_matrix() {
        let full = ScenarioSpec::from_presets(40, 1000, LinkProfile::HeavyTail).unwrap();
        let small = full
            .with_nodes(oh_preset(3).unwrap(), eh_preset(10).unwrap())
            .unwrap();
        assert_eq!(small.oh_nodes.len(), 3);
        let regions = small.regions();
        assert_eq!(small.links.len(), regions.len() * regions.len());
    }
}
