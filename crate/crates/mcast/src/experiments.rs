//! Seeded simulation sweeps that regenerate the figure data as CSV.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use sha2::{Digest, Sha256};

use mcast_core::cluster::{build, Cluster, HostConfig, Topology};
use mcast_core::endhost::{EndHostConfig, EndHostMode, LatencySample, MeasurementReport};
use mcast_core::model::{
    derive_rng, eh_preset, oh_preset, DurationMs, LinkProfile, NodeId, ScenarioSpec, Strategy,
};
use mcast_core::monitor::{MonitorConfig, MonitorHost};
use mcast_core::node::{Input, Output};
use mcast_core::overlay::OverlayConfig;

pub const FIG2_OH_COUNTS: [u32; 5] = [3, 10, 20, 30, 40];
pub const FIG3_OH_COUNTS: [u32; 5] = [3, 10, 20, 30, 40];
pub const FIG3_EH_COUNTS: [u32; 6] = [10, 50, 100, 200, 500, 1000];
pub const FIG6_BURSTS: [u32; 7] = [1, 10, 50, 100, 200, 500, 1000];
pub const FIG8_OH_COUNTS: [u32; 5] = [3, 10, 20, 30, 40];

pub fn fig7_strategies() -> Vec<Strategy> {
    ["baseline:5", "noreconnect", "apptimeout:10000", "partition:5+apptimeout:10000"]
        .iter()
        .map(|s| s.parse().expect("valid strategy"))
        .collect()
}

pub fn fig8_variants() -> Vec<Strategy> {
    vec![Strategy::NoReconnect, Strategy::app_timeout(10_000.0)]
}

/// One CSV output. Every row is suffixed with the seed and the hash of the
/// scenario it was computed from.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
    pub seed: u64,
    pub scenario_hash: String,
}

impl Table {
    fn new(name: &str, header: &[&str], seed: u64, spec: &ScenarioSpec) -> Self {
        Self {
            name: name.to_string(),
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
            seed,
            scenario_hash: scenario_hash(spec),
        }
    }

    fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = self.header.clone();
        header.extend(["seed".to_string(), "scenario_hash".to_string()]);
        w.write_record(&header).expect("in-memory write");
        for r in &self.rows {
            let mut row = r.clone();
            row.extend([self.seed.to_string(), self.scenario_hash.clone()]);
            w.write_record(&row).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }

    /// Values of one column, parsed as numbers.
    pub fn numbers(&self, column: &str) -> Vec<f64> {
        let i = self.header.iter().position(|h| h == column).expect("known column");
        self.rows.iter().map(|r| r[i].parse().expect("numeric cell")).collect()
    }

    pub fn column(&self, column: &str) -> Vec<&str> {
        let i = self.header.iter().position(|h| h == column).expect("known column");
        self.rows.iter().map(|r| r[i].as_str()).collect()
    }
}

pub fn scenario_hash(spec: &ScenarioSpec) -> String {
    hex::encode(Sha256::digest(spec.serialize().as_bytes()))
}

/// Parses a CSV written by [`Table::to_csv`] and checks that every row was
/// produced from the scenario with hash `expected`.
pub fn check_hash(csv_text: &str, expected: &str) -> Result<()> {
    let mut r = csv::Reader::from_reader(csv_text.as_bytes());
    let idx = r
        .headers()?
        .iter()
        .position(|h| h == "scenario_hash")
        .context("no scenario_hash column")?;
    for (n, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.get(idx) != Some(expected) {
            bail!("row {} was produced from a different scenario", n + 1);
        }
    }
    Ok(())
}

fn ms(x: f64) -> String {
    format!("{x:.3}")
}

/// `base` with its node sets replaced by the preset deployments of the given
/// sizes (zero means none).
pub fn sized(base: &ScenarioSpec, n_oh: u32, n_eh: u32) -> Result<ScenarioSpec> {
    let ohs = if n_oh == 0 {
        Vec::new()
    } else {
        oh_preset(n_oh).with_context(|| format!("no OH preset for {n_oh}"))?
    };
    let ehs = if n_eh == 0 {
        Vec::new()
    } else {
        eh_preset(n_eh).with_context(|| format!("no EH preset for {n_eh}"))?
    };
    Ok(base.with_nodes(ohs, ehs)?)
}

/// Default base scenario for a preset: the full deployment on the named
/// link profile.
pub fn default_base(profile: LinkProfile) -> ScenarioSpec {
    ScenarioSpec::from_presets(40, 1000, profile).expect("presets are consistent")
}

/// Runs only the measurement phase: every end-host probes its OHs once
/// under `strategy`. OHs merely answer probes.
pub fn measure(spec: &ScenarioSpec, strategy: &Strategy, seed: u64) -> Vec<MeasurementReport> {
    let mut c = Cluster::new(spec, seed);
    let ohs = spec.oh_ids();
    let ehs = spec.eh_ids();
    for &oh in &ohs {
        c.add(HostConfig::Overlay(OverlayConfig::new(oh, Vec::new(), None)));
    }
    for &eh in &ehs {
        let cfg = EndHostConfig::new(eh, None, ohs.clone(), strategy.clone())
            .partitioned(&ehs)
            .mode(EndHostMode::MeasureOnly);
        c.add(HostConfig::End(cfg));
    }
    c.start();
    c.run_until_idle();
    c.reports()
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn avg_mi(reports: &[MeasurementReport]) -> f64 {
    mean(reports.iter().map(|r| r.m_i_ms.ms()))
}

pub fn max_mi(reports: &[MeasurementReport]) -> f64 {
    reports.iter().map(|r| r.m_i_ms.ms()).fold(0.0, f64::max)
}

/// Share of probes that ended Ok, in percent.
pub fn pct_measured(reports: &[MeasurementReport]) -> f64 {
    let total: usize = reports.iter().map(|r| r.samples.len()).sum();
    let ok: usize = reports.iter().map(|r| r.ok_count()).sum();
    if total == 0 {
        100.0
    } else {
        ok as f64 * 100.0 / total as f64
    }
}

/// Graph construction time per OH count.
pub fn run_fig2(base: &ScenarioSpec, seed: u64, oh_counts: &[u32]) -> Result<Table> {
    let mut t = Table::new("fig2", &["n_oh", "construction_ms"], seed, base);
    for &n in oh_counts {
        let spec = sized(base, n, 0)?;
        let mut c = build(&spec, seed, Topology::OVERLAY_ONLY);
        c.run_until_idle();
        let stats = c.graph_stats();
        t.push(vec![n.to_string(), ms(stats.construction_time_ms.ms())]);
    }
    Ok(t)
}

/// Average and maximum measurement time per (OH count, EH count), using the
/// base scenario's strategy.
pub fn run_fig3_5(base: &ScenarioSpec, seed: u64, oh_counts: &[u32], eh_counts: &[u32]) -> Result<Table> {
    let mut t = Table::new("fig3_5", &["n_oh", "n_eh", "avg_mi_ms", "max_mi_ms"], seed, base);
    for &n_oh in oh_counts {
        for &n_eh in eh_counts {
            let spec = sized(base, n_oh, n_eh)?;
            let reports = measure(&spec, &spec.strategy, seed);
            t.push(vec![
                n_oh.to_string(),
                n_eh.to_string(),
                ms(avg_mi(&reports)),
                ms(max_mi(&reports)),
            ]);
        }
    }
    Ok(t)
}

/// Average measurement time per strategy at 40 OH / 1000 EH, plus the
/// improvement ratio of each strategy over the first one.
pub fn run_fig7(base: &ScenarioSpec, seed: u64, strategies: &[Strategy]) -> Result<(Table, Table)> {
    let spec = sized(base, 40, 1000)?;
    let mut t = Table::new("fig7", &["strategy", "avg_mi_ms"], seed, base);
    let mut r = Table::new("fig7_ratios", &["strategy", "ratio_vs_baseline"], seed, base);
    let mut first = None;
    for s in strategies {
        s.validate().map_err(anyhow::Error::msg)?;
        let avg = avg_mi(&measure(&spec, s, seed));
        let reference = *first.get_or_insert(avg);
        t.push(vec![s.to_string(), ms(avg)]);
        r.push(vec![s.to_string(), format!("{:.3}", reference / avg)]);
    }
    Ok((t, r))
}

/// Percentage of probes measured per OH count and timeout variant, at 1000 EH.
pub fn run_fig8(base: &ScenarioSpec, seed: u64, oh_counts: &[u32], variants: &[Strategy]) -> Result<Table> {
    let mut t = Table::new("fig8", &["n_oh", "variant", "pct_measured"], seed, base);
    for &n in oh_counts {
        let spec = sized(base, n, 1000)?;
        for v in variants {
            let pct = pct_measured(&measure(&spec, v, seed));
            t.push(vec![n.to_string(), v.to_string(), format!("{pct:.3}")]);
        }
    }
    Ok(t)
}

/// Synthetic Ok report for `eh`: one sample per OH with round trips around
/// twice the one-way link latency.
fn synthetic_report(spec: &ScenarioSpec, seed: u64, eh: NodeId) -> MeasurementReport {
    let mut rng = derive_rng(seed, eh, "fig6");
    let from = &spec.node(eh).expect("known end-host").region;
    let samples = spec
        .oh_nodes
        .iter()
        .map(|oh| {
            let link = spec.link(from, &oh.region).expect("covered link");
            let rtt = |r: &mut mcast_core::model::RngStream| {
                DurationMs::new(2.0 * link.base_latency_ms.ms() * r.uniform(0.9, 1.1))
            };
            let lats = [rtt(&mut rng), rtt(&mut rng), rtt(&mut rng)];
            LatencySample::ok(oh.id, link.connect_fast_ms, lats)
        })
        .collect();
    MeasurementReport::new(eh, samples).expect("non-empty")
}

/// Monitor with all OHs of `spec` registered and the OH latency matrix set
/// from the link model.
pub fn loaded_monitor(spec: &ScenarioSpec, cfg: MonitorConfig) -> MonitorHost {
    let mut mh = MonitorHost::new(cfg);
    let st = mh.state_mut();
    for oh in &spec.oh_nodes {
        st.register_oh(oh.id, oh.load.reported_load);
    }
    for (i, a) in spec.oh_nodes.iter().enumerate() {
        for b in &spec.oh_nodes[i + 1..] {
            let l = spec.link(&a.region, &b.region).expect("covered link").base_latency_ms * 2.0;
            st.set_latency(a.id, b.id, Some(l));
        }
    }
    mh
}

/// Average monitor response time when `burst` requests arrive at once.
pub fn run_fig6(base: &ScenarioSpec, seed: u64, bursts: &[u32]) -> Result<Table> {
    let mut t = Table::new("fig6", &["burst_size", "avg_response_ms"], seed, base);
    for &b in bursts {
        let spec = sized(base, 40, b)?;
        let mut mh = loaded_monitor(&spec, MonitorConfig::new(spec.mh_node.id));
        let mut out = Vec::new();
        let mut now = DurationMs::ZERO;
        for (i, eh) in spec.eh_ids().into_iter().enumerate() {
            mh.submit(now, i as u64, synthetic_report(&spec, seed, eh), &mut out);
        }
        loop {
            let timer = out.iter().find_map(|o| match o {
                Output::SetTimer { after, token } => Some((*after, *token)),
                _ => None,
            });
            out.clear();
            let Some((after, token)) = timer else { break };
            now += after;
            mcast_core::node::Node::handle(&mut mh, now, Input::Timer { token }, &mut out);
        }
        let avg = mean(mh.log().iter().map(|r| r.response.ms()));
        t.push(vec![b.to_string(), ms(avg)]);
    }
    Ok(t)
}

pub const PRESETS: [&str; 6] = ["fig2", "fig3", "fig5", "fig6", "fig7", "fig8"];

/// Link profile a preset uses when no scenario file is given.
pub fn preset_profile(preset: &str) -> LinkProfile {
    match preset {
        "fig6" => LinkProfile::Fast,
        _ => LinkProfile::HeavyTail,
    }
}

/// Runs a named preset and returns its tables.
pub fn run_preset(preset: &str, base: &ScenarioSpec, seed: u64) -> Result<Vec<Table>> {
    Ok(match preset {
        "fig2" => vec![run_fig2(base, seed, &FIG2_OH_COUNTS)?],
        // Figs. 3 and 5 come from the same runs.
        "fig3" | "fig5" => {
            let mut t = run_fig3_5(base, seed, &FIG3_OH_COUNTS, &FIG3_EH_COUNTS)?;
            t.name = preset.to_string();
            vec![t]
        }
        "fig6" => vec![run_fig6(base, seed, &FIG6_BURSTS)?],
        "fig7" => {
            let (a, b) = run_fig7(base, seed, &fig7_strategies())?;
            vec![a, b]
        }
        "fig8" => vec![run_fig8(base, seed, &FIG8_OH_COUNTS, &fig8_variants())?],
        other => bail!("unknown preset `{other}` (expected one of {})", PRESETS.join(", ")),
    })
}

/// Runs a preset and writes `<name>.csv` files into `out_dir`.
pub fn write_preset(preset: &str, base: &ScenarioSpec, seed: u64, out_dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let mut written = Vec::new();
    for t in run_preset(preset, base, seed)? {
        let path = out_dir.join(format!("{}.csv", t.name));
        fs::write(&path, t.to_csv()).with_context(|| format!("writing {}", path.display()))?;
        written.push(path);
    }
    Ok(written)
}
