use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, Write};
use std::net::{SocketAddr, TcpListener};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use mcast::experiments::{default_base, preset_profile, write_preset, PRESETS};
use mcast::real::{cpu_load_probe, spawn_node, status_line};
use mcast::smoke::run_smoke;
use mcast_core::endhost::{EndHost, EndHostConfig};
use mcast_core::model::{load_scenario, DurationMs, NodeId, Role, Strategy};
use mcast_core::monitor::{DistributionWeights, MonitorConfig, MonitorHost, ServiceModel};
use mcast_core::node::NodeEvent;
use mcast_core::overlay::{OverlayConfig, OverlayHost};

#[derive(Parser)]
#[command(name = "mcast", version, about = "Complete-graph multicast overlay: nodes and experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the monitor host.
    Mh {
        #[arg(long)]
        listen: SocketAddr,
        /// Load penalty in ms per unit of reported load.
        #[arg(long, default_value_t = 0.0)]
        w_load: f64,
        #[arg(long, default_value_t = 5000)]
        load_interval_ms: u64,
        /// Append assignments as `eh_id,oh_id,cost_ms,decision_us`.
        #[arg(long)]
        assign_log: Option<PathBuf>,
    },
    /// Run an overlay host.
    Oh {
        #[arg(long)]
        id: u32,
        #[arg(long)]
        listen: SocketAddr,
        #[arg(long)]
        monitor: Option<SocketAddr>,
        /// Other OHs as `id=addr`, comma separated.
        #[arg(long, default_value = "")]
        peers: String,
        #[arg(long, default_value_t = 5000)]
        load_interval_ms: u64,
        /// Report this fixed load instead of sampling CPU usage.
        #[arg(long)]
        load: Option<f64>,
    },
    /// Run an end-host; reads `send <text>` lines from stdin.
    Eh {
        #[arg(long)]
        id: u32,
        #[arg(long)]
        monitor: SocketAddr,
        /// OHs to measure as `id=addr`, comma separated.
        #[arg(long)]
        ohs: String,
        #[arg(long, default_value = "baseline:5")]
        strategy: Strategy,
    },
    /// Regenerate a figure's CSV data in simulation.
    Fig {
        #[arg(long)]
        preset: String,
        #[arg(long)]
        scenario: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Loopback end-to-end check with real processes.
    Smoke {
        #[arg(long, default_value_t = 47100)]
        base_port: u16,
    },
}

fn parse_addrs(list: &str, role: Role) -> Result<HashMap<NodeId, SocketAddr>> {
    let mut out = HashMap::new();
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (id, addr) = item
            .split_once('=')
            .with_context(|| format!("`{item}` is not id=addr"))?;
        let node = match id.parse::<u32>() {
            Ok(n) => NodeId::new(role, n),
            Err(_) => id.parse::<NodeId>().map_err(|_| anyhow::anyhow!("bad node id `{id}`"))?,
        };
        out.insert(node, addr.parse().with_context(|| format!("bad address `{addr}`"))?);
    }
    Ok(out)
}

fn print_status(e: &NodeEvent) {
    let mut out = io::stdout().lock();
    let _ = writeln!(out, "{}", status_line(e));
    let _ = out.flush();
}

fn bind(addr: SocketAddr) -> Result<TcpListener> {
    let l = TcpListener::bind(addr).with_context(|| format!("binding {addr}"))?;
    println!("LISTENING {}", l.local_addr()?);
    io::stdout().flush()?;
    Ok(l)
}

fn interval(ms: u64) -> DurationMs {
    DurationMs::new(ms.max(1) as f64)
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.cmd {
        Cmd::Mh {
            listen,
            w_load,
            load_interval_ms,
            assign_log,
        } => {
            if w_load < 0.0 {
                bail!("--w-load must be non-negative");
            }
            let mut cfg = MonitorConfig::new(NodeId::mh(0));
            cfg.weights = DistributionWeights { w_load };
            cfg.load_interval = interval(load_interval_ms);
            cfg.service = ServiceModel::Measured;
            let mut log = match assign_log {
                Some(p) => {
                    let fresh = !p.exists();
                    let mut f = OpenOptions::new().create(true).append(true).open(&p)?;
                    if fresh {
                        writeln!(f, "eh_id,oh_id,cost_ms,decision_us")?;
                    }
                    Some(f)
                }
                None => None,
            };
            let listener = bind(listen)?;
            let h = spawn_node(MonitorHost::new(cfg), Some(listener), HashMap::new(), move |e| {
                if let (Some(f), NodeEvent::Assigned { eh, oh, cost, decision_us, .. }) = (log.as_mut(), e) {
                    let _ = writeln!(f, "{eh},{oh},{:.3},{decision_us:.3}", cost.ms());
                }
                print_status(e);
            })?;
            h.join();
        }
        Cmd::Oh {
            id,
            listen,
            monitor,
            peers,
            load_interval_ms,
            load,
        } => {
            let mut addrs = parse_addrs(&peers, Role::Oh)?;
            let me = NodeId::oh(id);
            addrs.remove(&me);
            let mut ids: Vec<NodeId> = addrs.keys().copied().collect();
            ids.sort();
            if let Some(m) = monitor {
                addrs.insert(NodeId::mh(0), m);
            }
            let mut cfg = OverlayConfig::new(me, ids, monitor.map(|_| NodeId::mh(0)));
            cfg.load_interval = interval(load_interval_ms);
            let host = match load {
                Some(l) => {
                    if !(0.0..=1.0).contains(&l) {
                        bail!("--load must be within [0, 1]");
                    }
                    cfg.load = l;
                    OverlayHost::new(cfg)
                }
                None => OverlayHost::new(cfg).with_load_probe(cpu_load_probe()),
            };
            let listener = bind(listen)?;
            spawn_node(host, Some(listener), addrs, print_status)?.join();
        }
        Cmd::Eh {
            id,
            monitor,
            ohs,
            strategy,
        } => {
            strategy.validate().map_err(anyhow::Error::msg)?;
            if strategy.group_count().is_some() {
                bail!("partitioned strategies need the full end-host list; use the simulator");
            }
            let mut addrs = parse_addrs(&ohs, Role::Oh)?;
            if addrs.is_empty() {
                bail!("--ohs is empty");
            }
            let mut ids: Vec<NodeId> = addrs.keys().copied().collect();
            ids.sort();
            addrs.insert(NodeId::mh(0), monitor);
            let cfg = EndHostConfig::new(NodeId::eh(id), Some(NodeId::mh(0)), ids, strategy);
            let h = spawn_node(EndHost::new(cfg), None, addrs, print_status)?;
            for line in io::stdin().lock().lines() {
                let line = line?;
                let line = line.trim();
                if let Some(text) = line.strip_prefix("send ") {
                    h.broadcast(text.as_bytes().to_vec());
                } else if line == "quit" {
                    h.shutdown();
                    return Ok(ExitCode::SUCCESS);
                }
            }
            h.join();
        }
        Cmd::Fig {
            preset,
            scenario,
            seed,
            out,
        } => {
            if !PRESETS.contains(&preset.as_str()) {
                bail!("unknown preset `{preset}` (expected one of {})", PRESETS.join(", "));
            }
            let base = match scenario {
                Some(p) => {
                    let text = fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    load_scenario(&text).with_context(|| format!("parsing {}", p.display()))?
                }
                None => default_base(preset_profile(&preset)),
            };
            for path in write_preset(&preset, &base, seed, &out)? {
                println!("wrote {}", path.display());
            }
        }
        Cmd::Smoke { base_port } => {
            let exe = std::env::current_exe()?;
            let report = run_smoke(exe, base_port);
            for (name, ok) in &report.checks {
                println!("{} {name}", if *ok { "PASS" } else { "FAIL" });
            }
            if !report.passed() {
                for (name, lines) in &report.logs {
                    eprintln!("--- {name}");
                    for l in lines {
                        eprintln!("{l}");
                    }
                }
                return Ok(ExitCode::FAILURE);
            }
            println!("SMOKE OK");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
