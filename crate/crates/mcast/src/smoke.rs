//! Loopback end-to-end check: one monitor, three overlay hosts and five
//! end-hosts as separate processes of this binary.

use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use anyhow::{anyhow, bail, Context, Result};

const N_OH: u16 = 3;
const N_EH: u16 = 5;
const BUDGET: Duration = Duration::from_secs(30);

struct Proc {
    name: String,
    child: Child,
    stdin: Option<ChildStdin>,
    lines: Arc<Mutex<Vec<String>>>,
}

impl Proc {
    fn spawn(exe: &PathBuf, name: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(exe)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .with_context(|| format!("starting {name}"))?;
        let stdout = child.stdout.take().expect("piped stdout");
        let lines = Arc::new(Mutex::new(Vec::new()));
        let sink = lines.clone();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines().map_while(Result::ok) {
                sink.lock().unwrap().push(line);
            }
        });
        Ok(Self {
            name: name.to_string(),
            stdin: child.stdin.take(),
            child,
            lines,
        })
    }

    fn lines(&self) -> Vec<String> {
        self.lines.lock().unwrap().clone()
    }

    fn count(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.lines.lock().unwrap().iter().filter(|l| pred(l)).count()
    }

    fn send(&mut self, cmd: &str) -> Result<()> {
        let stdin = self.stdin.as_mut().ok_or_else(|| anyhow!("{} has no stdin", self.name))?;
        writeln!(stdin, "{cmd}")?;
        stdin.flush()?;
        Ok(())
    }

    fn kill(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

impl Drop for Proc {
    fn drop(&mut self) {
        self.kill();
    }
}

fn wait_until(deadline: Instant, mut cond: impl FnMut() -> bool) -> bool {
    loop {
        if cond() {
            return true;
        }
        if Instant::now() >= deadline {
            return false;
        }
        thread::sleep(Duration::from_millis(20));
    }
}

/// Outcome of a smoke run: one line per check, in order.
#[derive(Debug, Default)]
pub struct SmokeReport {
    pub checks: Vec<(String, bool)>,
    pub logs: Vec<(String, Vec<String>)>,
}

impl SmokeReport {
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.1)
    }
}

struct Run {
    exe: PathBuf,
    base: u16,
    deadline: Instant,
    report: SmokeReport,
}

impl Run {
    fn addr(&self, offset: u16) -> String {
        format!("127.0.0.1:{}", self.base + offset)
    }

    fn check(&mut self, name: &str, ok: bool) -> Result<()> {
        self.report.checks.push((name.to_string(), ok));
        if ok {
            Ok(())
        } else {
            bail!("check failed: {name}")
        }
    }

    fn spawn_oh(&self, i: u16) -> Result<Proc> {
        let peers: Vec<String> = (0..N_OH)
            .filter(|&j| j != i)
            .map(|j| format!("{j}={}", self.addr(1 + j)))
            .collect();
        let args = vec![
            "oh".into(),
            "--id".into(),
            i.to_string(),
            "--listen".into(),
            self.addr(1 + i),
            "--monitor".into(),
            self.addr(0),
            "--peers".into(),
            peers.join(","),
            "--load-interval-ms".into(),
            "500".into(),
        ];
        Proc::spawn(&self.exe, &format!("oh{i}"), &args)
    }
}

fn streaming_oh(p: &Proc) -> Option<String> {
    p.lines()
        .iter()
        .rev()
        .find_map(|l| l.strip_prefix("STREAMING oh=").map(str::to_string))
}

fn recv_count(p: &Proc, msg: u64) -> usize {
    let tag = format!("RECV origin=eh0 msg={msg} ");
    p.count(|l| l.starts_with(&tag))
}

/// Runs the smoke scenario with ports `base_port ..= base_port + 3`.
pub fn run_smoke(exe: PathBuf, base_port: u16) -> SmokeReport {
    let mut run = Run {
        exe,
        base: base_port,
        deadline: Instant::now() + BUDGET,
        report: SmokeReport::default(),
    };
    let mut procs: Vec<Proc> = Vec::new();
    let result = scenario(&mut run, &mut procs);
    if let Err(e) = result {
        run.report.logs.push(("error".into(), vec![e.to_string()]));
    }
    for p in &procs {
        run.report.logs.push((p.name.clone(), p.lines()));
    }
    run.report
}

fn scenario(run: &mut Run, procs: &mut Vec<Proc>) -> Result<()> {
    let started = Instant::now();
    let mh = Proc::spawn(
        &run.exe,
        "mh",
        &["mh".into(), "--listen".into(), run.addr(0), "--load-interval-ms".into(), "500".into()],
    )?;
    procs.push(mh);
    let ok = wait_until(run.deadline, || procs[0].count(|l| l.starts_with("LISTENING")) > 0);
    run.check("monitor listening", ok)?;

    for i in 0..N_OH {
        let p = run.spawn_oh(i)?;
        procs.push(p);
    }
    let ohs = 1..1 + N_OH as usize;
    let ok = wait_until(run.deadline, || {
        procs[ohs.clone()].iter().all(|p| p.count(|l| l.starts_with("GRAPH")) > 0)
    });
    run.check("every OH built its graph", ok)?;
    let kept: usize = procs[ohs.clone()]
        .iter()
        .map(|p| p.count(|l| l.starts_with("GRAPH") && l.contains(" kept=2 ")))
        .sum();
    run.check("graph has 3 connections", kept == N_OH as usize)?;

    let oh_list: Vec<String> = (0..N_OH).map(|j| format!("{j}={}", run.addr(1 + j))).collect();
    for j in 0..N_EH {
        let args = vec![
            "eh".into(),
            "--id".into(),
            j.to_string(),
            "--monitor".into(),
            run.addr(0),
            "--ohs".into(),
            oh_list.join(","),
            "--strategy".into(),
            "apptimeout:2000".into(),
        ];
        let p = Proc::spawn(&run.exe, &format!("eh{j}"), &args)?;
        procs.push(p);
    }
    let ehs = 1 + N_OH as usize..procs.len();
    let ok = wait_until(run.deadline, || procs[ehs.clone()].iter().all(|p| streaming_oh(p).is_some()));
    run.check("every EH assigned and streaming", ok)?;
    // Give the last Hello frames time to land before sending.
    thread::sleep(Duration::from_millis(300));

    procs[ehs.start].send("send smoke-1")?;
    let others = ehs.start + 1..ehs.end;
    let ok = wait_until(run.deadline, || procs[others.clone()].iter().all(|p| recv_count(p, 0) >= 1));
    thread::sleep(Duration::from_millis(300));
    let exact = procs[others.clone()].iter().all(|p| recv_count(p, 0) == 1) && recv_count(&procs[ehs.start], 0) == 0;
    run.check("broadcast reaches the other 4 EHs exactly once", ok && exact)?;

    // Kill the OH serving the most end-hosts.
    let before: Vec<String> = procs[ehs.clone()].iter().map(|p| streaming_oh(p).unwrap()).collect();
    let victim = (0..N_OH)
        .map(|i| format!("oh{i}"))
        .max_by_key(|o| before.iter().filter(|b| *b == o).count())
        .unwrap();
    let victim_idx = 1 + victim[2..].parse::<usize>()?;
    let streaming_lines: Vec<usize> = procs[ehs.clone()]
        .iter()
        .map(|p| p.count(|l| l.starts_with("STREAMING")))
        .collect();
    procs[victim_idx].kill();
    let ok = wait_until(run.deadline, || {
        procs[0].count(|l| l.starts_with(&format!("OH_DEAD oh={victim} "))) > 0
    });
    run.check("monitor notices the killed OH", ok)?;
    let ok = wait_until(run.deadline, || {
        procs[ehs.clone()].iter().zip(&before).all(|(p, b)| {
            let now = streaming_oh(p);
            if b == &victim {
                now.is_some_and(|o| o != victim)
            } else {
                true
            }
        })
    });
    run.check("EHs of the killed OH are reassigned", ok)?;
    let untouched = procs[ehs.clone()]
        .iter()
        .zip(&before)
        .zip(&streaming_lines)
        .filter(|((_, b), _)| **b != victim)
        .all(|((p, b), &n)| streaming_oh(p).as_ref() == Some(b) && p.count(|l| l.starts_with("STREAMING")) == n);
    run.check("other EHs keep their OH", untouched)?;

    // Rejoin: bring the OH back on its old address.
    let alive_before = procs[0].count(|l| l == format!("OH_ALIVE oh={victim}"));
    let revived = run.spawn_oh((victim_idx - 1) as u16)?;
    procs[victim_idx] = revived;
    let ok = wait_until(run.deadline, || {
        procs[0].count(|l| l == format!("OH_ALIVE oh={victim}")) > alive_before
            && procs[victim_idx].count(|l| l.starts_with("GRAPH")) > 0
    });
    run.check("restarted OH rejoins the overlay", ok)?;

    thread::sleep(Duration::from_millis(300));
    procs[ehs.start].send("send smoke-2")?;
    let ok = wait_until(run.deadline, || procs[others.clone()].iter().all(|p| recv_count(p, 1) >= 1));
    thread::sleep(Duration::from_millis(300));
    let exact = procs[others.clone()].iter().all(|p| recv_count(p, 1) == 1);
    run.check("broadcast after the failure reaches every EH exactly once", ok && exact)?;

    run.check("finished within 30 s", started.elapsed() < BUDGET)?;
    Ok(())
}
