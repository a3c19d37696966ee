//! Drives a host state machine over TCP. One thread owns the node; every
//! connection has a reader thread, connects run on their own threads and
//! timers live in a heap serviced by the node thread.

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, HashSet};
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use mcast_core::model::{DurationMs, NodeId};
use mcast_core::node::{ConnId, FailReason, Input, Node, NodeEvent, Output};
use mcast_core::wire::{encode, FrameDecoder};

/// Connect deadline when the node sets none, mirroring the usual OS limit.
const OS_CONNECT_CAP: Duration = Duration::from_secs(75);

enum Ev {
    Accepted(TcpStream),
    Connected {
        token: u64,
        stream: TcpStream,
        elapsed: Duration,
    },
    ConnectFailed {
        token: u64,
        reason: FailReason,
        elapsed: Duration,
    },
    Received {
        conn: ConnId,
        msg: mcast_core::wire::Message,
    },
    Closed(ConnId),
    Broadcast(Vec<u8>),
    Stop,
}

/// Handle to a running node.
pub struct NodeHandle {
    tx: Sender<Ev>,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
    pub local_addr: Option<SocketAddr>,
}

impl NodeHandle {
    /// Asks an end-host to broadcast `payload`.
    pub fn broadcast(&self, payload: Vec<u8>) {
        let _ = self.tx.send(Ev::Broadcast(payload));
    }

    /// Stops the node and closes its connections.
    pub fn shutdown(mut self) {
        self.stop_inner();
    }

    fn stop_inner(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        let _ = self.tx.send(Ev::Stop);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }

    /// Blocks until the node thread ends.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for NodeHandle {
    fn drop(&mut self) {
        if self.thread.is_some() {
            self.stop_inner();
        }
    }
}

fn ms(d: Duration) -> DurationMs {
    DurationMs::new(d.as_secs_f64() * 1000.0)
}

fn spawn_reader(conn: ConnId, mut stream: TcpStream, tx: Sender<Ev>) {
    thread::spawn(move || {
        let mut dec = FrameDecoder::new();
        let mut buf = vec![0u8; 64 * 1024];
        loop {
            match stream.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    dec.push(&buf[..n]);
                    loop {
                        match dec.next_message() {
                            Ok(Some(msg)) => {
                                if tx.send(Ev::Received { conn, msg }).is_err() {
                                    return;
                                }
                            }
                            Ok(None) => break,
                            Err(_) => {
                                let _ = tx.send(Ev::Closed(conn));
                                return;
                            }
                        }
                    }
                }
            }
        }
        let _ = tx.send(Ev::Closed(conn));
    });
}

fn spawn_acceptor(listener: TcpListener, tx: Sender<Ev>, stop: Arc<AtomicBool>) -> io::Result<()> {
    listener.set_nonblocking(true)?;
    thread::spawn(move || {
        while !stop.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((s, _)) => {
                    let _ = s.set_nonblocking(false);
                    let _ = s.set_nodelay(true);
                    if tx.send(Ev::Accepted(s)).is_err() {
                        return;
                    }
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(10)),
                Err(_) => thread::sleep(Duration::from_millis(10)),
            }
        }
    });
    Ok(())
}

struct Loop<N: Node> {
    node: N,
    start: Instant,
    tx: Sender<Ev>,
    addrs: HashMap<NodeId, SocketAddr>,
    conns: HashMap<ConnId, TcpStream>,
    closed_by_us: HashSet<ConnId>,
    next_conn: ConnId,
    timers: BinaryHeap<Reverse<(Instant, u64, u64)>>,
    timer_seq: u64,
    on_event: Box<dyn FnMut(&NodeEvent) + Send>,
}

impl<N: Node> Loop<N> {
    fn now(&self) -> DurationMs {
        ms(self.start.elapsed())
    }

    fn register(&mut self, stream: TcpStream) -> Option<ConnId> {
        let conn = self.next_conn;
        self.next_conn += 1;
        let reader = stream.try_clone().ok()?;
        self.conns.insert(conn, stream);
        spawn_reader(conn, reader, self.tx.clone());
        Some(conn)
    }

    fn apply(&mut self, out: Vec<Output>) {
        let mut queue = std::collections::VecDeque::from(out);
        while let Some(o) = queue.pop_front() {
            match o {
                Output::Connect { token, to, timeout } => {
                    let tx = self.tx.clone();
                    let Some(addr) = self.addrs.get(&to).copied() else {
                        let _ = tx.send(Ev::ConnectFailed {
                            token,
                            reason: FailReason::OsTimeout,
                            elapsed: Duration::ZERO,
                        });
                        continue;
                    };
                    let (limit, reason) = match timeout {
                        Some(t) => (Duration::from_secs_f64(t.ms() / 1000.0), FailReason::AppTimeout),
                        None => (OS_CONNECT_CAP, FailReason::OsTimeout),
                    };
                    thread::spawn(move || {
                        let started = Instant::now();
                        let ev = match TcpStream::connect_timeout(&addr, limit) {
                            Ok(stream) => {
                                let _ = stream.set_nodelay(true);
                                Ev::Connected {
                                    token,
                                    stream,
                                    elapsed: started.elapsed(),
                                }
                            }
                            Err(e) => Ev::ConnectFailed {
                                token,
                                reason: if e.kind() == io::ErrorKind::TimedOut {
                                    reason
                                } else {
                                    FailReason::OsTimeout
                                },
                                elapsed: started.elapsed(),
                            },
                        };
                        let _ = tx.send(ev);
                    });
                }
                Output::Send { conn, msg } => {
                    let Ok(bytes) = encode(&msg) else { continue };
                    let failed = match self.conns.get_mut(&conn) {
                        Some(s) => s.write_all(&bytes).is_err(),
                        None => false,
                    };
                    if failed {
                        // The reader reports the close.
                        if let Some(s) = self.conns.get(&conn) {
                            let _ = s.shutdown(Shutdown::Both);
                        }
                    }
                }
                Output::Close { conn } => {
                    if let Some(s) = self.conns.remove(&conn) {
                        let _ = s.shutdown(Shutdown::Both);
                        self.closed_by_us.insert(conn);
                    }
                }
                Output::SetTimer { after, token } => {
                    let at = Instant::now() + Duration::from_secs_f64(after.ms().max(0.0) / 1000.0);
                    self.timer_seq += 1;
                    self.timers.push(Reverse((at, self.timer_seq, token)));
                }
                Output::Event(e) => (self.on_event)(&e),
            }
        }
    }

    fn handle(&mut self, input: Input) {
        let mut out = Vec::new();
        let now = self.now();
        self.node.handle(now, input, &mut out);
        self.apply(out);
    }

    fn run(mut self, rx: mpsc::Receiver<Ev>) {
        let mut out = Vec::new();
        let now = self.now();
        self.node.start(now, &mut out);
        self.apply(out);
        loop {
            while let Some(Reverse((at, _, token))) = self.timers.peek().copied() {
                if at > Instant::now() {
                    break;
                }
                self.timers.pop();
                self.handle(Input::Timer { token });
            }
            let wait = self
                .timers
                .peek()
                .map(|Reverse((at, _, _))| at.saturating_duration_since(Instant::now()))
                .unwrap_or(Duration::from_millis(200));
            let ev = match rx.recv_timeout(wait) {
                Ok(ev) => ev,
                Err(RecvTimeoutError::Timeout) => continue,
                Err(RecvTimeoutError::Disconnected) => break,
            };
            match ev {
                Ev::Stop => break,
                Ev::Accepted(stream) => {
                    if let Some(conn) = self.register(stream) {
                        self.handle(Input::Accepted { conn });
                    }
                }
                Ev::Connected { token, stream, elapsed } => match self.register(stream) {
                    Some(conn) => self.handle(Input::Connected {
                        token,
                        conn,
                        elapsed: ms(elapsed),
                    }),
                    None => self.handle(Input::ConnectFailed {
                        token,
                        reason: FailReason::OsTimeout,
                        elapsed: ms(elapsed),
                    }),
                },
                Ev::ConnectFailed { token, reason, elapsed } => self.handle(Input::ConnectFailed {
                    token,
                    reason,
                    elapsed: ms(elapsed),
                }),
                Ev::Received { conn, msg } => {
                    if self.conns.contains_key(&conn) {
                        self.handle(Input::Received { conn, msg });
                    }
                }
                Ev::Closed(conn) => {
                    if self.closed_by_us.remove(&conn) {
                        continue;
                    }
                    if let Some(s) = self.conns.remove(&conn) {
                        let _ = s.shutdown(Shutdown::Both);
                        self.handle(Input::Closed { conn });
                    }
                }
                Ev::Broadcast(payload) => self.handle(Input::Broadcast { payload }),
            }
        }
        for (_, s) in self.conns.drain() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

/// Starts `node` on its own thread. `listener` accepts inbound connections;
/// `addrs` resolves the node ids it connects to; `on_event` sees every
/// milestone the node reports.
pub fn spawn_node<N: Node + Send + 'static>(
    node: N,
    listener: Option<TcpListener>,
    addrs: HashMap<NodeId, SocketAddr>,
    on_event: impl FnMut(&NodeEvent) + Send + 'static,
) -> io::Result<NodeHandle> {
    let (tx, rx) = mpsc::channel();
    let stop = Arc::new(AtomicBool::new(false));
    let local_addr = match &listener {
        Some(l) => Some(l.local_addr()?),
        None => None,
    };
    if let Some(l) = listener {
        spawn_acceptor(l, tx.clone(), stop.clone())?;
    }
    let lp = Loop {
        node,
        start: Instant::now(),
        tx: tx.clone(),
        addrs,
        conns: HashMap::new(),
        closed_by_us: HashSet::new(),
        next_conn: 1,
        timers: BinaryHeap::new(),
        timer_seq: 0,
        on_event: Box::new(on_event),
    };
    let thread = thread::spawn(move || lp.run(rx));
    Ok(NodeHandle {
        tx,
        stop,
        thread: Some(thread),
        local_addr,
    })
}

/// Samples this process's CPU share since the previous call, from
/// `/proc/self/stat`. Returns 0 where that file is unavailable.
pub fn cpu_load_probe() -> impl FnMut() -> f64 + Send + 'static {
    // Kernel clock ticks per second on every mainstream Linux build.
    const TICKS: f64 = 100.0;
    fn cpu_ticks() -> Option<f64> {
        let stat = std::fs::read_to_string("/proc/self/stat").ok()?;
        // Fields after the parenthesised command name; utime and stime are
        // the 14th and 15th fields overall.
        let rest = &stat[stat.rfind(')')? + 2..];
        let f: Vec<&str> = rest.split_whitespace().collect();
        Some(f.get(11)?.parse::<f64>().ok()? + f.get(12)?.parse::<f64>().ok()?)
    }
    let mut last = (Instant::now(), cpu_ticks());
    move || {
        let now = (Instant::now(), cpu_ticks());
        let load = match (last.1, now.1) {
            (Some(a), Some(b)) => {
                let wall = now.0.duration_since(last.0).as_secs_f64();
                if wall > 0.0 {
                    ((b - a) / TICKS / wall).clamp(0.0, 1.0)
                } else {
                    0.0
                }
            }
            _ => 0.0,
        };
        last = now;
        load
    }
}

/// One status line per milestone, as printed by the CLI.
pub fn status_line(e: &NodeEvent) -> String {
    match e {
        NodeEvent::GraphBuilt { gtime, kept, absent } => format!(
            "GRAPH gtime_ms={:.1} kept={} absent={}",
            gtime.ms(),
            kept.len(),
            absent.len()
        ),
        NodeEvent::PeerRestored { peer } => format!("PEER_RESTORED peer={peer}"),
        NodeEvent::PeerLost { peer } => format!("PEER_LOST peer={peer}"),
        NodeEvent::Measured(r) => format!(
            "MEASURED m_i_ms={:.1} ok={}/{}",
            r.m_i_ms.ms(),
            r.ok_count(),
            r.samples.len()
        ),
        NodeEvent::Streaming { oh } => format!("STREAMING oh={oh}"),
        NodeEvent::Rejected => "REJECTED".to_string(),
        NodeEvent::Delivered { origin, msg_id, payload } => format!(
            "RECV origin={origin} msg={msg_id} payload={}",
            String::from_utf8_lossy(payload)
        ),
        NodeEvent::Assigned {
            eh,
            oh,
            cost,
            decision_us,
            ..
        } => format!(
            "ASSIGNED eh={eh} oh={oh} cost_ms={:.3} decision_us={decision_us:.1}",
            cost.ms()
        ),
        NodeEvent::OhDead { oh, affected } => {
            let list: Vec<String> = affected.iter().map(|e| e.to_string()).collect();
            format!("OH_DEAD oh={oh} affected={}", list.join(","))
        }
        NodeEvent::OhAlive { oh } => format!("OH_ALIVE oh={oh}"),
    }
}
