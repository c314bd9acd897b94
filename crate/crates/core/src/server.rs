//! TCP guidance server.
//!
//! One coordinator thread owns the simulator and tracker. It drains the
//! command queue, generates a frame, tracks it, and broadcasts the state
//! line to every client. Each client has a reader thread that parses
//! commands and a writer thread that drains a bounded outbound queue. When
//! the queue is full the oldest line is dropped, so a slow client never
//! stalls the coordinator and never sees states out of order.

use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crate::error::Result;
use crate::geometry::Point3Mm;
use crate::pipeline::{ObservationFrame, Tracker};
use crate::protocol::{parse_command, to_line, ErrorRecord, StateRecord, SteerCommand};
use crate::simulator::Simulator;

pub const DEFAULT_CLIENT_QUEUE: usize = 64;
const POLL: Duration = Duration::from_millis(2);

#[derive(Debug, Clone)]
pub struct ServerConfig {
    /// Sleep to the scenario frame rate; otherwise run as fast as possible.
    pub realtime: bool,
    /// Stop after this many frames even if the scenario is endless.
    pub max_frames: Option<u64>,
    /// Hold the first frame until a client connects.
    pub wait_for_client: bool,
    pub client_queue: usize,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self { realtime: true, max_frames: None, wait_for_client: false, client_queue: DEFAULT_CLIENT_QUEUE }
    }
}

struct Client {
    queue: Mutex<VecDeque<String>>,
    ready: Condvar,
    closed: AtomicBool,
    dropped: AtomicU64,
    capacity: usize,
}

impl Client {
    fn push(&self, line: String) {
        let mut q = self.queue.lock().expect("client queue poisoned");
        if q.len() >= self.capacity {
            q.pop_front();
            self.dropped.fetch_add(1, Ordering::Relaxed);
        }
        q.push_back(line);
        self.ready.notify_one();
    }

    fn close(&self) {
        self.closed.store(true, Ordering::SeqCst);
        self.ready.notify_all();
    }
}

struct Shared {
    clients: Mutex<Vec<Arc<Client>>>,
    joined: Condvar,
    stop: AtomicBool,
    finished: AtomicBool,
}

type CommandMsg = (Arc<Client>, SteerCommand);

/// Handle to a running server.
pub struct ServerHandle {
    local_addr: SocketAddr,
    shared: Arc<Shared>,
    coordinator: Option<JoinHandle<u64>>,
    acceptor: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// Asks the coordinator to stop after the current frame.
    pub fn stop(&self) {
        self.shared.stop.store(true, Ordering::SeqCst);
        self.shared.joined.notify_all();
    }

    /// Waits for the run to end; returns the number of frames served.
    /// Client writers flush their queues before their sockets close.
    pub fn join(mut self) -> u64 {
        let frames = self.coordinator.take().map_or(0, |h| h.join().unwrap_or(0));
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
        frames
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.coordinator.is_some() {
            self.stop();
        }
    }
}

/// Binds `addr` and starts serving `simulator`'s frames.
pub fn serve(simulator: Simulator, addr: impl ToSocketAddrs, config: ServerConfig) -> Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    listener.set_nonblocking(true)?;
    let local_addr = listener.local_addr()?;
    let shared = Arc::new(Shared {
        clients: Mutex::new(Vec::new()),
        joined: Condvar::new(),
        stop: AtomicBool::new(false),
        finished: AtomicBool::new(false),
    });
    let (tx, rx) = mpsc::channel::<CommandMsg>();

    let acceptor = {
        let shared = Arc::clone(&shared);
        let capacity = config.client_queue.max(1);
        thread::spawn(move || accept_loop(listener, shared, tx, capacity))
    };
    let coordinator = {
        let shared = Arc::clone(&shared);
        thread::spawn(move || coordinate(simulator, config, shared, rx))
    };
    Ok(ServerHandle { local_addr, shared, coordinator: Some(coordinator), acceptor: Some(acceptor) })
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>, tx: Sender<CommandMsg>, capacity: usize) {
    while !shared.finished.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                if stream.set_nonblocking(false).is_err() {
                    continue;
                }
                let _ = stream.set_nodelay(true);
                let client = Arc::new(Client {
                    queue: Mutex::new(VecDeque::new()),
                    ready: Condvar::new(),
                    closed: AtomicBool::new(false),
                    dropped: AtomicU64::new(0),
                    capacity,
                });
                let Ok(read_half) = stream.try_clone() else { continue };
                {
                    let c = Arc::clone(&client);
                    let s = Arc::clone(&shared);
                    thread::spawn(move || write_loop(stream, c, s));
                }
                {
                    let c = Arc::clone(&client);
                    let tx = tx.clone();
                    thread::spawn(move || read_loop(read_half, c, tx));
                }
                shared.clients.lock().expect("client list poisoned").push(client);
                shared.joined.notify_all();
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(_) => thread::sleep(POLL),
        }
    }
}

fn write_loop(mut stream: TcpStream, client: Arc<Client>, shared: Arc<Shared>) {
    loop {
        let line = {
            let mut q = client.queue.lock().expect("client queue poisoned");
            loop {
                if let Some(line) = q.pop_front() {
                    break Some(line);
                }
                if client.closed.load(Ordering::SeqCst) || shared.finished.load(Ordering::SeqCst) {
                    break None;
                }
                q = client.ready.wait_timeout(q, Duration::from_millis(20)).expect("client queue poisoned").0;
            }
        };
        let Some(line) = line else { break };
        if stream.write_all(line.as_bytes()).and_then(|_| stream.flush()).is_err() {
            break;
        }
    }
    client.close();
    let _ = stream.shutdown(Shutdown::Both);
}

fn read_loop(stream: TcpStream, client: Arc<Client>, tx: Sender<CommandMsg>) {
    for line in BufReader::new(stream).lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        match parse_command(&line) {
            Ok(cmd) => {
                if tx.send((Arc::clone(&client), cmd)).is_err() {
                    break;
                }
            }
            Err(e) => client.push(to_line(&ErrorRecord::new(e.to_string()))),
        }
    }
    client.close();
}

fn apply(cmd: SteerCommand, sim: &mut Simulator, tracker: &mut Tracker, paused: &mut bool) -> Result<()> {
    match cmd {
        SteerCommand::SetGoal { point } => tracker.set_goal(point.map(|[x, y, z]| Point3Mm::new(x, y, z))),
        SteerCommand::NudgeCoil { translate_mm, rotate_deg } => {
            sim.nudge_coil(&SteerCommand::nudge_transform(translate_mm, rotate_deg))?
        }
        SteerCommand::SetNoise { noise_px } => sim.set_noise(noise_px)?,
        SteerCommand::Pause => *paused = true,
        SteerCommand::Resume => *paused = false,
    }
    Ok(())
}

fn coordinate(mut sim: Simulator, config: ServerConfig, shared: Arc<Shared>, rx: Receiver<CommandMsg>) -> u64 {
    if config.wait_for_client {
        let mut clients = shared.clients.lock().expect("client list poisoned");
        while clients.is_empty() && !shared.stop.load(Ordering::SeqCst) {
            clients = shared.joined.wait_timeout(clients, Duration::from_millis(20)).expect("poisoned").0;
        }
    }
    let mut tracker = Tracker::new(sim.scenario().rig.clone());
    let period = Duration::from_micros(sim.scenario().frame_period_us());
    let mut paused = false;
    let mut served = 0u64;
    let mut next_tick = Instant::now();
    while !shared.stop.load(Ordering::SeqCst) && config.max_frames.is_none_or(|m| served < m) {
        while let Ok((client, cmd)) = rx.try_recv() {
            if let Err(e) = apply(cmd, &mut sim, &mut tracker, &mut paused) {
                client.push(to_line(&ErrorRecord::new(e.to_string())));
            }
        }
        if paused {
            thread::sleep(POLL);
            continue;
        }
        let Some(frame) = sim.next_frame() else { break };
        let state = tracker.process(&ObservationFrame::from(frame));
        let line = to_line(&StateRecord::from(&state));
        {
            let mut clients = shared.clients.lock().expect("client list poisoned");
            clients.retain(|c| !c.closed.load(Ordering::SeqCst));
            for c in clients.iter() {
                c.push(line.clone());
            }
        }
        served += 1;
        if config.realtime {
            next_tick += period;
            let now = Instant::now();
            if next_tick > now {
                thread::sleep(next_tick - now);
            } else {
                next_tick = now;
            }
        }
    }
    shared.finished.store(true, Ordering::SeqCst);
    for c in shared.clients.lock().expect("client list poisoned").iter() {
        c.ready.notify_all();
    }
    served
}
