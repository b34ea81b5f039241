//! Live session endpoint: length-prefixed JSON messages over TCP.  One
//! driver streams frames; any number of observers receive state.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::input::{parse_frame, serialize_frame, HumanFrame, Modality};
use crate::service::{Pipeline, ServiceError, SessionConfig};
use crate::session::{Episode, EpisodeResult};
use crate::taskenv::WorldSnapshot;

pub const WIRE_VERSION: u64 = 1;
pub const MAX_MESSAGE_BYTES: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("{code}: {message}")]
    Protocol { code: &'static str, message: String },
    #[error("connection closed")]
    Closed,
}

impl WireError {
    fn protocol(code: &'static str, message: impl Into<String>) -> Self {
        WireError::Protocol { code, message: message.into() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Driver,
    Observer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionInfo {
    pub task: String,
    pub criteria: String,
    pub modality: Modality,
    pub robot: String,
    pub tick_hz: f64,
    pub dof_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum WireMessage {
    Hello {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        role: Option<Role>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        client: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        session: Option<SessionInfo>,
    },
    Reset {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        seed: Option<u64>,
    },
    /// A human frame in its stream line form.
    Frame { frame: serde_json::Value },
    State {
        k: usize,
        t: f64,
        q: Vec<f64>,
        world: String,
        success: bool,
        coalesced: u64,
        snapshot: WorldSnapshot,
    },
    Finalize {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        result: Option<EpisodeResult>,
    },
    Error { code: String, message: String },
}

impl WireMessage {
    pub fn frame(f: &HumanFrame) -> Self {
        WireMessage::Frame { frame: serde_json::from_str(&serialize_frame(f)).expect("frame serializes to JSON") }
    }

    pub fn error(code: &str, message: impl Into<String>) -> Self {
        WireMessage::Error { code: code.into(), message: message.into() }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut v = serde_json::to_value(self).expect("serializable");
        v.as_object_mut().expect("tagged enum is an object").insert("v".into(), WIRE_VERSION.into());
        serde_json::to_vec(&v).expect("serializable")
    }

    /// Decode one message body, enforcing the version and type set.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WireError> {
        let mut v: serde_json::Value =
            serde_json::from_slice(bytes).map_err(|e| WireError::protocol("malformed", e.to_string()))?;
        let obj = v.as_object_mut().ok_or_else(|| WireError::protocol("malformed", "message is not an object"))?;
        match obj.remove("v").and_then(|x| x.as_u64()) {
            Some(WIRE_VERSION) => {}
            other => return Err(WireError::protocol("bad_version", format!("expected v:1, got {other:?}"))),
        }
        let ty = obj.get("type").and_then(|t| t.as_str()).unwrap_or_default().to_string();
        if !["hello", "reset", "frame", "state", "finalize", "error"].contains(&ty.as_str()) {
            return Err(WireError::protocol("unknown_type", format!("unknown message type `{ty}`")));
        }
        serde_json::from_value(v).map_err(|e| WireError::protocol("malformed", e.to_string()))
    }
}

pub fn write_message(w: &mut impl Write, msg: &WireMessage) -> Result<(), WireError> {
    let body = msg.to_bytes();
    w.write_all(&(body.len() as u32).to_be_bytes())?;
    w.write_all(&body)?;
    w.flush()?;
    Ok(())
}

pub fn read_message(r: &mut impl Read) -> Result<WireMessage, WireError> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Err(WireError::Closed),
        other => other?,
    }
    let n = u32::from_be_bytes(len) as usize;
    if n > MAX_MESSAGE_BYTES {
        return Err(WireError::protocol("too_large", format!("{n} byte message")));
    }
    let mut body = vec![0u8; n];
    r.read_exact(&mut body)?;
    WireMessage::from_bytes(&body)
}

/// Blocking client for tests and tools.
pub struct WireClient {
    stream: TcpStream,
}

impl WireClient {
    pub fn connect(addr: SocketAddr) -> Result<Self, WireError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(WireClient { stream })
    }

    pub fn send(&mut self, msg: &WireMessage) -> Result<(), WireError> {
        write_message(&mut self.stream, msg)
    }

    /// Raw body, bypassing validation (for protocol tests).
    pub fn send_raw(&mut self, body: &[u8]) -> Result<(), WireError> {
        self.stream.write_all(&(body.len() as u32).to_be_bytes())?;
        self.stream.write_all(body)?;
        Ok(())
    }

    pub fn recv(&mut self, timeout: Duration) -> Result<WireMessage, WireError> {
        self.stream.set_read_timeout(Some(timeout))?;
        read_message(&mut self.stream)
    }

    pub fn hello(&mut self, role: Role) -> Result<WireMessage, WireError> {
        self.send(&WireMessage::Hello { role: Some(role), client: None, session: None })?;
        self.recv(Duration::from_secs(5))
    }
}

enum Inbound {
    Connected(usize, Sender<Option<Vec<u8>>>),
    Message(usize, Result<WireMessage, WireError>),
    Closed(usize),
}

struct Conn {
    tx: Sender<Option<Vec<u8>>>,
    role: Option<Role>,
}

#[derive(Clone, Debug, Default)]
pub struct ServeOptions {
    pub log_dir: Option<PathBuf>,
    /// Base directory for relative model/task paths.
    pub base: PathBuf,
}

pub struct ServerHandle {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    control: Option<JoinHandle<Result<Vec<Episode>, ServiceError>>>,
    accept: Option<JoinHandle<()>>,
}

impl ServerHandle {
    /// Stop accepting, finish the control loop and return every finalized
    /// episode.
    pub fn shutdown(mut self) -> Result<Vec<Episode>, ServiceError> {
        self.stop.store(true, Ordering::SeqCst);
        self.join_inner()
    }

    /// Block until the server stops on its own.
    pub fn wait(mut self) -> Result<Vec<Episode>, ServiceError> {
        self.join_inner()
    }

    fn join_inner(&mut self) -> Result<Vec<Episode>, ServiceError> {
        let r = self.control.take().expect("joined once").join().expect("control loop panicked");
        self.stop.store(true, Ordering::SeqCst);
        if let Some(a) = self.accept.take() {
            let _ = a.join();
        }
        r
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
    }
}

fn spawn_reader(id: usize, mut stream: TcpStream, inbound: Sender<Inbound>) {
    std::thread::spawn(move || loop {
        match read_message(&mut stream) {
            Ok(m) => {
                if inbound.send(Inbound::Message(id, Ok(m))).is_err() {
                    return;
                }
            }
            Err(e @ WireError::Protocol { .. }) => {
                let _ = inbound.send(Inbound::Message(id, Err(e)));
                return;
            }
            Err(_) => {
                let _ = inbound.send(Inbound::Closed(id));
                return;
            }
        }
    });
}

fn spawn_writer(mut stream: TcpStream, rx: Receiver<Option<Vec<u8>>>) {
    std::thread::spawn(move || {
        while let Ok(Some(body)) = rx.recv() {
            let ok = stream
                .write_all(&(body.len() as u32).to_be_bytes())
                .and_then(|_| stream.write_all(&body))
                .and_then(|_| stream.flush());
            if ok.is_err() {
                break;
            }
        }
        let _ = stream.shutdown(std::net::Shutdown::Both);
    });
}

/// Bind and start a live session; returns immediately.
pub fn serve(cfg: SessionConfig, bind: &str, opts: ServeOptions) -> Result<ServerHandle, ServiceError> {
    let pipe = Pipeline::new(cfg, &opts.base)?;
    let listener = TcpListener::bind(bind).map_err(|e| ServiceError::Config(format!("cannot bind {bind}: {e}")))?;
    let addr = listener.local_addr()?;
    listener.set_nonblocking(true)?;
    let stop = Arc::new(AtomicBool::new(false));
    let (in_tx, in_rx) = mpsc::channel();

    let accept_stop = stop.clone();
    let accept = std::thread::spawn(move || {
        let mut next_id = 0;
        while !accept_stop.load(Ordering::SeqCst) {
            match listener.accept() {
                Ok((stream, _)) => {
                    let _ = stream.set_nonblocking(false);
                    let _ = stream.set_nodelay(true);
                    let Ok(write_half) = stream.try_clone() else { continue };
                    let (tx, rx) = mpsc::channel();
                    spawn_writer(write_half, rx);
                    if in_tx.send(Inbound::Connected(next_id, tx)).is_err() {
                        return;
                    }
                    spawn_reader(next_id, stream, in_tx.clone());
                    next_id += 1;
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(2)),
                Err(_) => std::thread::sleep(Duration::from_millis(2)),
            }
        }
    });

    let loop_stop = stop.clone();
    let control = std::thread::spawn(move || ControlLoop::new(pipe, opts.log_dir).run(in_rx, loop_stop));
    Ok(ServerHandle { addr, stop, control: Some(control), accept: Some(accept) })
}

/// Single writer of all session state.
struct ControlLoop {
    pipe: Pipeline,
    conns: BTreeMap<usize, Conn>,
    driver: Option<usize>,
    pending: Option<HumanFrame>,
    pending_count: u64,
    last_tick: Option<Instant>,
    log_dir: Option<PathBuf>,
    finished: Vec<Episode>,
}

impl ControlLoop {
    fn new(pipe: Pipeline, log_dir: Option<PathBuf>) -> Self {
        ControlLoop {
            pipe,
            conns: BTreeMap::new(),
            driver: None,
            pending: None,
            pending_count: 0,
            last_tick: None,
            log_dir,
            finished: Vec::new(),
        }
    }

    fn info(&self) -> SessionInfo {
        let robot = self.pipe.robot();
        SessionInfo {
            task: self.pipe.env.spec.name.clone(),
            criteria: self.pipe.env.spec.criteria.clone(),
            modality: self.pipe.cfg.modality,
            robot: robot.name().to_string(),
            tick_hz: self.pipe.cfg.tick_hz,
            dof_names: robot.dofs().iter().map(|d| d.name.clone()).collect(),
        }
    }

    fn send(&self, id: usize, msg: &WireMessage) {
        if let Some(c) = self.conns.get(&id) {
            let _ = c.tx.send(Some(msg.to_bytes()));
        }
    }

    fn broadcast(&self, msg: &WireMessage) {
        let body = msg.to_bytes();
        for c in self.conns.values().filter(|c| c.role.is_some()) {
            let _ = c.tx.send(Some(body.clone()));
        }
    }

    /// Send a coded error and drop the connection.
    fn reject(&mut self, id: usize, code: &str, message: String) {
        self.send(id, &WireMessage::error(code, message));
        if let Some(c) = self.conns.get(&id) {
            let _ = c.tx.send(None);
        }
        self.disconnect(id);
    }

    fn disconnect(&mut self, id: usize) {
        if self.conns.remove(&id).is_none() {
            return;
        }
        if self.driver == Some(id) {
            self.driver = None;
            self.pending = None;
            if self.pipe.episode.is_open() && !self.pipe.episode.ticks.is_empty() {
                self.finalize(Some("driver_lost"));
            }
        }
    }

    fn finalize(&mut self, reason: Option<&str>) {
        let Ok(result) = self.pipe.finalize(reason) else { return };
        let ep = self.pipe.episode.clone();
        if let Some(dir) = &self.log_dir {
            let _ = write_log(dir, &ep, self.finished.len());
        }
        self.finished.push(ep);
        self.broadcast(&WireMessage::Finalize { result: Some(result) });
    }

    fn handle(&mut self, id: usize, msg: Result<WireMessage, WireError>) {
        let msg = match msg {
            Ok(m) => m,
            Err(WireError::Protocol { code, message }) => return self.reject(id, code, message),
            Err(e) => return self.reject(id, "malformed", e.to_string()),
        };
        let role = match self.conns.get(&id) {
            Some(c) => c.role,
            None => return,
        };
        match (role, msg) {
            (None, WireMessage::Hello { role, .. }) => {
                let want = role.unwrap_or(Role::Driver);
                if want == Role::Driver && self.driver.is_some() {
                    return self.reject(id, "driver_exists", "a driver is already connected".into());
                }
                if want == Role::Driver {
                    self.driver = Some(id);
                }
                self.conns.get_mut(&id).expect("connected").role = Some(want);
                self.send(id, &WireMessage::Hello { role: Some(want), client: None, session: Some(self.info()) });
            }
            (None, other) => self.reject(id, "hello_required", format!("expected hello, got {}", type_name(&other))),
            (Some(_), WireMessage::Hello { .. }) => self.reject(id, "duplicate_hello", "hello already received".into()),
            (Some(Role::Observer), other) => {
                self.reject(id, "not_driver", format!("observers cannot send {}", type_name(&other)))
            }
            (Some(Role::Driver), WireMessage::Reset { seed }) => {
                if self.pipe.episode.is_open() && !self.pipe.episode.ticks.is_empty() {
                    self.finalize(Some("reset"));
                }
                self.pipe.reset(seed);
                self.pending = None;
                self.pending_count = 0;
                self.last_tick = None;
            }
            (Some(Role::Driver), WireMessage::Frame { frame }) => {
                let parsed = parse_frame(&frame.to_string());
                match parsed {
                    Err(e) => self.reject(id, "malformed_frame", e),
                    Ok(f) if f.modality != self.pipe.cfg.modality => self.reject(
                        id,
                        "modality_mismatch",
                        format!("session expects {}, frame is {}", self.pipe.cfg.modality, f.modality),
                    ),
                    Ok(_) if !self.pipe.episode.is_open() => {
                        self.send(id, &WireMessage::error("episode_closed", "episode finalized; send reset"))
                    }
                    Ok(f) => {
                        self.pending = Some(f);
                        self.pending_count += 1;
                    }
                }
            }
            (Some(Role::Driver), WireMessage::Finalize { .. }) => {
                if self.pipe.episode.is_open() {
                    self.finalize(Some("operator_finalize"));
                } else {
                    self.send(id, &WireMessage::error("episode_closed", "episode already finalized"));
                }
            }
            (Some(Role::Driver), other) => {
                self.reject(id, "unexpected_message", format!("clients cannot send {}", type_name(&other)))
            }
        }
    }

    fn period(&self) -> Duration {
        Duration::from_secs_f64(1.0 / self.pipe.cfg.tick_hz)
    }

    fn tick_due(&self) -> Option<Duration> {
        self.pending.as_ref()?;
        Some(match self.last_tick {
            Some(t) => self.period().saturating_sub(t.elapsed()),
            None => Duration::ZERO,
        })
    }

    fn tick(&mut self) {
        let Some(frame) = self.pending.take() else { return };
        self.pipe.episode.coalesced += self.pending_count.saturating_sub(1);
        self.pending_count = 0;
        self.last_tick = Some(Instant::now());
        if let Err(e) = self.pipe.ingest(frame).and_then(|_| self.pipe.tick()) {
            if let Some(d) = self.driver {
                self.reject(d, "pipeline_error", e.to_string());
            }
            return;
        }
        let last = self.pipe.episode.ticks.last().expect("just recorded");
        let success = self.pipe.world.satisfied_at.is_some();
        let mut snapshot = self.pipe.world.snapshot();
        snapshot.success = success;
        self.broadcast(&WireMessage::State {
            k: last.k,
            t: last.t,
            q: last.q.clone(),
            world: last.world.clone(),
            success,
            coalesced: self.pipe.episode.coalesced,
            snapshot,
        });
        if success {
            self.finalize(None);
        } else if self.pipe.timed_out() {
            self.finalize(Some("timeout"));
        }
    }

    fn run(mut self, inbound: Receiver<Inbound>, stop: Arc<AtomicBool>) -> Result<Vec<Episode>, ServiceError> {
        while !stop.load(Ordering::SeqCst) {
            let wait = self.tick_due().unwrap_or(Duration::from_millis(10)).min(Duration::from_millis(10));
            match inbound.recv_timeout(wait) {
                Ok(Inbound::Connected(id, tx)) => {
                    self.conns.insert(id, Conn { tx, role: None });
                }
                Ok(Inbound::Message(id, m)) => self.handle(id, m),
                Ok(Inbound::Closed(id)) => self.disconnect(id),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => break,
            }
            if self.tick_due() == Some(Duration::ZERO) {
                self.tick();
            }
        }
        if self.pipe.episode.is_open() && !self.pipe.episode.ticks.is_empty() {
            self.finalize(Some("shutdown"));
        }
        for c in self.conns.values() {
            let _ = c.tx.send(None);
        }
        Ok(self.finished)
    }
}

fn type_name(m: &WireMessage) -> &'static str {
    match m {
        WireMessage::Hello { .. } => "hello",
        WireMessage::Reset { .. } => "reset",
        WireMessage::Frame { .. } => "frame",
        WireMessage::State { .. } => "state",
        WireMessage::Finalize { .. } => "finalize",
        WireMessage::Error { .. } => "error",
    }
}

fn write_log(dir: &Path, ep: &Episode, n: usize) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(format!("{}-live{n}.jsonl", ep.meta.id)), ep.to_jsonl())
}
