//! Live and recorded input: a newline-delimited JSON socket listener and a
//! paced replay driver for scenario files.
//!
//! Wire lines look like `{"type":"cpm"|"openlabel","payload":{...}}` and are
//! answered one-for-one with `{"ok":true,"committed":{...}}` or
//! `{"ok":false,"error":"..."}`. Scenario files carry the same lines with an
//! extra `offset_ms` field.

use std::io::{self, BufRead, BufReader, ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::str::FromStr;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::ingest::cpm::parse_cpm_value;
use crate::ingest::openlabel::parse_openlabel_value;
use crate::ingest::{CommitCounts, IngestError};
use crate::model::{FrameSource, Timestamp};
use crate::query::{Ldm, LdmError};

/// Longest accepted wire line, newline excluded.
pub const MAX_LINE_BYTES: usize = 1 << 20;

const POLL_INTERVAL: Duration = Duration::from_millis(50);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MsgType {
    Cpm,
    Openlabel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedEnvelope {
    #[serde(rename = "type")]
    pub msg_type: MsgType,
    pub payload: Value,
    /// Arrival time. Kept for logging; store time always comes from the payload.
    #[serde(skip)]
    pub recv_time: Timestamp,
}

#[derive(Debug, Error)]
pub enum FeedError {
    #[error("BindError: {0}")]
    Bind(#[source] io::Error),
    #[error("FileError: {0}")]
    File(String),
    #[error("line exceeds {MAX_LINE_BYTES} bytes")]
    LineTooLong,
    #[error("line is not valid UTF-8")]
    NotUtf8,
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Ldm(#[from] LdmError),
}

pub fn wall_clock_now() -> Timestamp {
    let d = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
    Timestamp(i64::try_from(d.as_micros()).unwrap_or(i64::MAX))
}

/// Decodes one wire line.
pub fn parse_envelope(line: &str, recv_time: Timestamp) -> Result<FeedEnvelope, FeedError> {
    let value: Value = serde_json::from_str(line).map_err(IngestError::syntax)?;
    envelope_from_value(value, recv_time)
}

fn envelope_from_value(value: Value, recv_time: Timestamp) -> Result<FeedEnvelope, FeedError> {
    let mut env: FeedEnvelope = serde_json::from_value(value).map_err(|e| IngestError::Schema {
        path: "$".into(),
        message: e.to_string(),
    })?;
    env.recv_time = recv_time;
    Ok(env)
}

/// Converts and commits one envelope.
pub fn dispatch(ldm: &Ldm, env: FeedEnvelope) -> Result<CommitCounts, FeedError> {
    log::trace!("{:?} envelope received at {}", env.msg_type, env.recv_time);
    Ok(match env.msg_type {
        MsgType::Cpm => ldm.add_cpm(&parse_cpm_value(env.payload)?)?,
        MsgType::Openlabel => ldm.add_objects(&parse_openlabel_value(env.payload)?, FrameSource::LocalPerception)?,
    })
}

/// Handles one wire line end to end and returns the reply line (without newline).
pub fn handle_line(ldm: &Ldm, line: &str) -> String {
    reply(parse_envelope(line, wall_clock_now()).and_then(|env| dispatch(ldm, env)))
}

#[derive(Serialize)]
struct Reply {
    ok: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    committed: Option<CommitCounts>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

fn reply(result: Result<CommitCounts, FeedError>) -> String {
    let r = match result {
        Ok(c) => Reply { ok: true, committed: Some(c), error: None },
        Err(e) => Reply { ok: false, committed: None, error: Some(e.to_string()) },
    };
    serde_json::to_string(&r).expect("reply serializes")
}

/// A running listener. Dropping it without [`FeedHandle::shutdown`] leaves the
/// threads running until the process exits.
#[derive(Debug)]
pub struct FeedHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
    evictor: Option<JoinHandle<()>>,
    handlers: Arc<Mutex<Vec<JoinHandle<()>>>>,
}

impl FeedHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting, lets every connection finish the line it is on, and joins all threads.
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the blocking accept
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.acceptor.take() {
            let _ = t.join();
        }
        if let Some(t) = self.evictor.take() {
            let _ = t.join();
        }
        let handlers = std::mem::take(&mut *self.handlers.lock());
        for h in handlers {
            let _ = h.join();
        }
    }

    /// Blocks until the listener stops.
    pub fn wait(mut self) {
        if let Some(t) = self.acceptor.take() {
            let _ = t.join();
        }
    }
}

/// Starts the listener plus a periodic eviction thread.
///
/// Eviction runs every `eviction_period` of the store configuration against
/// the store's own clock, archiving first when an archive directory is set.
pub fn serve(addr: impl ToSocketAddrs, ldm: Arc<Ldm>) -> Result<FeedHandle, FeedError> {
    let listener = TcpListener::bind(addr).map_err(FeedError::Bind)?;
    let local = listener.local_addr().map_err(FeedError::Bind)?;
    let stop = Arc::new(AtomicBool::new(false));
    let handlers: Arc<Mutex<Vec<JoinHandle<()>>>> = Arc::default();
    let acceptor = {
        let (ldm, stop, handlers) = (ldm.clone(), stop.clone(), handlers.clone());
        thread::Builder::new()
            .name("ldm-accept".into())
            .spawn(move || accept_loop(listener, ldm, stop, handlers))
            .map_err(FeedError::Bind)?
    };
    let evictor = {
        let (ldm, stop) = (ldm, stop.clone());
        thread::Builder::new()
            .name("ldm-evict".into())
            .spawn(move || evict_loop(&ldm, &stop))
            .map_err(FeedError::Bind)?
    };
    log::info!("listening on {local}");
    Ok(FeedHandle {
        addr: local,
        stop,
        acceptor: Some(acceptor),
        evictor: Some(evictor),
        handlers,
    })
}

fn accept_loop(listener: TcpListener, ldm: Arc<Ldm>, stop: Arc<AtomicBool>, handlers: Arc<Mutex<Vec<JoinHandle<()>>>>) {
    for conn in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let stream = match conn {
            Ok(s) => s,
            Err(e) => {
                log::warn!("accept failed: {e}");
                continue;
            }
        };
        let (ldm, stop) = (ldm.clone(), stop.clone());
        let spawned = thread::Builder::new()
            .name("ldm-conn".into())
            .spawn(move || {
                let peer = stream.peer_addr().ok();
                if let Err(e) = serve_connection(stream, &ldm, &stop) {
                    log::debug!("connection {peer:?} closed: {e}");
                }
            });
        match spawned {
            Ok(h) => {
                let mut hs = handlers.lock();
                hs.retain(|h| !h.is_finished());
                hs.push(h);
            }
            Err(e) => log::warn!("cannot spawn connection handler: {e}"),
        }
    }
}

fn serve_connection(stream: TcpStream, ldm: &Ldm, stop: &AtomicBool) -> io::Result<()> {
    stream.set_read_timeout(Some(POLL_INTERVAL))?;
    let _ = stream.set_nodelay(true);
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let mut buf = Vec::new();
    let mut overflow = false;
    loop {
        if stop.load(Ordering::SeqCst) && buf.is_empty() {
            return Ok(());
        }
        let budget = (MAX_LINE_BYTES + 1).saturating_sub(buf.len()) as u64;
        let n = match reader.by_ref().take(budget.max(1)).read_until(b'\n', &mut buf) {
            Ok(n) => n,
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::Interrupted) => {
                continue;
            }
            Err(e) => return Err(e),
        };
        let complete = buf.last() == Some(&b'\n');
        if n == 0 && !complete {
            // peer closed; answer a trailing unterminated line
            if !buf.is_empty() && !overflow {
                let line = std::mem::take(&mut buf);
                send(&mut writer, process(ldm, &line))?;
            }
            return Ok(());
        }
        if !complete {
            if buf.len() > MAX_LINE_BYTES {
                overflow = true;
                buf.clear();
            }
            continue;
        }
        let line = std::mem::take(&mut buf);
        let answer = if std::mem::take(&mut overflow) {
            reply(Err(FeedError::LineTooLong))
        } else {
            process(ldm, &line)
        };
        send(&mut writer, answer)?;
    }
}

/// One write per reply so the line leaves in a single segment.
fn send(w: &mut TcpStream, mut answer: String) -> io::Result<()> {
    answer.push('\n');
    w.write_all(answer.as_bytes())
}

fn process(ldm: &Ldm, raw: &[u8]) -> String {
    let raw = raw.strip_suffix(b"\n").unwrap_or(raw);
    let raw = raw.strip_suffix(b"\r").unwrap_or(raw);
    if raw.len() > MAX_LINE_BYTES {
        return reply(Err(FeedError::LineTooLong));
    }
    match std::str::from_utf8(raw) {
        Ok(line) => handle_line(ldm, line),
        Err(_) => reply(Err(FeedError::NotUtf8)),
    }
}

fn evict_loop(ldm: &Ldm, stop: &AtomicBool) {
    let mut last = Instant::now();
    while !stop.load(Ordering::SeqCst) {
        thread::sleep(POLL_INTERVAL);
        let period = ldm.config().eviction_period;
        if last.elapsed() < period {
            continue;
        }
        last = Instant::now();
        let now = ldm.store().last_update();
        match ldm.archive_and_evict(now) {
            Ok(out) => {
                if let Some(file) = out.file {
                    log::info!("archived {} frames to {}", out.exported.frames, file.display());
                }
                if out.evicted > 0 {
                    log::debug!("evicted {} frames at {now}", out.evicted);
                }
            }
            Err(e) => log::error!("archive pass failed: {e}"),
        }
    }
}

/// Replay pacing: a positive factor on the recorded offsets, or no pacing at all.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Speed {
    Factor(f64),
    Unlimited,
}

impl FromStr for Speed {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "inf" | "max" | "unlimited" => Ok(Speed::Unlimited),
            t => match t.parse::<f64>() {
                Ok(f) if f.is_infinite() && f > 0.0 => Ok(Speed::Unlimited),
                Ok(f) if f > 0.0 => Ok(Speed::Factor(f)),
                _ => Err(format!("speed must be a positive number or 'inf', got {t:?}")),
            },
        }
    }
}

#[derive(Debug)]
pub struct ScenarioEntry {
    pub offset_ms: u64,
    /// Line number in the source file, 1-based.
    pub line: usize,
    /// The decoded envelope, or why the line could not be decoded.
    pub envelope: Result<FeedEnvelope, String>,
}

#[derive(Debug, Default)]
pub struct ScenarioFile {
    pub entries: Vec<ScenarioEntry>,
}

#[derive(Deserialize)]
struct Offset {
    offset_ms: u64,
}

impl ScenarioFile {
    /// Reads a scenario. Blank lines are skipped. Undecodable lines are kept
    /// as failed entries at the previous offset; decreasing offsets are an error.
    pub fn parse(text: &str) -> Result<Self, FeedError> {
        let mut entries: Vec<ScenarioEntry> = Vec::new();
        let mut last = 0;
        for (i, raw) in text.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let line = i + 1;
            let decoded = serde_json::from_str::<Value>(raw)
                .map_err(|e| FeedError::from(IngestError::syntax(e)).to_string())
                .and_then(|mut v| {
                    let offset = serde_json::from_value::<Offset>(v.clone())
                        .map_err(|e| format!("offset_ms: {e}"))?
                        .offset_ms;
                    if let Some(obj) = v.as_object_mut() {
                        obj.remove("offset_ms");
                    }
                    Ok((offset, v))
                });
            let (offset_ms, envelope) = match decoded {
                Ok((offset, v)) => {
                    if offset < last {
                        return Err(FeedError::File(format!(
                            "line {line}: offset_ms {offset} is smaller than the previous {last}"
                        )));
                    }
                    last = offset;
                    let recv = Timestamp::from_millis(offset as i64);
                    (offset, envelope_from_value(v, recv).map_err(|e| e.to_string()))
                }
                Err(e) => (last, Err(e)),
            };
            entries.push(ScenarioEntry { offset_ms, line, envelope });
        }
        Ok(ScenarioFile { entries })
    }

    pub fn read(path: &std::path::Path) -> Result<Self, FeedError> {
        let text = std::fs::read_to_string(path).map_err(|e| FeedError::File(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ReplaySummary {
    pub messages: usize,
    pub committed: usize,
    pub errors: usize,
    #[serde(serialize_with = "as_secs")]
    pub wall_duration: Duration,
}

fn as_secs<S: serde::Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(d.as_secs_f64())
}

/// Feeds every entry to `ldm` in file order, sleeping to honour `speed`.
/// Failed entries are logged and counted; the replay carries on.
pub fn replay(file: &ScenarioFile, speed: Speed, ldm: &Ldm) -> ReplaySummary {
    let start = Instant::now();
    let mut summary = ReplaySummary {
        messages: file.entries.len(),
        ..ReplaySummary::default()
    };
    for entry in &file.entries {
        if let Speed::Factor(f) = speed {
            let due = Duration::from_secs_f64(entry.offset_ms as f64 / 1000.0 / f);
            if let Some(wait) = due.checked_sub(start.elapsed()) {
                thread::sleep(wait);
            }
        }
        let result = match &entry.envelope {
            Ok(env) => dispatch(ldm, env.clone()).map_err(|e| e.to_string()),
            Err(e) => Err(e.clone()),
        };
        match result {
            Ok(_) => summary.committed += 1,
            Err(e) => {
                log::warn!("scenario line {}: {e}", entry.line);
                summary.errors += 1;
            }
        }
    }
    summary.wall_duration = start.elapsed();
    summary
}
