//! Stage/stream dataflow substrate.
//!
//! A runtime hosts stages, each instantiated as one or more copies. Copies
//! of ordinary stages own an inbox and a worker pool that feeds envelopes to
//! the stage handler; source stages have no inbox and are driven from the
//! outside through [`Source`]. Streams connect one stage to another and route
//! each envelope to a destination copy by applying the stream's tag map.
//!
//! Sends are buffered per (source copy, stream, destination copy) and shipped
//! as one transport message when the buffer reaches the count or byte
//! threshold, or when flushed explicitly. Delivery is FIFO per buffer.

mod counters;
mod inbox;
mod socket;
pub mod wire;

use std::collections::HashMap;
use std::fmt::Write as _;
use std::net::{TcpListener, TcpStream};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

pub use counters::{StreamTraffic, TrafficCounters};

use crate::error::{param, state, Error, Result};
use counters::StreamCounters;
use inbox::Inbox;
pub(crate) use socket::connect;
use socket::Net;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StageId(pub u16);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct StreamId(pub u16);

/// Reserved for runtime control traffic between processes.
pub const CONTROL_STREAM: StreamId = StreamId(u16::MAX);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Envelope {
    pub stream: StreamId,
    pub tag: u64,
    /// Copy index of the sender within its stage.
    pub src_copy: u32,
    /// Per (source copy, stream, destination copy) sequence number.
    pub seq: u64,
    pub payload: Vec<u8>,
}

/// Maps `(tag, destination copies)` to a destination copy index.
pub type TagMap = Arc<dyn Fn(u64, usize) -> usize + Send + Sync>;

pub fn mod_map() -> TagMap {
    Arc::new(|tag, n| (tag % n as u64) as usize)
}

pub trait Handler: Send + Sync {
    fn handle(&self, env: Envelope, out: &mut Outbox<'_>) -> Result<()>;
}

impl<F> Handler for F
where
    F: Fn(Envelope, &mut Outbox<'_>) -> Result<()> + Send + Sync,
{
    fn handle(&self, env: Envelope, out: &mut Outbox<'_>) -> Result<()> {
        self(env, out)
    }
}

/// Serves opaque application requests arriving over the control channel.
pub type AppHandler = Arc<dyn Fn(&[u8]) -> Result<Vec<u8>> + Send + Sync>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RuntimeOptions {
    pub flush_bytes: usize,
    pub flush_count: usize,
    pub inbox_capacity: usize,
    #[serde(with = "secs")]
    pub barrier_timeout: Duration,
}

impl Default for RuntimeOptions {
    fn default() -> Self {
        Self {
            flush_bytes: 64 * 1024,
            flush_count: 256,
            inbox_capacity: 1 << 16,
            barrier_timeout: Duration::from_secs(120),
        }
    }
}

mod secs {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}

/// Multi-process layout: this process's index, every process's endpoint and
/// the process hosting each copy, keyed by stage name. Stages missing from
/// `placement` live entirely on process 0.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SocketPlan {
    pub process: usize,
    pub endpoints: Vec<String>,
    pub placement: HashMap<String, Vec<usize>>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub enum Transport {
    #[default]
    InProcess,
    Socket(SocketPlan),
}

type Factory = Box<dyn FnMut(usize) -> Arc<dyn Handler> + Send>;

struct StageDecl {
    name: String,
    copies: usize,
    threads: usize,
    factory: Option<Factory>,
}

pub(crate) struct StageInfo {
    pub name: String,
    pub copies: usize,
    pub threads: usize,
    pub source: bool,
    /// Index of copy 0 in the flat copy table.
    pub base: usize,
}

pub(crate) struct StreamInfo {
    pub name: String,
    pub from: StageId,
    pub to: StageId,
    pub map: TagMap,
}

#[derive(Default)]
struct Pending {
    envs: Vec<Envelope>,
    bytes: usize,
    next_seq: u64,
}

pub(crate) struct CopySlot {
    pub stage: usize,
    pub copy: usize,
    pub process: usize,
    pub inbox: Option<Arc<Inbox>>,
    handler: Option<Arc<dyn Handler>>,
    /// `[stream][destination copy]`; empty for streams not leaving this stage.
    buffers: Vec<Vec<Mutex<Pending>>>,
}

pub struct RuntimeBuilder {
    options: RuntimeOptions,
    transport: Transport,
    stages: Vec<StageDecl>,
    streams: Vec<StreamInfo>,
    app: Option<AppHandler>,
    listener: Option<TcpListener>,
    adopted: Vec<TcpStream>,
    control: Vec<(usize, TcpStream)>,
}

impl RuntimeBuilder {
    pub fn new(options: RuntimeOptions) -> Self {
        Self {
            options,
            transport: Transport::InProcess,
            stages: Vec::new(),
            streams: Vec::new(),
            app: None,
            listener: None,
            adopted: Vec::new(),
            control: Vec::new(),
        }
    }

    pub fn transport(mut self, t: Transport) -> Self {
        self.transport = t;
        self
    }

    fn check_name(&self, name: &str, copies: usize) -> Result<()> {
        if self.stages.iter().any(|s| s.name == name) {
            return Err(state(format!("stage {name} registered twice")));
        }
        if copies == 0 {
            return Err(param(format!("stage {name} needs at least one copy")));
        }
        Ok(())
    }

    /// Registers a stage whose copies run `handler_for(copy)` on `threads`
    /// workers each. The factory is only called for copies hosted locally.
    pub fn register_stage<F>(&mut self, name: &str, copies: usize, threads: usize, handler_for: F) -> Result<StageId>
    where
        F: FnMut(usize) -> Arc<dyn Handler> + Send + 'static,
    {
        self.check_name(name, copies)?;
        if threads == 0 {
            return Err(param(format!("stage {name} needs at least one worker thread")));
        }
        self.stages.push(StageDecl {
            name: name.to_string(),
            copies,
            threads,
            factory: Some(Box::new(handler_for)),
        });
        Ok(StageId(self.stages.len() as u16 - 1))
    }

    /// Registers a stage without inbox whose copies are driven via [`Runtime::source`].
    pub fn register_source(&mut self, name: &str, copies: usize) -> Result<StageId> {
        self.check_name(name, copies)?;
        self.stages.push(StageDecl {
            name: name.to_string(),
            copies,
            threads: 0,
            factory: None,
        });
        Ok(StageId(self.stages.len() as u16 - 1))
    }

    pub fn register_stream(&mut self, name: &str, from: StageId, to: StageId, map: TagMap) -> Result<StreamId> {
        if self.streams.iter().any(|s| s.name == name) {
            return Err(state(format!("stream {name} registered twice")));
        }
        for id in [from, to] {
            if id.0 as usize >= self.stages.len() {
                return Err(param(format!("stream {name} refers to unknown stage {}", id.0)));
            }
        }
        if self.stages[to.0 as usize].factory.is_none() {
            return Err(param(format!("stream {name} targets source stage {}", self.stages[to.0 as usize].name)));
        }
        if self.streams.len() >= CONTROL_STREAM.0 as usize {
            return Err(param("too many streams"));
        }
        self.streams.push(StreamInfo {
            name: name.to_string(),
            from,
            to,
            map,
        });
        Ok(StreamId(self.streams.len() as u16 - 1))
    }

    pub fn app_handler(&mut self, h: AppHandler) {
        self.app = Some(h);
    }

    /// Socket transport: accept peers on an already bound listener instead
    /// of binding this process's endpoint.
    pub fn listener(&mut self, l: TcpListener) {
        self.listener = Some(l);
    }

    /// Socket transport: serve an already accepted connection.
    pub fn adopt(&mut self, conn: TcpStream) {
        self.adopted.push(conn);
    }

    /// Socket transport: use `conn` as the control channel to `process`.
    pub fn control_channel(&mut self, process: usize, conn: TcpStream) {
        self.control.push((process, conn));
    }

    pub fn start(mut self) -> Result<Runtime> {
        let (process, n_proc, placement) = match &self.transport {
            Transport::InProcess => (0, 1, HashMap::new()),
            Transport::Socket(plan) => {
                if plan.process >= plan.endpoints.len() {
                    return Err(param(format!(
                        "process {} has no endpoint among {}",
                        plan.process,
                        plan.endpoints.len()
                    )));
                }
                (plan.process, plan.endpoints.len(), plan.placement.clone())
            }
        };
        for name in placement.keys() {
            if !self.stages.iter().any(|s| &s.name == name) {
                return Err(param(format!("placement names unknown stage {name}")));
            }
        }

        let copy_counts: Vec<usize> = self.stages.iter().map(|s| s.copies).collect();
        let mut stages = Vec::with_capacity(self.stages.len());
        let mut copies = Vec::new();
        for (si, decl) in self.stages.iter_mut().enumerate() {
            let procs = match placement.get(&decl.name) {
                Some(p) if p.len() != decl.copies => {
                    return Err(param(format!(
                        "placement of {} lists {} copies, stage has {}",
                        decl.name,
                        p.len(),
                        decl.copies
                    )))
                }
                Some(p) => p.clone(),
                None => vec![0; decl.copies],
            };
            if let Some(&bad) = procs.iter().find(|&&p| p >= n_proc) {
                return Err(param(format!("placement of {} names process {bad}", decl.name)));
            }
            stages.push(StageInfo {
                name: decl.name.clone(),
                copies: decl.copies,
                threads: decl.threads,
                source: decl.factory.is_none(),
                base: copies.len(),
            });
            for (c, &p) in procs.iter().enumerate() {
                let local = p == process;
                let handler = match (&mut decl.factory, local) {
                    (Some(f), true) => Some(f(c)),
                    _ => None,
                };
                let inbox = handler.as_ref().map(|_| Arc::new(Inbox::new(self.options.inbox_capacity)));
                let buffers = self
                    .streams
                    .iter()
                    .map(|s| {
                        if local && s.from.0 as usize == si {
                            (0..copy_counts[s.to.0 as usize])
                                .map(|_| Mutex::new(Pending::default()))
                                .collect()
                        } else {
                            Vec::new()
                        }
                    })
                    .collect();
                copies.push(CopySlot {
                    stage: si,
                    copy: c,
                    process: p,
                    inbox,
                    handler,
                    buffers,
                });
            }
        }

        let net = match &self.transport {
            Transport::InProcess => None,
            Transport::Socket(plan) => Some(Net::new(plan, self.listener.take(), std::mem::take(&mut self.control))?),
        };
        let shared = Arc::new(Shared {
            counters: self.streams.iter().map(|_| StreamCounters::default()).collect(),
            stages,
            streams: self.streams,
            copies,
            options: self.options,
            process,
            sent: AtomicU64::new(0),
            completed: AtomicU64::new(0),
            buffered: AtomicU64::new(0),
            errors: Mutex::new(Vec::new()),
            app: self.app,
            net,
        });

        let mut workers = Vec::new();
        for (g, slot) in shared.copies.iter().enumerate() {
            if slot.inbox.is_none() {
                continue;
            }
            for t in 0..shared.stages[slot.stage].threads {
                let sh = Arc::clone(&shared);
                let name = format!("{}-{}-{t}", shared.stages[slot.stage].name, slot.copy);
                workers.push(
                    thread::Builder::new()
                        .name(name)
                        .spawn(move || worker_loop(&sh, g))?,
                );
            }
        }
        if shared.net.is_some() {
            socket::start_serving(&shared, self.adopted)?;
        }
        Ok(Runtime { shared, workers })
    }
}

pub(crate) struct Shared {
    pub stages: Vec<StageInfo>,
    pub streams: Vec<StreamInfo>,
    pub copies: Vec<CopySlot>,
    counters: Vec<StreamCounters>,
    options: RuntimeOptions,
    process: usize,
    sent: AtomicU64,
    completed: AtomicU64,
    buffered: AtomicU64,
    errors: Mutex<Vec<String>>,
    pub app: Option<AppHandler>,
    pub net: Option<Net>,
}

/// Queue state of one stage summed over the copies visible to a process.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct StageLoad {
    pub name: String,
    pub queued: u64,
    pub active: u64,
    pub buffered: u64,
}

/// Counter totals of one process.
#[derive(Clone, Debug, Default)]
pub(crate) struct ProcessStatus {
    pub sent: u64,
    pub completed: u64,
    pub buffered: u64,
    pub streams: Vec<[u64; 4]>,
    pub stages: Vec<[u64; 3]>,
}

impl Shared {
    fn slot_index(&self, stage: StageId, copy: usize) -> Result<usize> {
        let info = self
            .stages
            .get(stage.0 as usize)
            .ok_or_else(|| param(format!("unknown stage {}", stage.0)))?;
        if copy >= info.copies {
            return Err(param(format!("stage {} has no copy {copy}", info.name)));
        }
        Ok(info.base + copy)
    }

    pub(crate) fn destination(&self, stream: usize, tag: u64) -> Result<usize> {
        let info = &self.streams[stream];
        let to = &self.stages[info.to.0 as usize];
        let dst = (info.map)(tag, to.copies);
        if dst >= to.copies {
            return Err(param(format!(
                "stream {} mapped tag {tag} to copy {dst} of {}",
                info.name, to.copies
            )));
        }
        Ok(dst)
    }

    fn send(&self, src: usize, stream: StreamId, tag: u64, payload: Vec<u8>) -> Result<()> {
        let s = stream.0 as usize;
        let info = self
            .streams
            .get(s)
            .ok_or_else(|| param(format!("unknown stream {}", stream.0)))?;
        let slot = &self.copies[src];
        if info.from.0 as usize != slot.stage {
            return Err(param(format!(
                "stream {} does not leave stage {}",
                info.name, self.stages[slot.stage].name
            )));
        }
        let dst = self.destination(s, tag)?;
        let len = payload.len();
        let c = &self.counters[s];
        c.logical.fetch_add(1, Ordering::SeqCst);
        c.bytes.fetch_add(len as u64, Ordering::SeqCst);
        self.sent.fetch_add(1, Ordering::SeqCst);
        self.buffered.fetch_add(1, Ordering::SeqCst);

        let mut p = slot.buffers[s][dst].lock().unwrap();
        let seq = p.next_seq;
        p.next_seq += 1;
        p.envs.push(Envelope {
            stream,
            tag,
            src_copy: slot.copy as u32,
            seq,
            payload,
        });
        p.bytes += len;
        if p.envs.len() >= self.options.flush_count || p.bytes >= self.options.flush_bytes {
            self.dispatch(src, s, dst, &mut p);
        }
        Ok(())
    }

    /// Ships the pending batch. Called with the buffer lock held so batches
    /// of one buffer reach the destination in order.
    fn dispatch(&self, src: usize, stream: usize, dst: usize, p: &mut Pending) {
        if p.envs.is_empty() {
            return;
        }
        let batch = std::mem::take(&mut p.envs);
        p.bytes = 0;
        self.counters[stream].transport.fetch_add(1, Ordering::SeqCst);
        self.buffered.fetch_sub(batch.len() as u64, Ordering::SeqCst);
        let to = &self.stages[self.streams[stream].to.0 as usize];
        let target = &self.copies[to.base + dst];
        if target.process == self.process {
            if let Some(inbox) = &target.inbox {
                inbox.push_batch(batch);
                return;
            }
        }
        match &self.net {
            Some(net) => {
                if let Err(e) = net.send_batch(src, target.process, &batch) {
                    self.record_error(format!(
                        "sending {} envelopes on {} to process {}: {e}",
                        batch.len(),
                        self.streams[stream].name,
                        target.process
                    ));
                }
            }
            None => self.record_error(format!("no route to {} copy {dst}", to.name)),
        }
    }

    fn flush_slot(&self, g: usize, stream: Option<usize>) {
        let slot = &self.copies[g];
        for (s, dsts) in slot.buffers.iter().enumerate() {
            if stream.is_some_and(|x| x != s) {
                continue;
            }
            for (dst, m) in dsts.iter().enumerate() {
                let mut p = m.lock().unwrap();
                self.dispatch(g, s, dst, &mut p);
            }
        }
    }

    pub(crate) fn flush_all(&self) {
        for g in 0..self.copies.len() {
            self.flush_slot(g, None);
        }
    }

    /// Accepts envelopes that arrived from another process.
    pub(crate) fn accept_remote(&self, batch: Vec<Envelope>) -> Result<()> {
        let mut groups: Vec<(usize, Vec<Envelope>)> = Vec::new();
        for env in batch {
            let s = env.stream.0 as usize;
            if s >= self.streams.len() {
                return Err(Error::Protocol(format!("unknown stream {s}")));
            }
            let dst = self.destination(s, env.tag)?;
            let g = self.stages[self.streams[s].to.0 as usize].base + dst;
            if self.copies[g].inbox.is_none() {
                return Err(Error::Protocol(format!(
                    "envelope for {} copy {dst} arrived at process {}",
                    self.stages[self.copies[g].stage].name, self.process
                )));
            }
            match groups.last_mut() {
                Some((last, v)) if *last == g => v.push(env),
                _ => groups.push((g, vec![env])),
            }
        }
        for (g, envs) in groups {
            self.copies[g].inbox.as_ref().unwrap().push_batch(envs);
        }
        Ok(())
    }

    pub(crate) fn record_error(&self, msg: String) {
        log::warn!("{msg}");
        self.errors.lock().unwrap().push(msg);
    }

    pub(crate) fn take_local_errors(&self) -> Vec<String> {
        std::mem::take(&mut *self.errors.lock().unwrap())
    }

    pub(crate) fn local_status(&self) -> ProcessStatus {
        let completed = self.completed.load(Ordering::SeqCst);
        let sent = self.sent.load(Ordering::SeqCst);
        let buffered = self.buffered.load(Ordering::SeqCst);
        let mut stages = vec![[0u64; 3]; self.stages.len()];
        for slot in &self.copies {
            let st = &mut stages[slot.stage];
            if let Some(ib) = &slot.inbox {
                let (q, a) = ib.load();
                st[0] += q as u64;
                st[1] += a as u64;
            }
            for dsts in &slot.buffers {
                for m in dsts {
                    st[2] += m.lock().unwrap().envs.len() as u64;
                }
            }
        }
        ProcessStatus {
            sent,
            completed,
            buffered,
            streams: self.counters.iter().map(StreamCounters::load).collect(),
            stages,
        }
    }

    fn close_inboxes(&self) {
        for slot in &self.copies {
            if let Some(ib) = &slot.inbox {
                ib.close();
            }
        }
    }
}

fn worker_loop(shared: &Shared, g: usize) {
    let slot = &shared.copies[g];
    let inbox = slot.inbox.as_ref().unwrap();
    let handler = slot.handler.as_ref().unwrap();
    while let Some(env) = inbox.pop() {
        let stream = env.stream.0 as usize;
        let (seq, src) = (env.seq, env.src_copy);
        let mut out = Outbox { shared, src: g };
        match catch_unwind(AssertUnwindSafe(|| handler.handle(env, &mut out))) {
            Ok(Ok(())) => {}
            Ok(Err(e)) => shared.record_error(format!(
                "{} copy {} on {} (src {src}, seq {seq}): {e}",
                shared.stages[slot.stage].name, slot.copy, shared.streams[stream].name
            )),
            Err(panic) => {
                let msg = panic
                    .downcast_ref::<&str>()
                    .map(|s| s.to_string())
                    .or_else(|| panic.downcast_ref::<String>().cloned())
                    .unwrap_or_default();
                shared.record_error(format!(
                    "{} copy {} panicked on {}: {msg}",
                    shared.stages[slot.stage].name, slot.copy, shared.streams[stream].name
                ));
            }
        }
        shared.counters[stream].delivered.fetch_add(1, Ordering::SeqCst);
        inbox.done();
        shared.completed.fetch_add(1, Ordering::SeqCst);
    }
}

/// Send handle given to handlers; sends originate from the handling copy.
pub struct Outbox<'a> {
    shared: &'a Shared,
    src: usize,
}

impl Outbox<'_> {
    pub fn send(&mut self, stream: StreamId, tag: u64, payload: Vec<u8>) -> Result<()> {
        self.shared.send(self.src, stream, tag, payload)
    }

    /// Copy index of the handling copy within its stage.
    pub fn copy(&self) -> usize {
        self.shared.copies[self.src].copy
    }
}

/// Send handle for one copy of a source stage.
pub struct Source<'a> {
    shared: &'a Shared,
    src: usize,
}

impl Source<'_> {
    pub fn send(&self, stream: StreamId, tag: u64, payload: Vec<u8>) -> Result<()> {
        self.shared.send(self.src, stream, tag, payload)
    }

    pub fn flush(&self) {
        self.shared.flush_slot(self.src, None);
    }
}

pub struct Runtime {
    shared: Arc<Shared>,
    workers: Vec<JoinHandle<()>>,
}

struct Wave {
    sent: u64,
    completed: u64,
    buffered: u64,
    stages: Vec<[u64; 3]>,
}

impl Runtime {
    pub fn process(&self) -> usize {
        self.shared.process
    }

    pub fn stage_copies(&self, stage: StageId) -> usize {
        self.shared.stages[stage.0 as usize].copies
    }

    /// Whether `copy` of `stage` runs in this process.
    pub fn is_local(&self, stage: StageId, copy: usize) -> bool {
        self.shared
            .slot_index(stage, copy)
            .is_ok_and(|g| self.shared.copies[g].process == self.shared.process)
    }

    pub fn source(&self, stage: StageId, copy: usize) -> Result<Source<'_>> {
        let g = self.shared.slot_index(stage, copy)?;
        let info = &self.shared.stages[stage.0 as usize];
        if !info.source {
            return Err(param(format!("stage {} is not a source", info.name)));
        }
        if self.shared.copies[g].process != self.shared.process {
            return Err(state(format!("copy {copy} of {} runs in another process", info.name)));
        }
        Ok(Source {
            shared: &self.shared,
            src: g,
        })
    }

    /// Flushes every local buffer of `stream`.
    pub fn flush(&self, stream: StreamId) {
        for g in 0..self.shared.copies.len() {
            self.shared.flush_slot(g, Some(stream.0 as usize));
        }
    }

    pub fn flush_all(&self) {
        self.shared.flush_all();
    }

    fn remotes(&self) -> Vec<usize> {
        match &self.shared.net {
            Some(net) if self.shared.process == 0 => (1..net.processes()).collect(),
            _ => Vec::new(),
        }
    }

    fn wave(&self) -> Result<Wave> {
        let local = self.shared.local_status();
        let mut w = Wave {
            sent: local.sent,
            completed: local.completed,
            buffered: local.buffered,
            stages: local.stages,
        };
        for p in self.remotes() {
            let st = self.shared.net.as_ref().unwrap().status(p)?;
            w.sent += st.sent;
            w.completed += st.completed;
            w.buffered += st.buffered;
            for (a, b) in w.stages.iter_mut().zip(&st.stages) {
                for i in 0..3 {
                    a[i] += b[i];
                }
            }
        }
        Ok(w)
    }

    fn flush_everywhere(&self) -> Result<()> {
        self.shared.flush_all();
        for p in self.remotes() {
            self.shared.net.as_ref().unwrap().flush(p)?;
        }
        Ok(())
    }

    /// Waits until no envelope is buffered, queued or being handled in any
    /// process. Buffers are flushed whenever nothing else is in flight.
    pub fn drain_barrier(&self) -> Result<()> {
        let deadline = Instant::now() + self.shared.options.barrier_timeout;
        let mut backoff = Duration::from_micros(50);
        let mut last_idle: Option<u64> = None;
        loop {
            let w = self.wave()?;
            if w.sent == w.completed {
                if last_idle == Some(w.sent) {
                    return Ok(());
                }
                last_idle = Some(w.sent);
                continue;
            }
            last_idle = None;
            let live = w.sent as i128 - w.completed as i128 - w.buffered as i128;
            if w.buffered > 0 && live <= 0 {
                self.flush_everywhere()?;
                continue;
            }
            if Instant::now() >= deadline {
                return Err(Error::Stall(self.stall_report(&w)));
            }
            thread::sleep(backoff);
            backoff = (backoff * 2).min(Duration::from_millis(5));
        }
    }

    fn stall_report(&self, w: &Wave) -> String {
        let stuck: Vec<&str> = self
            .shared
            .stages
            .iter()
            .zip(&w.stages)
            .filter(|(_, l)| l[0] + l[1] > 0)
            .map(|(s, _)| s.name.as_str())
            .collect();
        let mut msg = format!(
            "{} of {} envelopes outstanding after {:?}; stalled stages: [{}];",
            w.sent - w.completed.min(w.sent),
            w.sent,
            self.shared.options.barrier_timeout,
            stuck.join(", ")
        );
        for (s, l) in self.shared.stages.iter().zip(&w.stages) {
            let _ = write!(msg, " {}: queued={} active={} buffered={};", s.name, l[0], l[1], l[2]);
        }
        msg
    }

    /// Queue state per stage, including remote processes.
    pub fn stage_loads(&self) -> Result<Vec<StageLoad>> {
        let w = self.wave()?;
        Ok(self
            .shared
            .stages
            .iter()
            .zip(&w.stages)
            .map(|(s, l)| StageLoad {
                name: s.name.clone(),
                queued: l[0],
                active: l[1],
                buffered: l[2],
            })
            .collect())
    }

    /// Counters summed over all processes.
    pub fn counters_snapshot(&self) -> Result<TrafficCounters> {
        let mut out = TrafficCounters {
            streams: self
                .shared
                .streams
                .iter()
                .map(|s| StreamTraffic {
                    name: s.name.clone(),
                    ..Default::default()
                })
                .collect(),
        };
        for (i, c) in self.shared.counters.iter().enumerate() {
            out.add_raw(i, c.load());
        }
        for p in self.remotes() {
            let st = self.shared.net.as_ref().unwrap().status(p)?;
            for (i, raw) in st.streams.iter().enumerate().take(out.streams.len()) {
                out.add_raw(i, *raw);
            }
        }
        Ok(out)
    }

    /// Handler failures recorded since the last call, from all processes.
    pub fn take_errors(&self) -> Result<Vec<String>> {
        let mut errs = self.shared.take_local_errors();
        for p in self.remotes() {
            for e in self.shared.net.as_ref().unwrap().take_errors(p)? {
                errs.push(format!("process {p}: {e}"));
            }
        }
        Ok(errs)
    }

    /// Sends an application request to the app handler of `process`.
    pub fn app_request(&self, process: usize, payload: &[u8]) -> Result<Vec<u8>> {
        if process == self.shared.process {
            let app = self.shared.app.as_ref().ok_or_else(|| state("no app handler registered"))?;
            return app(payload);
        }
        match &self.shared.net {
            Some(net) => net.app(process, payload),
            None => Err(param(format!("no process {process}"))),
        }
    }

    pub fn processes(&self) -> usize {
        self.shared.net.as_ref().map_or(1, Net::processes)
    }

    /// Blocks until a peer asks this process to shut down or its control
    /// channel closes. Returns immediately for the in-process transport.
    pub fn wait_for_shutdown(&self) {
        if let Some(net) = &self.shared.net {
            net.wait_for_shutdown();
        }
    }
}

impl Drop for Runtime {
    fn drop(&mut self) {
        for p in self.remotes() {
            let _ = self.shared.net.as_ref().unwrap().shutdown_peer(p);
        }
        self.shared.close_inboxes();
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
        if let Some(net) = &self.shared.net {
            net.stop();
        }
    }
}
