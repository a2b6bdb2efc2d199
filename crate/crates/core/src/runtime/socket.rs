//! Stream-socket transport between runtime processes.
//!
//! Data connections are opened per (source copy, destination process) and
//! carry batches as back-to-back frames. Process 0 additionally holds a
//! control connection to every other process over which it polls counters,
//! requests flushes and forwards application requests. Control requests and
//! replies are frames on [`CONTROL_STREAM`] whose tag is the command.

use std::collections::HashMap;
use std::io::{BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use super::wire::{encode_frame, read_frame};
use super::{Envelope, ProcessStatus, Shared, SocketPlan, CONTROL_STREAM};
use crate::codec::{Reader, Writer};
use crate::error::{param, Error, Result};

const CMD_STATUS: u64 = 1;
const CMD_FLUSH: u64 = 2;
const CMD_TAKE_ERRORS: u64 = 3;
const CMD_APP: u64 = 4;
const CMD_SHUTDOWN: u64 = 5;
const REPLY: u64 = 1 << 63;

const CONNECT_PATIENCE: Duration = Duration::from_secs(20);
const CONTROL_TIMEOUT: Duration = Duration::from_secs(300);

struct ControlConn {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    next_seq: u64,
}

pub(crate) struct Net {
    process: usize,
    endpoints: Vec<String>,
    listener: TcpListener,
    local_addr: SocketAddr,
    data: Mutex<HashMap<(usize, usize), Arc<Mutex<TcpStream>>>>,
    control: Mutex<HashMap<usize, Arc<Mutex<ControlConn>>>>,
    served: Mutex<Vec<TcpStream>>,
    acceptor: Mutex<Option<JoinHandle<()>>>,
    readers: Mutex<Vec<JoinHandle<()>>>,
    stopping: AtomicBool,
    shutdown: Mutex<bool>,
    shutdown_cv: Condvar,
}

pub(crate) fn connect(addr: &str) -> Result<TcpStream> {
    let deadline = Instant::now() + CONNECT_PATIENCE;
    loop {
        let err = match addr.to_socket_addrs() {
            Ok(mut addrs) => match addrs.next() {
                Some(a) => match TcpStream::connect(a) {
                    Ok(s) => {
                        s.set_nodelay(true)?;
                        return Ok(s);
                    }
                    Err(e) => e,
                },
                None => return Err(param(format!("endpoint {addr} resolves to nothing"))),
            },
            Err(e) => e,
        };
        if Instant::now() >= deadline {
            return Err(Error::Io(std::io::Error::new(err.kind(), format!("connecting to {addr}: {err}"))));
        }
        thread::sleep(Duration::from_millis(20));
    }
}

impl Net {
    pub fn new(plan: &SocketPlan, listener: Option<TcpListener>, control: Vec<(usize, TcpStream)>) -> Result<Self> {
        let listener = match listener {
            Some(l) => l,
            None => TcpListener::bind(&plan.endpoints[plan.process])?,
        };
        let local_addr = listener.local_addr()?;
        let mut ctl = HashMap::new();
        for (p, conn) in control {
            ctl.insert(p, Arc::new(Mutex::new(control_conn(conn)?)));
        }
        Ok(Self {
            process: plan.process,
            endpoints: plan.endpoints.clone(),
            listener,
            local_addr,
            data: Mutex::new(HashMap::new()),
            control: Mutex::new(ctl),
            served: Mutex::new(Vec::new()),
            acceptor: Mutex::new(None),
            readers: Mutex::new(Vec::new()),
            stopping: AtomicBool::new(false),
            shutdown: Mutex::new(false),
            shutdown_cv: Condvar::new(),
        })
    }

    pub fn processes(&self) -> usize {
        self.endpoints.len()
    }

    pub fn send_batch(&self, src: usize, process: usize, batch: &[Envelope]) -> Result<()> {
        let conn = {
            let mut data = self.data.lock().unwrap();
            match data.get(&(src, process)) {
                Some(c) => Arc::clone(c),
                None => {
                    let c = Arc::new(Mutex::new(connect(&self.endpoints[process])?));
                    data.insert((src, process), Arc::clone(&c));
                    c
                }
            }
        };
        let mut buf = Vec::with_capacity(batch.iter().map(|e| 26 + e.payload.len()).sum());
        for env in batch {
            encode_frame(env, &mut buf);
        }
        conn.lock().unwrap().write_all(&buf)?;
        Ok(())
    }

    fn request(&self, process: usize, cmd: u64, payload: Vec<u8>) -> Result<Vec<u8>> {
        if process == self.process || process >= self.endpoints.len() {
            return Err(param(format!("no remote process {process}")));
        }
        let conn = {
            let mut ctl = self.control.lock().unwrap();
            match ctl.get(&process) {
                Some(c) => Arc::clone(c),
                None => {
                    let c = Arc::new(Mutex::new(control_conn(connect(&self.endpoints[process])?)?));
                    ctl.insert(process, Arc::clone(&c));
                    c
                }
            }
        };
        let mut c = conn.lock().unwrap();
        let seq = c.next_seq;
        c.next_seq += 1;
        let mut buf = Vec::new();
        encode_frame(
            &Envelope {
                stream: CONTROL_STREAM,
                tag: cmd,
                src_copy: self.process as u32,
                seq,
                payload,
            },
            &mut buf,
        );
        c.writer.write_all(&buf)?;
        let reply = read_frame(&mut c.reader)?
            .ok_or_else(|| Error::Protocol(format!("process {process} closed its control channel")))?;
        if reply.stream != CONTROL_STREAM || reply.tag != (cmd | REPLY) || reply.seq != seq {
            return Err(Error::Protocol(format!(
                "unexpected control reply from process {process}: tag {:#x} seq {}",
                reply.tag, reply.seq
            )));
        }
        Ok(reply.payload)
    }

    pub fn status(&self, process: usize) -> Result<ProcessStatus> {
        decode_status(&self.request(process, CMD_STATUS, Vec::new())?)
    }

    pub fn flush(&self, process: usize) -> Result<()> {
        self.request(process, CMD_FLUSH, Vec::new()).map(drop)
    }

    pub fn take_errors(&self, process: usize) -> Result<Vec<String>> {
        let raw = self.request(process, CMD_TAKE_ERRORS, Vec::new())?;
        let mut r = Reader::new(&raw);
        let n = r.count(4)?;
        (0..n)
            .map(|_| Ok(String::from_utf8_lossy(r.bytes()?).into_owned()))
            .collect()
    }

    pub fn app(&self, process: usize, payload: &[u8]) -> Result<Vec<u8>> {
        let raw = self.request(process, CMD_APP, payload.to_vec())?;
        match raw.split_first() {
            Some((0, rest)) => Ok(rest.to_vec()),
            Some((_, rest)) => Err(Error::State(format!(
                "process {process}: {}",
                String::from_utf8_lossy(rest)
            ))),
            None => Err(Error::Protocol("empty app reply".into())),
        }
    }

    pub fn shutdown_peer(&self, process: usize) -> Result<()> {
        self.request(process, CMD_SHUTDOWN, Vec::new()).map(drop)
    }

    fn signal_shutdown(&self) {
        *self.shutdown.lock().unwrap() = true;
        self.shutdown_cv.notify_all();
    }

    pub fn wait_for_shutdown(&self) {
        let mut done = self.shutdown.lock().unwrap();
        while !*done {
            done = self.shutdown_cv.wait(done).unwrap();
        }
    }

    pub fn stop(&self) {
        self.stopping.store(true, Ordering::SeqCst);
        // Unblock the acceptor.
        let _ = TcpStream::connect(self.local_addr);
        if let Some(h) = self.acceptor.lock().unwrap().take() {
            let _ = h.join();
        }
        for s in self.served.lock().unwrap().drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
        let readers: Vec<_> = self.readers.lock().unwrap().drain(..).collect();
        for h in readers {
            let _ = h.join();
        }
        self.data.lock().unwrap().clear();
        self.control.lock().unwrap().clear();
    }
}

fn control_conn(conn: TcpStream) -> Result<ControlConn> {
    conn.set_nodelay(true)?;
    conn.set_read_timeout(Some(CONTROL_TIMEOUT))?;
    Ok(ControlConn {
        reader: BufReader::new(conn.try_clone()?),
        writer: conn,
        next_seq: 0,
    })
}

fn encode_status(st: &ProcessStatus) -> Vec<u8> {
    let mut w = Writer::default();
    w.u64(st.sent).u64(st.completed).u64(st.buffered);
    w.u32(st.streams.len() as u32);
    for s in &st.streams {
        for v in s {
            w.u64(*v);
        }
    }
    w.u32(st.stages.len() as u32);
    for s in &st.stages {
        for v in s {
            w.u64(*v);
        }
    }
    w.finish()
}

fn decode_status(raw: &[u8]) -> Result<ProcessStatus> {
    let mut r = Reader::new(raw);
    let mut st = ProcessStatus {
        sent: r.u64()?,
        completed: r.u64()?,
        buffered: r.u64()?,
        ..Default::default()
    };
    for _ in 0..r.count(32)? {
        st.streams.push([r.u64()?, r.u64()?, r.u64()?, r.u64()?]);
    }
    for _ in 0..r.count(24)? {
        st.stages.push([r.u64()?, r.u64()?, r.u64()?]);
    }
    r.finish()?;
    Ok(st)
}

pub(crate) fn start_serving(shared: &Arc<Shared>, adopted: Vec<TcpStream>) -> Result<()> {
    for conn in adopted {
        spawn_reader(shared, conn)?;
    }
    let sh = Arc::clone(shared);
    let h = thread::Builder::new()
        .name(format!("accept-{}", shared.process))
        .spawn(move || {
            let net = sh.net.as_ref().unwrap();
            for conn in net.listener.incoming() {
                if net.stopping.load(Ordering::SeqCst) {
                    break;
                }
                match conn {
                    Ok(c) => {
                        if let Err(e) = spawn_reader(&sh, c) {
                            sh.record_error(format!("serving connection: {e}"));
                        }
                    }
                    Err(e) => sh.record_error(format!("accept: {e}")),
                }
            }
        })?;
    *shared.net.as_ref().unwrap().acceptor.lock().unwrap() = Some(h);
    Ok(())
}

fn spawn_reader(shared: &Arc<Shared>, conn: TcpStream) -> Result<()> {
    conn.set_nodelay(true)?;
    let net = shared.net.as_ref().unwrap();
    net.served.lock().unwrap().push(conn.try_clone()?);
    let sh = Arc::clone(shared);
    let h = thread::Builder::new()
        .name(format!("conn-{}", shared.process))
        .spawn(move || serve(&sh, conn))?;
    net.readers.lock().unwrap().push(h);
    Ok(())
}

fn serve(shared: &Shared, conn: TcpStream) {
    let net = shared.net.as_ref().unwrap();
    let Ok(read_half) = conn.try_clone() else {
        return;
    };
    let mut reader = BufReader::with_capacity(1 << 16, read_half);
    let mut writer = conn;
    let mut control_seen = false;
    let mut batch = Vec::new();
    loop {
        match read_frame(&mut reader) {
            Ok(Some(env)) if env.stream == CONTROL_STREAM => {
                control_seen = true;
                let cmd = env.tag;
                let reply = control_reply(shared, &env);
                let mut buf = Vec::new();
                encode_frame(
                    &Envelope {
                        stream: CONTROL_STREAM,
                        tag: cmd | REPLY,
                        src_copy: shared.process as u32,
                        seq: env.seq,
                        payload: reply,
                    },
                    &mut buf,
                );
                if writer.write_all(&buf).is_err() {
                    break;
                }
                if cmd == CMD_SHUTDOWN {
                    net.signal_shutdown();
                }
            }
            Ok(Some(env)) => {
                batch.push(env);
                if reader.buffer().is_empty() || batch.len() >= 4096 {
                    if let Err(e) = shared.accept_remote(std::mem::take(&mut batch)) {
                        shared.record_error(format!("incoming batch: {e}"));
                    }
                }
            }
            Ok(None) => break,
            Err(e) => {
                if !net.stopping.load(Ordering::SeqCst) {
                    shared.record_error(format!("reading frames: {e}"));
                }
                break;
            }
        }
    }
    if !batch.is_empty() {
        if let Err(e) = shared.accept_remote(batch) {
            shared.record_error(format!("incoming batch: {e}"));
        }
    }
    if control_seen {
        net.signal_shutdown();
    }
}

fn control_reply(shared: &Shared, env: &Envelope) -> Vec<u8> {
    match env.tag {
        CMD_STATUS => encode_status(&shared.local_status()),
        CMD_FLUSH => {
            shared.flush_all();
            Vec::new()
        }
        CMD_TAKE_ERRORS => {
            let errs = shared.take_local_errors();
            let mut w = Writer::default();
            w.u32(errs.len() as u32);
            for e in &errs {
                w.bytes(e.as_bytes());
            }
            w.finish()
        }
        CMD_APP => {
            let res = match &shared.app {
                Some(app) => app(&env.payload),
                None => Err(Error::State("no app handler registered".into())),
            };
            match res {
                Ok(mut out) => {
                    out.insert(0, 0);
                    out
                }
                Err(e) => {
                    let mut out = vec![1];
                    out.extend_from_slice(e.to_string().as_bytes());
                    out
                }
            }
        }
        CMD_SHUTDOWN => Vec::new(),
        other => {
            shared.record_error(format!("unknown control command {other}"));
            Vec::new()
        }
    }
}
