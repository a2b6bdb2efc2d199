//! The five-stage search pipeline on top of the dataflow runtime.
//!
//! ```text
//!  IR --STORE--------------------------> DP --LOCAL_TOPK--> AG
//!  IR --INDEX--> BI --CANDIDATES--------> DP
//!  QR --PROBES-> BI --BI_REPORT---------------------------> AG
//!  QR --QUERY_START-------------------------------------->  AG
//! ```
//!
//! IR and QR are sources driven by [`Pipeline::ingest`] and
//! [`Pipeline::search_batch`]. With the socket transport IR, QR and AG stay
//! in the coordinating process while BI and DP copies may be placed on
//! worker processes (see [`serve_worker`]).

pub mod messages;
pub mod stages;

use std::collections::BTreeMap;
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use serde::{Deserialize, Serialize};

use crate::codec::{Reader, Writer};
use crate::error::{param, state, Error, Result};
use crate::index::{plan_probes, ProbeRef, SearchParams};
use crate::lsh::{FeatureVector, LshFamily};
use crate::partition::{bucket_map, obj_map, PartitionStrategy};
use crate::runtime::wire::{encode_frame, read_frame};
use crate::runtime::{
    mod_map, Envelope, Handler, Runtime, RuntimeBuilder, RuntimeOptions, SocketPlan, TrafficCounters, Transport,
    CONTROL_STREAM,
};
use messages::{IndexEntry, Message, QueryProbes, QueryStart, StoreObject};
pub use stages::{Aggregator, BucketStore, Completed, PointStore, QueryResult, QueryStats};
use stages::*;

fn one() -> usize {
    1
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub copies: usize,
    #[serde(default = "one")]
    pub threads: usize,
}

impl StageSpec {
    pub fn new(copies: usize, threads: usize) -> Self {
        Self { copies, threads }
    }
}

/// Copy and thread counts of the five stages.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageTopology {
    pub ir: StageSpec,
    pub qr: StageSpec,
    pub bi: StageSpec,
    pub dp: StageSpec,
    pub ag: StageSpec,
}

impl StageTopology {
    /// Single IR, QR and AG copies with one worker thread each.
    pub fn new(n_bi: usize, n_dp: usize) -> Self {
        Self {
            ir: StageSpec::new(1, 1),
            qr: StageSpec::new(1, 1),
            bi: StageSpec::new(n_bi, 1),
            dp: StageSpec::new(n_dp, 1),
            ag: StageSpec::new(1, 1),
        }
    }

    /// `n_bi` BI copies and four DP copies per BI copy.
    pub fn with_ratio(n_bi: usize) -> Self {
        Self::new(n_bi, 4 * n_bi)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, s) in self.named() {
            if s.copies == 0 {
                return Err(param(format!("stage {name} needs at least one copy")));
            }
            if s.threads == 0 {
                return Err(param(format!("stage {name} needs at least one worker thread")));
            }
        }
        Ok(())
    }

    fn named(&self) -> [(&'static str, StageSpec); 5] {
        [
            ("IR", self.ir),
            ("QR", self.qr),
            ("BI", self.bi),
            ("DP", self.dp),
            ("AG", self.ag),
        ]
    }
}

impl Default for StageTopology {
    fn default() -> Self {
        Self::with_ratio(1)
    }
}

fn default_bind() -> String {
    "127.0.0.1:0".into()
}

/// Socket transport layout. Worker processes are either started as threads
/// of this process (`workers`) or already running `serve_worker` loops at
/// the `external` addresses. BI and DP copies are spread round-robin over
/// the workers unless placed explicitly (process 0 is the coordinator).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SocketSpec {
    #[serde(default = "default_bind")]
    pub bind: String,
    #[serde(default)]
    pub workers: usize,
    #[serde(default)]
    pub external: Vec<String>,
    #[serde(default)]
    pub bi_placement: Option<Vec<usize>>,
    #[serde(default)]
    pub dp_placement: Option<Vec<usize>>,
}

impl Default for SocketSpec {
    fn default() -> Self {
        Self {
            bind: default_bind(),
            workers: 0,
            external: Vec::new(),
            bi_placement: None,
            dp_placement: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum TransportSpec {
    #[default]
    InProcess,
    Socket(SocketSpec),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PipelineSpec {
    pub topology: StageTopology,
    #[serde(default)]
    pub runtime: RuntimeOptions,
    #[serde(default)]
    pub transport: TransportSpec,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct WorkerBoot {
    plan: SocketPlan,
    topology: StageTopology,
    runtime: RuntimeOptions,
}

const CMD_CONFIGURE: u64 = 0x100;
const REPLY: u64 = 1 << 63;
const APP_CENSUS: u8 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub stored: u64,
    /// Objects refused for having the wrong dimension.
    pub rejected: u64,
}

/// Objects per DP copy and index entries per BI copy.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreCensus {
    pub dp_objects: Vec<u64>,
    pub bi_entries: Vec<u64>,
}

pub struct SearchBatch {
    /// One entry per submitted query, in submission order.
    pub results: Vec<Result<QueryResult>>,
    /// Traffic generated by this batch.
    pub traffic: TrafficCounters,
    /// Handler failures reported while the batch ran.
    pub errors: Vec<String>,
}

impl SearchBatch {
    /// All results, or the first per-query error.
    pub fn into_results(self) -> Result<Vec<QueryResult>> {
        self.results.into_iter().collect()
    }
}

#[derive(Default)]
struct Locals {
    bi: Mutex<BTreeMap<usize, Arc<BucketStore>>>,
    dp: Mutex<BTreeMap<usize, Arc<PointStore>>>,
    ag: Mutex<BTreeMap<usize, Arc<Aggregator>>>,
    done: Arc<Completed>,
}

impl Locals {
    fn census_reply(&self) -> Vec<u8> {
        let mut w = Writer::default();
        let bi = self.bi.lock().unwrap();
        w.u32(bi.len() as u32);
        for (c, s) in bi.iter() {
            w.u32(*c as u32).u64(s.entries());
        }
        let dp = self.dp.lock().unwrap();
        w.u32(dp.len() as u32);
        for (c, s) in dp.iter() {
            w.u32(*c as u32).u64(s.len() as u64);
        }
        w.finish()
    }
}

fn handler_factory<S, M>(
    locals: &Arc<Locals>,
    pick: fn(&Locals) -> &Mutex<BTreeMap<usize, Arc<S>>>,
    make: M,
    wrap: fn(Arc<S>) -> Arc<dyn Handler>,
) -> impl FnMut(usize) -> Arc<dyn Handler> + Send + 'static
where
    S: Send + Sync + 'static,
    M: Fn(&Locals) -> S + Send + 'static,
{
    let locals = Arc::clone(locals);
    move |copy| {
        let s = Arc::new(make(&locals));
        pick(&locals).lock().unwrap().insert(copy, Arc::clone(&s));
        wrap(s)
    }
}

fn build_runtime(
    topology: &StageTopology,
    options: &RuntimeOptions,
    transport: Transport,
    locals: &Arc<Locals>,
    listener: Option<TcpListener>,
    adopted: Option<TcpStream>,
    control: Vec<(usize, TcpStream)>,
) -> Result<Runtime> {
    topology.validate()?;
    let mut b = RuntimeBuilder::new(options.clone()).transport(transport);
    let ir = b.register_source("IR", topology.ir.copies)?;
    let qr = b.register_source("QR", topology.qr.copies)?;
    let bi = b.register_stage(
        "BI",
        topology.bi.copies,
        topology.bi.threads,
        handler_factory(locals, |l| &l.bi, |_| BucketStore::default(), bi_handler),
    )?;
    let dp = b.register_stage(
        "DP",
        topology.dp.copies,
        topology.dp.threads,
        handler_factory(locals, |l| &l.dp, |_| PointStore::default(), dp_handler),
    )?;
    let ag = b.register_stage(
        "AG",
        topology.ag.copies,
        topology.ag.threads,
        handler_factory(locals, |l| &l.ag, |l| Aggregator::new(Arc::clone(&l.done)), ag_handler),
    )?;
    debug_assert_eq!([ir, qr, bi, dp, ag], [IR, QR, BI, DP, AG]);
    // Tags are chosen by the sender so that `tag mod copies` is the
    // destination: DP copy, BI copy (route hash or copy index), query id.
    for (name, from, to, id) in [
        ("STORE", ir, dp, STORE),
        ("INDEX", ir, bi, INDEX),
        ("PROBES", qr, bi, PROBES),
        ("QUERY_START", qr, ag, QUERY_START),
        ("CANDIDATES", bi, dp, CANDIDATES),
        ("BI_REPORT", bi, ag, BI_REPORT),
        ("LOCAL_TOPK", dp, ag, LOCAL_TOPK),
    ] {
        let got = b.register_stream(name, from, to, mod_map())?;
        debug_assert_eq!(got, id);
    }
    let l = Arc::clone(locals);
    b.app_handler(Arc::new(move |req: &[u8]| match req.first() {
        Some(&APP_CENSUS) => Ok(l.census_reply()),
        _ => Err(Error::Protocol("unknown app request".into())),
    }));
    if let Some(l) = listener {
        b.listener(l);
    }
    if let Some(c) = adopted {
        b.adopt(c);
    }
    for (p, c) in control {
        b.control_channel(p, c);
    }
    b.start()
}

fn write_control(conn: &TcpStream, tag: u64, payload: Vec<u8>) -> Result<()> {
    let mut buf = Vec::new();
    encode_frame(
        &Envelope {
            stream: CONTROL_STREAM,
            tag,
            src_copy: 0,
            seq: 0,
            payload,
        },
        &mut buf,
    );
    std::io::Write::write_all(&mut &*conn, &buf)?;
    Ok(())
}

fn read_control(conn: &TcpStream, tag: u64) -> Result<Vec<u8>> {
    let env = read_frame(&mut &*conn)?.ok_or_else(|| Error::Protocol("peer closed during bootstrap".into()))?;
    if env.stream != CONTROL_STREAM || env.tag != tag {
        return Err(Error::Protocol(format!("unexpected bootstrap frame with tag {:#x}", env.tag)));
    }
    Ok(env.payload)
}

/// Runs one worker process: waits for a coordinator to configure it over
/// the first accepted connection, hosts the BI and DP copies placed here and
/// returns once the coordinator shuts it down.
pub fn serve_worker(listener: TcpListener) -> Result<()> {
    let (conn, _) = listener.accept()?;
    conn.set_nodelay(true)?;
    let boot: WorkerBoot = serde_json::from_slice(&read_control(&conn, CMD_CONFIGURE)?)
        .map_err(|e| Error::Protocol(format!("bad worker configuration: {e}")))?;
    let ack = conn.try_clone()?;
    let locals = Arc::new(Locals::default());
    let built = build_runtime(
        &boot.topology,
        &boot.runtime,
        Transport::Socket(boot.plan),
        &locals,
        Some(listener),
        Some(conn),
        Vec::new(),
    );
    match built {
        Ok(rt) => {
            write_control(&ack, CMD_CONFIGURE | REPLY, vec![0])?;
            rt.wait_for_shutdown();
            Ok(())
        }
        Err(e) => {
            let mut reply = vec![1];
            reply.extend_from_slice(e.to_string().as_bytes());
            write_control(&ack, CMD_CONFIGURE | REPLY, reply)?;
            Err(e)
        }
    }
}

fn placement_for(explicit: &Option<Vec<usize>>, copies: usize, n_proc: usize, stage: &str) -> Result<Vec<usize>> {
    match explicit {
        Some(p) => {
            if p.len() != copies {
                return Err(param(format!("{stage} placement lists {} copies, topology has {copies}", p.len())));
            }
            if let Some(bad) = p.iter().find(|&&x| x >= n_proc) {
                return Err(param(format!("{stage} placement names process {bad} of {n_proc}")));
            }
            Ok(p.clone())
        }
        None if n_proc == 1 => Ok(vec![0; copies]),
        None => Ok((0..copies).map(|c| 1 + c % (n_proc - 1)).collect()),
    }
}

pub struct Pipeline {
    runtime: Option<Runtime>,
    family: Arc<LshFamily>,
    strategy: PartitionStrategy,
    topology: StageTopology,
    locals: Arc<Locals>,
    next_query: AtomicU64,
    workers: Vec<JoinHandle<Result<()>>>,
}

impl Pipeline {
    pub fn launch(family: Arc<LshFamily>, strategy: PartitionStrategy, spec: &PipelineSpec) -> Result<Self> {
        spec.topology.validate()?;
        strategy.check_against(&family)?;
        let locals = Arc::new(Locals::default());
        let mut workers = Vec::new();
        let runtime = match &spec.transport {
            TransportSpec::InProcess => build_runtime(
                &spec.topology,
                &spec.runtime,
                Transport::InProcess,
                &locals,
                None,
                None,
                Vec::new(),
            )?,
            TransportSpec::Socket(s) => {
                let listener = TcpListener::bind(&s.bind)?;
                let mut endpoints = vec![listener.local_addr()?.to_string()];
                for _ in 0..s.workers {
                    let l = TcpListener::bind("127.0.0.1:0")?;
                    endpoints.push(l.local_addr()?.to_string());
                    workers.push(
                        thread::Builder::new()
                            .name(format!("worker-{}", endpoints.len() - 1))
                            .spawn(move || serve_worker(l))?,
                    );
                }
                endpoints.extend(s.external.iter().cloned());
                let n_proc = endpoints.len();
                let t = &spec.topology;
                let placement = [
                    ("IR".to_string(), vec![0; t.ir.copies]),
                    ("QR".to_string(), vec![0; t.qr.copies]),
                    ("BI".to_string(), placement_for(&s.bi_placement, t.bi.copies, n_proc, "BI")?),
                    ("DP".to_string(), placement_for(&s.dp_placement, t.dp.copies, n_proc, "DP")?),
                    ("AG".to_string(), vec![0; t.ag.copies]),
                ]
                .into_iter()
                .collect();
                let plan = SocketPlan {
                    process: 0,
                    endpoints,
                    placement,
                };
                let mut control = Vec::new();
                for p in 1..n_proc {
                    let conn = crate::runtime::connect(&plan.endpoints[p])?;
                    let boot = WorkerBoot {
                        plan: SocketPlan {
                            process: p,
                            ..plan.clone()
                        },
                        topology: spec.topology,
                        runtime: spec.runtime.clone(),
                    };
                    let json = serde_json::to_vec(&boot).map_err(|e| state(e.to_string()))?;
                    write_control(&conn, CMD_CONFIGURE, json)?;
                    let ack = read_control(&conn, CMD_CONFIGURE | REPLY)?;
                    if ack.first() != Some(&0) {
                        return Err(state(format!(
                            "worker {p} failed to start: {}",
                            String::from_utf8_lossy(ack.get(1..).unwrap_or_default())
                        )));
                    }
                    control.push((p, conn));
                }
                build_runtime(
                    &spec.topology,
                    &spec.runtime,
                    Transport::Socket(plan),
                    &locals,
                    Some(listener),
                    None,
                    control,
                )?
            }
        };
        Ok(Self {
            runtime: Some(runtime),
            family,
            strategy,
            topology: spec.topology,
            locals,
            next_query: AtomicU64::new(0),
            workers,
        })
    }

    pub fn runtime(&self) -> &Runtime {
        self.runtime.as_ref().unwrap()
    }

    pub fn family(&self) -> &Arc<LshFamily> {
        &self.family
    }

    pub fn strategy(&self) -> &PartitionStrategy {
        &self.strategy
    }

    pub fn topology(&self) -> &StageTopology {
        &self.topology
    }

    fn fail_on_errors(&self, phase: &str) -> Result<()> {
        let errs = self.runtime().take_errors()?;
        if errs.is_empty() {
            return Ok(());
        }
        Err(state(format!(
            "{} handler error(s) during {phase}; first: {}",
            errs.len(),
            errs[0]
        )))
    }

    /// Sends every object to its DP copy and its `L` index entries to the
    /// owning BI copies, then waits for the stores to settle.
    pub fn ingest(&self, data: &[FeatureVector]) -> Result<IngestReport> {
        let rt = self.runtime();
        let n_ir = self.topology.ir.copies;
        let n_dp = self.topology.dp.copies;
        let chunk = data.len().div_ceil(n_ir).max(1);
        let rejected = AtomicU64::new(0);
        let outcome: Result<()> = thread::scope(|sc| {
            let handles: Vec<_> = data
                .chunks(chunk)
                .enumerate()
                .map(|(c, part)| {
                    let rejected = &rejected;
                    sc.spawn(move || -> Result<()> {
                        let src = rt.source(IR, c)?;
                        for v in part {
                            if v.dim() != self.family.dim() {
                                rejected.fetch_add(1, Ordering::Relaxed);
                                continue;
                            }
                            let dp = obj_map(&self.strategy, v, n_dp)?;
                            let store = Message::Store(StoreObject {
                                obj_id: v.id,
                                coords: v.coords.clone(),
                            });
                            src.send(STORE, dp as u64, store.encode())?;
                            for key in self.family.hash_all(v)? {
                                let entry = Message::IndexEntry(IndexEntry {
                                    bucket: key.id(),
                                    obj_id: v.id,
                                    dp_copy: dp as u32,
                                });
                                src.send(INDEX, key.route_hash, entry.encode())?;
                            }
                        }
                        Ok(())
                    })
                })
                .collect();
            handles
                .into_iter()
                .try_for_each(|h| h.join().unwrap_or_else(|_| Err(state("ingest thread panicked"))))
        });
        rt.drain_barrier()?;
        outcome?;
        self.fail_on_errors("ingest")?;
        let rejected = rejected.into_inner();
        Ok(IngestReport {
            stored: data.len() as u64 - rejected,
            rejected,
        })
    }

    /// Probe messages of one query, one per contacted BI copy.
    pub fn pack_probes(&self, q: &FeatureVector, params: &SearchParams) -> Result<Vec<(usize, Vec<ProbeRef>)>> {
        pack_probes(plan_probes(&self.family, q, params.probes)?, self.topology.bi.copies)
    }

    fn submit(&self, src: &crate::runtime::Source<'_>, qid: u64, q: &FeatureVector, params: &SearchParams) -> Result<()> {
        let groups = self.pack_probes(q, params)?;
        let k = params.k as u32;
        let start = Message::QueryStart(QueryStart {
            query_id: qid,
            n_bi: groups.len() as u32,
            k,
        });
        src.send(QUERY_START, qid, start.encode())?;
        for (bi, probes) in groups {
            let msg = Message::QueryProbes(QueryProbes {
                query_id: qid,
                k,
                cap: params.candidate_cap.map_or(0, |c| c.min(u32::MAX as usize) as u32),
                coords: q.coords.clone(),
                probes,
            });
            src.send(PROBES, bi as u64, msg.encode())?;
        }
        Ok(())
    }

    /// Runs `queries` through the pipeline and returns their results in
    /// submission order together with the traffic they caused.
    pub fn search_batch(&self, queries: &[FeatureVector], params: &SearchParams) -> Result<SearchBatch> {
        params.validate()?;
        let rt = self.runtime();
        let before = rt.counters_snapshot()?;
        let base = self.next_query.fetch_add(queries.len() as u64, Ordering::SeqCst);
        let n_qr = self.topology.qr.copies;
        let mut submitted: Vec<Option<Error>> = (0..queries.len()).map(|_| None).collect();
        thread::scope(|sc| {
            let handles: Vec<_> = (0..n_qr.min(queries.len()))
                .map(|c| {
                    sc.spawn(move || -> Vec<(usize, Error)> {
                        let src = match rt.source(QR, c) {
                            Ok(s) => s,
                            Err(e) => return vec![(c, e)],
                        };
                        let mut failed = Vec::new();
                        for i in (c..queries.len()).step_by(n_qr) {
                            let q = &queries[i];
                            if q.dim() != self.family.dim() {
                                failed.push((
                                    i,
                                    param(format!("query has {} dims, index has {}", q.dim(), self.family.dim())),
                                ));
                                continue;
                            }
                            if let Err(e) = self.submit(&src, base + i as u64, q, params) {
                                failed.push((i, e));
                            }
                        }
                        failed
                    })
                })
                .collect();
            for h in handles {
                for (i, e) in h.join().unwrap_or_default() {
                    submitted[i] = Some(e);
                }
            }
        });
        rt.drain_barrier()?;
        let errors = rt.take_errors()?;
        let after = rt.counters_snapshot()?;
        let n_ag = self.topology.ag.copies as u64;
        let ags = self.locals.ag.lock().unwrap().clone();
        let results = submitted
            .into_iter()
            .enumerate()
            .map(|(i, failed)| {
                let qid = base + i as u64;
                let agg = &ags[&((qid % n_ag) as usize)];
                if let Some(e) = failed {
                    agg.discard(qid);
                    return Err(e);
                }
                if let Some(r) = self.locals.done.take(qid) {
                    return Ok(r);
                }
                let mut detail = agg.describe(qid).unwrap_or_else(|| "no messages reached the aggregator".into());
                agg.discard(qid);
                if let Some(first) = errors.first() {
                    detail.push_str(&format!("; {} handler error(s), first: {first}", errors.len()));
                }
                Err(Error::Incomplete { query_id: qid, detail })
            })
            .collect();
        Ok(SearchBatch {
            results,
            traffic: after.since(&before),
            errors,
        })
    }

    /// Per-copy store sizes gathered from every process.
    pub fn census(&self) -> Result<StoreCensus> {
        let rt = self.runtime();
        let mut out = StoreCensus {
            dp_objects: vec![0; self.topology.dp.copies],
            bi_entries: vec![0; self.topology.bi.copies],
        };
        for p in 0..rt.processes() {
            let raw = rt.app_request(p, &[APP_CENSUS])?;
            let mut r = Reader::new(&raw);
            for _ in 0..r.count(12)? {
                let c = r.u32()? as usize;
                *out.bi_entries.get_mut(c).ok_or_else(|| Error::Protocol("census names unknown BI copy".into()))? = r.u64()?;
            }
            for _ in 0..r.count(12)? {
                let c = r.u32()? as usize;
                *out.dp_objects.get_mut(c).ok_or_else(|| Error::Protocol("census names unknown DP copy".into()))? = r.u64()?;
            }
            r.finish()?;
        }
        Ok(out)
    }

    pub fn counters(&self) -> Result<TrafficCounters> {
        self.runtime().counters_snapshot()
    }
}

impl Drop for Pipeline {
    fn drop(&mut self) {
        drop(self.runtime.take());
        for w in self.workers.drain(..) {
            match w.join() {
                Ok(Err(e)) => log::warn!("worker exited with error: {e}"),
                Err(_) => log::warn!("worker thread panicked"),
                Ok(Ok(())) => {}
            }
        }
    }
}

/// Groups a query's probes by destination BI copy, keeping visiting order
/// within each group. Copies ascend.
pub fn pack_probes(probes: Vec<ProbeRef>, n_bi: usize) -> Result<Vec<(usize, Vec<ProbeRef>)>> {
    if n_bi == 0 {
        return Err(param("n_bi must be >= 1"));
    }
    let mut groups: BTreeMap<usize, Vec<ProbeRef>> = BTreeMap::new();
    for p in probes {
        groups.entry(bucket_map(&p.bucket, n_bi)).or_default().push(p);
    }
    Ok(groups.into_iter().collect())
}
