//! Per-copy state of the BI, DP and AG stages and the handlers that drive it.

use std::collections::hash_map::Entry;
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::messages::{BiReport, Candidates, IndexEntry, LocalTopK, Message, QueryProbes, QueryStart};
use crate::error::{param, Error, Result};
use crate::index::{gather, sort_probes, ProbeRef};
use crate::lsh::{BucketId, ObjId};
use crate::rank::{sq_dist, top_k, Neighbor};
use crate::runtime::{Envelope, Handler, Outbox, StageId, StreamId};

pub const IR: StageId = StageId(0);
pub const QR: StageId = StageId(1);
pub const BI: StageId = StageId(2);
pub const DP: StageId = StageId(3);
pub const AG: StageId = StageId(4);

pub const STORE: StreamId = StreamId(0);
pub const INDEX: StreamId = StreamId(1);
pub const PROBES: StreamId = StreamId(2);
pub const QUERY_START: StreamId = StreamId(3);
pub const CANDIDATES: StreamId = StreamId(4);
pub const BI_REPORT: StreamId = StreamId(5);
pub const LOCAL_TOPK: StreamId = StreamId(6);

/// Buckets of one BI copy: object ids and their DP copy, sorted by id.
#[derive(Default)]
pub struct BucketStore {
    buckets: RwLock<HashMap<BucketId, Vec<(ObjId, u32)>>>,
    entries: AtomicU64,
}

impl BucketStore {
    pub fn insert(&self, e: &IndexEntry) {
        let mut buckets = self.buckets.write().unwrap();
        let b = buckets.entry(e.bucket).or_default();
        let at = b.partition_point(|&(id, _)| id <= e.obj_id);
        b.insert(at, (e.obj_id, e.dp_copy));
        self.entries.fetch_add(1, Ordering::Relaxed);
    }

    pub fn entries(&self) -> u64 {
        self.entries.load(Ordering::Relaxed)
    }

    pub fn buckets(&self) -> usize {
        self.buckets.read().unwrap().len()
    }

    pub fn bucket(&self, id: &BucketId) -> Option<Vec<(ObjId, u32)>> {
        self.buckets.read().unwrap().get(id).cloned()
    }

    /// Distinct `(object, DP copy)` pairs reached by `probes`, visited in
    /// probe-rank order and cut at `cap`.
    pub fn candidates(&self, probes: &[ProbeRef], cap: Option<usize>) -> Vec<(ObjId, u32)> {
        let mut ordered = probes.to_vec();
        sort_probes(&mut ordered);
        let buckets = self.buckets.read().unwrap();
        gather(&ordered, cap, |b| buckets.get(b).map(Vec::as_slice), |e| e.0)
    }
}

/// Candidate ids grouped by DP copy, copies ascending.
pub fn group_by_dp(cands: &[(ObjId, u32)]) -> Vec<(u32, Vec<ObjId>)> {
    let mut groups: BTreeMap<u32, Vec<ObjId>> = BTreeMap::new();
    for &(id, dp) in cands {
        groups.entry(dp).or_default().push(id);
    }
    groups.into_iter().collect()
}

/// Feature vectors owned by one DP copy.
#[derive(Default)]
pub struct PointStore {
    points: RwLock<HashMap<ObjId, Vec<f32>>>,
}

impl PointStore {
    pub fn insert(&self, id: ObjId, coords: Vec<f32>) -> Result<()> {
        match self.points.write().unwrap().entry(id) {
            Entry::Occupied(_) => Err(param(format!("object {id} stored twice"))),
            Entry::Vacant(v) => {
                v.insert(coords);
                Ok(())
            }
        }
    }

    pub fn len(&self) -> usize {
        self.points.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn local_top_k(&self, q: &[f32], ids: &[ObjId], k: usize) -> Result<Vec<Neighbor>> {
        let points = self.points.read().unwrap();
        let mut ranked = Vec::with_capacity(ids.len());
        for id in ids {
            let p = points
                .get(id)
                .ok_or_else(|| Error::Protocol(format!("candidate {id} is not stored on this copy")))?;
            if p.len() != q.len() {
                return Err(param(format!("query has {} dims, object {id} has {}", q.len(), p.len())));
            }
            ranked.push(Neighbor::new(*id, sq_dist(q, p)));
        }
        Ok(top_k(ranked, k))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryStats {
    /// Distinct candidates ranked, summed over BI copies.
    pub candidates: u64,
    pub dp_touched: u32,
    pub bi_touched: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: u64,
    pub neighbors: Vec<Neighbor>,
    pub stats: QueryStats,
}

#[derive(Default)]
struct Pending {
    start: Option<QueryStart>,
    reports: u32,
    expected_lists: u64,
    lists: u64,
    candidates: u64,
    neighbors: Vec<Neighbor>,
    dp_touched: BTreeSet<u32>,
    bi_touched: BTreeSet<u32>,
}

impl Pending {
    fn complete(&self) -> bool {
        self.start
            .is_some_and(|s| self.reports == s.n_bi && self.lists == self.expected_lists)
    }

    fn describe(&self) -> String {
        match self.start {
            None => format!(
                "no query start; {} BI reports and {} local lists arrived",
                self.reports, self.lists
            ),
            Some(s) => format!(
                "{} of {} BI reports, {} of {} local lists",
                self.reports, s.n_bi, self.lists, self.expected_lists
            ),
        }
    }
}

/// Finished queries waiting to be collected by the driver.
#[derive(Default)]
pub struct Completed {
    results: Mutex<HashMap<u64, QueryResult>>,
}

impl Completed {
    pub fn take(&self, query_id: u64) -> Option<QueryResult> {
        self.results.lock().unwrap().remove(&query_id)
    }
}

const AG_SHARDS: usize = 16;

/// Per-query reduction state of one AG copy, sharded by query id.
pub struct Aggregator {
    shards: Vec<Mutex<HashMap<u64, Pending>>>,
    done: Arc<Completed>,
}

impl Aggregator {
    pub fn new(done: Arc<Completed>) -> Self {
        Self {
            shards: (0..AG_SHARDS).map(|_| Mutex::new(HashMap::new())).collect(),
            done,
        }
    }

    fn update(&self, query_id: u64, f: impl FnOnce(&mut Pending) -> Result<()>) -> Result<()> {
        let mut shard = self.shards[(query_id % AG_SHARDS as u64) as usize].lock().unwrap();
        let p = shard.entry(query_id).or_default();
        f(p)?;
        if let Some(s) = p.start {
            if p.neighbors.len() > s.k as usize {
                p.neighbors = top_k(std::mem::take(&mut p.neighbors), s.k as usize);
            }
        }
        if p.complete() {
            let p = shard.remove(&query_id).unwrap();
            let k = p.start.unwrap().k as usize;
            let result = QueryResult {
                query_id,
                neighbors: top_k(p.neighbors, k),
                stats: QueryStats {
                    candidates: p.candidates,
                    dp_touched: p.dp_touched.len() as u32,
                    bi_touched: p.bi_touched.len() as u32,
                },
            };
            self.done.results.lock().unwrap().insert(query_id, result);
        }
        Ok(())
    }

    pub fn on_start(&self, m: QueryStart) -> Result<()> {
        if m.n_bi == 0 {
            return Err(param(format!("query {} contacted no BI copy", m.query_id)));
        }
        self.update(m.query_id, |p| {
            if p.start.replace(m).is_some() {
                return Err(Error::Protocol(format!("query {} started twice", m.query_id)));
            }
            Ok(())
        })
    }

    pub fn on_report(&self, bi_copy: u32, m: BiReport) -> Result<()> {
        self.update(m.query_id, |p| {
            p.reports += 1;
            p.expected_lists += u64::from(m.n_dp_messages);
            p.candidates += m.n_candidates;
            p.bi_touched.insert(bi_copy);
            Ok(())
        })
    }

    pub fn on_local(&self, dp_copy: u32, m: LocalTopK) -> Result<()> {
        self.update(m.query_id, |p| {
            p.lists += 1;
            p.dp_touched.insert(dp_copy);
            p.neighbors.extend(m.neighbors);
            Ok(())
        })
    }

    /// Why `query_id` has not completed; `None` if nothing is pending.
    pub fn describe(&self, query_id: u64) -> Option<String> {
        let shard = self.shards[(query_id % AG_SHARDS as u64) as usize].lock().unwrap();
        shard.get(&query_id).map(Pending::describe)
    }

    pub fn discard(&self, query_id: u64) {
        self.shards[(query_id % AG_SHARDS as u64) as usize]
            .lock()
            .unwrap()
            .remove(&query_id);
    }

    pub fn pending(&self) -> usize {
        self.shards.iter().map(|s| s.lock().unwrap().len()).sum()
    }
}

fn unexpected(stage: &str, env: &Envelope, msg: &Message) -> Error {
    Error::Protocol(format!(
        "{stage} got message kind {} on stream {}",
        msg.kind(),
        env.stream.0
    ))
}

pub fn bi_handler(store: Arc<BucketStore>) -> Arc<dyn Handler> {
    Arc::new(move |env: Envelope, out: &mut Outbox<'_>| {
        match (env.stream, Message::decode(&env.payload)?) {
            (INDEX, Message::IndexEntry(e)) => store.insert(&e),
            (PROBES, Message::QueryProbes(q)) => handle_probes(&store, q, out)?,
            (_, m) => return Err(unexpected("BI", &env, &m)),
        }
        Ok(())
    })
}

fn handle_probes(store: &BucketStore, q: QueryProbes, out: &mut Outbox<'_>) -> Result<()> {
    let cap = (q.cap > 0).then_some(q.cap as usize);
    let cands = store.candidates(&q.probes, cap);
    let groups = group_by_dp(&cands);
    for (dp, obj_ids) in &groups {
        let msg = Message::Candidates(Candidates {
            query_id: q.query_id,
            k: q.k,
            coords: q.coords.clone(),
            obj_ids: obj_ids.clone(),
        });
        out.send(CANDIDATES, u64::from(*dp), msg.encode())?;
    }
    let report = Message::BiReport(BiReport {
        query_id: q.query_id,
        n_dp_messages: groups.len() as u32,
        n_candidates: cands.len() as u64,
    });
    out.send(BI_REPORT, q.query_id, report.encode())
}

pub fn dp_handler(store: Arc<PointStore>) -> Arc<dyn Handler> {
    Arc::new(move |env: Envelope, out: &mut Outbox<'_>| {
        match (env.stream, Message::decode(&env.payload)?) {
            (STORE, Message::Store(s)) => store.insert(s.obj_id, s.coords)?,
            (CANDIDATES, Message::Candidates(c)) => {
                let neighbors = store
                    .local_top_k(&c.coords, &c.obj_ids, c.k as usize)
                    .map_err(|e| Error::Protocol(format!("query {}: {e}", c.query_id)))?;
                let msg = Message::LocalTopK(LocalTopK {
                    query_id: c.query_id,
                    neighbors,
                });
                out.send(LOCAL_TOPK, c.query_id, msg.encode())?;
            }
            (_, m) => return Err(unexpected("DP", &env, &m)),
        }
        Ok(())
    })
}

pub fn ag_handler(agg: Arc<Aggregator>) -> Arc<dyn Handler> {
    Arc::new(move |env: Envelope, _: &mut Outbox<'_>| match (env.stream, Message::decode(&env.payload)?) {
        (QUERY_START, Message::QueryStart(m)) => agg.on_start(m),
        (BI_REPORT, Message::BiReport(m)) => agg.on_report(env.src_copy, m),
        (LOCAL_TOPK, Message::LocalTopK(m)) => agg.on_local(env.src_copy, m),
        (_, m) => Err(unexpected("AG", &env, &m)),
    })
}
