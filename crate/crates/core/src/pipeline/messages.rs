//! Message bodies exchanged between pipeline stages.
//!
//! Every body starts with a one-byte kind followed by fixed little-endian
//! fields; see `docs/wire-format.md` for the byte layouts.

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::index::ProbeRef;
use crate::lsh::{BucketId, ObjId};
use crate::rank::Neighbor;

pub const KIND_STORE: u8 = 1;
pub const KIND_INDEX_ENTRY: u8 = 2;
pub const KIND_QUERY_PROBES: u8 = 3;
pub const KIND_CANDIDATES: u8 = 4;
pub const KIND_LOCAL_TOPK: u8 = 5;
pub const KIND_QUERY_START: u8 = 6;
pub const KIND_BI_REPORT: u8 = 7;

#[derive(Clone, Debug, PartialEq)]
pub struct StoreObject {
    pub obj_id: ObjId,
    pub coords: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IndexEntry {
    pub bucket: BucketId,
    pub obj_id: ObjId,
    pub dp_copy: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryProbes {
    pub query_id: u64,
    pub k: u32,
    /// 0 when uncapped.
    pub cap: u32,
    pub coords: Vec<f32>,
    pub probes: Vec<ProbeRef>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Candidates {
    pub query_id: u64,
    pub k: u32,
    pub coords: Vec<f32>,
    pub obj_ids: Vec<ObjId>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalTopK {
    pub query_id: u64,
    pub neighbors: Vec<Neighbor>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct QueryStart {
    pub query_id: u64,
    pub n_bi: u32,
    pub k: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BiReport {
    pub query_id: u64,
    pub n_dp_messages: u32,
    pub n_candidates: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Store(StoreObject),
    IndexEntry(IndexEntry),
    QueryProbes(QueryProbes),
    Candidates(Candidates),
    LocalTopK(LocalTopK),
    QueryStart(QueryStart),
    BiReport(BiReport),
}

impl Message {
    pub fn kind(&self) -> u8 {
        match self {
            Message::Store(_) => KIND_STORE,
            Message::IndexEntry(_) => KIND_INDEX_ENTRY,
            Message::QueryProbes(_) => KIND_QUERY_PROBES,
            Message::Candidates(_) => KIND_CANDIDATES,
            Message::LocalTopK(_) => KIND_LOCAL_TOPK,
            Message::QueryStart(_) => KIND_QUERY_START,
            Message::BiReport(_) => KIND_BI_REPORT,
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.u8(self.kind());
        match self {
            Message::Store(m) => {
                w.u64(m.obj_id).u32(m.coords.len() as u32).f32s(&m.coords);
            }
            Message::IndexEntry(m) => {
                w.u32(m.bucket.table)
                    .u64(m.bucket.route_hash)
                    .u64(m.bucket.fingerprint)
                    .u64(m.obj_id)
                    .u32(m.dp_copy);
            }
            Message::QueryProbes(m) => {
                w.u64(m.query_id)
                    .u32(m.k)
                    .u32(m.cap)
                    .u32(m.coords.len() as u32)
                    .f32s(&m.coords)
                    .u32(m.probes.len() as u32);
                for p in &m.probes {
                    w.u32(p.bucket.table)
                        .u64(p.bucket.route_hash)
                        .u64(p.bucket.fingerprint)
                        .u32(p.rank);
                }
            }
            Message::Candidates(m) => {
                w.u64(m.query_id)
                    .u32(m.k)
                    .u32(m.coords.len() as u32)
                    .f32s(&m.coords)
                    .u32(m.obj_ids.len() as u32);
                for id in &m.obj_ids {
                    w.u64(*id);
                }
            }
            Message::LocalTopK(m) => {
                w.u64(m.query_id).u32(m.neighbors.len() as u32);
                for n in &m.neighbors {
                    w.u64(n.obj_id).f64(n.dist_sq);
                }
            }
            Message::QueryStart(m) => {
                w.u64(m.query_id).u32(m.n_bi).u32(m.k);
            }
            Message::BiReport(m) => {
                w.u64(m.query_id).u32(m.n_dp_messages).u64(m.n_candidates);
            }
        }
        w.finish()
    }

    pub fn decode(buf: &[u8]) -> Result<Message> {
        let mut r = Reader::new(buf);
        let msg = match r.u8()? {
            KIND_STORE => {
                let obj_id = r.u64()?;
                let d = r.count(4)?;
                Message::Store(StoreObject {
                    obj_id,
                    coords: r.f32s(d)?,
                })
            }
            KIND_INDEX_ENTRY => Message::IndexEntry(IndexEntry {
                bucket: BucketId {
                    table: r.u32()?,
                    route_hash: r.u64()?,
                    fingerprint: r.u64()?,
                },
                obj_id: r.u64()?,
                dp_copy: r.u32()?,
            }),
            KIND_QUERY_PROBES => {
                let query_id = r.u64()?;
                let k = r.u32()?;
                let cap = r.u32()?;
                let d = r.count(4)?;
                let coords = r.f32s(d)?;
                let n = r.count(24)?;
                let mut probes = Vec::with_capacity(n);
                for _ in 0..n {
                    let bucket = BucketId {
                        table: r.u32()?,
                        route_hash: r.u64()?,
                        fingerprint: r.u64()?,
                    };
                    probes.push(ProbeRef {
                        bucket,
                        rank: r.u32()?,
                    });
                }
                Message::QueryProbes(QueryProbes {
                    query_id,
                    k,
                    cap,
                    coords,
                    probes,
                })
            }
            KIND_CANDIDATES => {
                let query_id = r.u64()?;
                let k = r.u32()?;
                let d = r.count(4)?;
                let coords = r.f32s(d)?;
                let n = r.count(8)?;
                let obj_ids = (0..n).map(|_| r.u64()).collect::<Result<_>>()?;
                Message::Candidates(Candidates {
                    query_id,
                    k,
                    coords,
                    obj_ids,
                })
            }
            KIND_LOCAL_TOPK => {
                let query_id = r.u64()?;
                let n = r.count(16)?;
                let neighbors = (0..n)
                    .map(|_| Ok(Neighbor::new(r.u64()?, r.f64()?)))
                    .collect::<Result<_>>()?;
                Message::LocalTopK(LocalTopK { query_id, neighbors })
            }
            KIND_QUERY_START => Message::QueryStart(QueryStart {
                query_id: r.u64()?,
                n_bi: r.u32()?,
                k: r.u32()?,
            }),
            KIND_BI_REPORT => Message::BiReport(BiReport {
                query_id: r.u64()?,
                n_dp_messages: r.u32()?,
                n_candidates: r.u64()?,
            }),
            other => return Err(Error::Protocol(format!("unknown message kind {other}"))),
        };
        r.finish()?;
        Ok(msg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bucket(table: u32) -> BucketId {
        BucketId {
            table,
            route_hash: 0x1122_3344_5566_7788,
            fingerprint: 0x99AA_BBCC_DDEE_FF00,
        }
    }

    #[test]
    fn index_entry_layout() {
        let m = Message::IndexEntry(IndexEntry {
            bucket: bucket(3),
            obj_id: 42,
            dp_copy: 5,
        });
        let b = m.encode();
        assert_eq!(b.len(), 1 + 4 + 8 + 8 + 8 + 4);
        assert_eq!(b[0], 2);
        assert_eq!(&b[1..5], &[3, 0, 0, 0]);
        assert_eq!(&b[5..13], &0x1122_3344_5566_7788u64.to_le_bytes());
        assert_eq!(&b[21..29], &42u64.to_le_bytes());
        assert_eq!(&b[29..33], &[5, 0, 0, 0]);
        assert_eq!(Message::decode(&b).unwrap(), m);
    }

    #[test]
    fn store_layout() {
        let m = Message::Store(StoreObject {
            obj_id: 1,
            coords: vec![1.0, -2.0],
        });
        let b = m.encode();
        let mut expected = vec![1u8];
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        expected.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(b, expected);
    }

    #[test]
    fn query_probes_size() {
        let m = Message::QueryProbes(QueryProbes {
            query_id: 9,
            k: 10,
            cap: 0,
            coords: vec![0.5; 4],
            probes: vec![ProbeRef { bucket: bucket(0), rank: 0 }, ProbeRef { bucket: bucket(1), rank: 2 }],
        });
        let b = m.encode();
        assert_eq!(b.len(), 1 + 8 + 4 + 4 + 4 + 16 + 4 + 2 * 24);
        assert_eq!(Message::decode(&b).unwrap(), m);
    }

    #[test]
    fn malformed_bodies_rejected() {
        assert!(Message::decode(&[]).is_err());
        assert!(Message::decode(&[99]).is_err());
        let mut b = Message::QueryStart(QueryStart {
            query_id: 1,
            n_bi: 2,
            k: 3,
        })
        .encode();
        b.push(0);
        assert!(Message::decode(&b).is_err(), "trailing byte");
        // Candidate count larger than the body.
        let mut b = vec![KIND_CANDIDATES];
        b.extend_from_slice(&1u64.to_le_bytes());
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&0u32.to_le_bytes());
        b.extend_from_slice(&1000u32.to_le_bytes());
        assert!(Message::decode(&b).is_err());
    }

    fn arb_message() -> impl Strategy<Value = Message> {
        let coords = prop::collection::vec(-1e6f32..1e6, 0..20);
        let bucket = (any::<u32>(), any::<u64>(), any::<u64>()).prop_map(|(table, route_hash, fingerprint)| BucketId {
            table,
            route_hash,
            fingerprint,
        });
        prop_oneof![
            (any::<u64>(), coords.clone()).prop_map(|(obj_id, coords)| Message::Store(StoreObject { obj_id, coords })),
            (bucket.clone(), any::<u64>(), any::<u32>()).prop_map(|(bucket, obj_id, dp_copy)| {
                Message::IndexEntry(IndexEntry { bucket, obj_id, dp_copy })
            }),
            (
                any::<u64>(),
                any::<u32>(),
                any::<u32>(),
                coords.clone(),
                prop::collection::vec((bucket, any::<u32>()), 0..10)
            )
                .prop_map(|(query_id, k, cap, coords, p)| Message::QueryProbes(QueryProbes {
                    query_id,
                    k,
                    cap,
                    coords,
                    probes: p.into_iter().map(|(bucket, rank)| ProbeRef { bucket, rank }).collect(),
                })),
            (any::<u64>(), any::<u32>(), coords, prop::collection::vec(any::<u64>(), 0..30)).prop_map(
                |(query_id, k, coords, obj_ids)| Message::Candidates(Candidates {
                    query_id,
                    k,
                    coords,
                    obj_ids
                })
            ),
            (any::<u64>(), prop::collection::vec((any::<u64>(), 0.0f64..1e12), 0..10)).prop_map(|(query_id, n)| {
                Message::LocalTopK(LocalTopK {
                    query_id,
                    neighbors: n.into_iter().map(|(id, d)| Neighbor::new(id, d)).collect(),
                })
            }),
            (any::<u64>(), any::<u32>(), any::<u32>())
                .prop_map(|(query_id, n_bi, k)| Message::QueryStart(QueryStart { query_id, n_bi, k })),
            (any::<u64>(), any::<u32>(), any::<u64>()).prop_map(|(query_id, n_dp_messages, n_candidates)| {
                Message::BiReport(BiReport {
                    query_id,
                    n_dp_messages,
                    n_candidates,
                })
            }),
        ]
    }

    proptest! {
        #[test]
        fn messages_round_trip(m in arb_message()) {
            prop_assert_eq!(Message::decode(&m.encode()).unwrap(), m);
        }
    }
}
