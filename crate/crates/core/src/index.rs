//! Single-process LSH index. This is the reference the distributed pipeline
//! is checked against, so its candidate order is part of the contract:
//! probes are visited by `(probe rank, table)` and bucket contents in
//! ascending object id.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::lsh::{BucketId, FeatureVector, LshFamily, ObjId};
use crate::probe::probe_sequence;
use crate::rank::{sq_dist, top_k, Neighbor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchParams {
    pub k: usize,
    /// Probes per table (T).
    pub probes: usize,
    #[serde(default)]
    pub candidate_cap: Option<usize>,
}

impl SearchParams {
    pub fn new(k: usize, probes: usize) -> Self {
        Self {
            k,
            probes,
            candidate_cap: None,
        }
    }

    pub fn with_cap(mut self, cap: usize) -> Self {
        self.candidate_cap = Some(cap);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(param("k must be >= 1"));
        }
        if self.probes == 0 {
            return Err(param("probes per table must be >= 1"));
        }
        if let Some(cap) = self.candidate_cap {
            if cap < self.k {
                return Err(param(format!("candidate cap {cap} is smaller than k = {}", self.k)));
            }
        }
        Ok(())
    }
}

/// A probe addressed to a bucket store.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ProbeRef {
    pub bucket: BucketId,
    pub rank: u32,
}

/// All `L x T` probes of a query, in visiting order.
pub fn plan_probes(family: &LshFamily, q: &FeatureVector, probes: usize) -> Result<Vec<ProbeRef>> {
    let mut out = Vec::with_capacity(family.tables() * probes);
    for table in 0..family.tables() {
        for (rank, key) in probe_sequence(family, table, q, probes)?.into_iter().enumerate() {
            out.push(ProbeRef {
                bucket: key.id(),
                rank: rank as u32,
            });
        }
    }
    sort_probes(&mut out);
    Ok(out)
}

pub(crate) fn sort_probes(probes: &mut [ProbeRef]) {
    probes.sort_by_key(|p| (p.rank, p.bucket.table));
}

/// Walks `probes` in order, collecting distinct entries until `cap` is hit.
/// `lookup` yields bucket contents sorted by object id.
pub(crate) fn gather<'a, T, L, K>(probes: &[ProbeRef], cap: Option<usize>, lookup: L, id_of: K) -> Vec<T>
where
    T: Copy + 'a,
    L: Fn(&BucketId) -> Option<&'a [T]>,
    K: Fn(&T) -> ObjId,
{
    let limit = cap.unwrap_or(usize::MAX);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    'probes: for p in probes {
        let Some(entries) = lookup(&p.bucket) else {
            continue;
        };
        for e in entries {
            if out.len() >= limit {
                break 'probes;
            }
            if seen.insert(id_of(e)) {
                out.push(*e);
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub neighbors: Vec<Neighbor>,
    /// Distinct candidates ranked.
    pub candidates: usize,
}

/// `L` tables of bucket -> object ids over an in-memory point store.
pub struct SequentialIndex {
    family: Arc<LshFamily>,
    buckets: HashMap<BucketId, Vec<ObjId>>,
    points: HashMap<ObjId, Vec<f32>>,
}

impl SequentialIndex {
    pub fn build(family: Arc<LshFamily>, data: &[FeatureVector]) -> Result<Self> {
        let mut buckets: HashMap<BucketId, Vec<ObjId>> = HashMap::new();
        let mut points = HashMap::with_capacity(data.len());
        for v in data {
            for key in family.hash_all(v)? {
                buckets.entry(key.id()).or_default().push(v.id);
            }
            if points.insert(v.id, v.coords.clone()).is_some() {
                return Err(param(format!("duplicate object id {}", v.id)));
            }
        }
        for ids in buckets.values_mut() {
            ids.sort_unstable();
        }
        Ok(Self {
            family,
            buckets,
            points,
        })
    }

    pub fn family(&self) -> &Arc<LshFamily> {
        &self.family
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn bucket(&self, id: &BucketId) -> Option<&[ObjId]> {
        self.buckets.get(id).map(Vec::as_slice)
    }

    pub fn search(&self, q: &FeatureVector, params: &SearchParams) -> Result<SearchOutcome> {
        params.validate()?;
        if self.is_empty() {
            return Ok(SearchOutcome {
                neighbors: Vec::new(),
                candidates: 0,
            });
        }
        let probes = plan_probes(&self.family, q, params.probes)?;
        let cands = gather(&probes, params.candidate_cap, |b| self.bucket(b), |&id| id);
        let ranked = cands
            .iter()
            .map(|id| Neighbor::new(*id, sq_dist(&q.coords, &self.points[id])));
        Ok(SearchOutcome {
            neighbors: top_k(ranked, params.k),
            candidates: cands.len(),
        })
    }
}

pub fn sequential_search(index: &SequentialIndex, q: &FeatureVector, params: &SearchParams) -> Result<Vec<Neighbor>> {
    Ok(index.search(q, params)?.neighbors)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lsh::sample_family;

    fn grid(n: u64, dim: usize) -> Vec<FeatureVector> {
        (0..n)
            .map(|i| {
                FeatureVector::new(
                    i,
                    (0..dim)
                        .map(|d| ((i * 31 + d as u64 * 17) % 97) as f32 * 0.1)
                        .collect(),
                )
            })
            .collect()
    }

    #[test]
    fn self_retrieval() {
        let f = Arc::new(sample_family(1, 4, 3, 6, 1.0).unwrap());
        let q = FeatureVector::new(42, vec![0.3, -1.0, 2.0, 5.5]);
        let idx = SequentialIndex::build(f, std::slice::from_ref(&q)).unwrap();
        let got = sequential_search(&idx, &q, &SearchParams::new(10, 1)).unwrap();
        assert_eq!(got, vec![Neighbor::new(42, 0.0)]);
    }

    #[test]
    fn empty_index_returns_nothing() {
        let f = Arc::new(sample_family(1, 4, 3, 6, 1.0).unwrap());
        let idx = SequentialIndex::build(f, &[]).unwrap();
        let q = FeatureVector::new(0, vec![0.0; 4]);
        assert!(sequential_search(&idx, &q, &SearchParams::new(3, 2)).unwrap().is_empty());
    }

    #[test]
    fn cap_bounds_ranked_candidates() {
        let l = 4;
        let f = Arc::new(sample_family(2, 8, l, 2, 50.0).unwrap());
        let data = grid(500, 8);
        let idx = SequentialIndex::build(f, &data).unwrap();
        let params = SearchParams::new(5, 1).with_cap(3 * l);
        for q in data.iter().take(20) {
            let out = idx.search(q, &params).unwrap();
            assert!(out.candidates <= 3 * l);
        }
        let uncapped = idx.search(&data[0], &SearchParams::new(5, 1)).unwrap();
        assert!(uncapped.candidates > 3 * l, "wide buckets should exceed the cap");
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(SearchParams::new(0, 1).validate().is_err());
        assert!(SearchParams::new(1, 0).validate().is_err());
        assert!(SearchParams::new(5, 1).with_cap(4).validate().is_err());
        assert!(SearchParams::new(5, 1).with_cap(5).validate().is_ok());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let f = Arc::new(sample_family(1, 2, 1, 1, 1.0).unwrap());
        let a = FeatureVector::new(1, vec![0.0, 0.0]);
        assert!(SequentialIndex::build(f, &[a.clone(), a]).is_err());
    }

    #[test]
    fn plan_visits_rank_major() {
        let f = sample_family(3, 4, 3, 4, 1.0).unwrap();
        let q = FeatureVector::new(0, vec![0.1, 0.2, 0.3, 0.4]);
        let plan = plan_probes(&f, &q, 2).unwrap();
        let order: Vec<(u32, u32)> = plan.iter().map(|p| (p.rank, p.bucket.table)).collect();
        assert_eq!(order, vec![(0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)]);
    }
}
