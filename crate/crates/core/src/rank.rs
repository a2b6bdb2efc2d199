//! Distances and top-k selection.

use std::cmp::Ordering;
use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::lsh::{FeatureVector, ObjId};

/// A ranked candidate. Lists of neighbors are ordered by `(dist_sq, obj_id)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub obj_id: ObjId,
    pub dist_sq: f64,
}

impl Neighbor {
    pub fn new(obj_id: ObjId, dist_sq: f64) -> Self {
        Self { obj_id, dist_sq }
    }

    pub fn rank_cmp(&self, other: &Self) -> Ordering {
        self.dist_sq
            .total_cmp(&other.dist_sq)
            .then(self.obj_id.cmp(&other.obj_id))
    }
}

/// Squared Euclidean distance accumulated in double precision.
///
/// Callers guarantee equal lengths; extra coordinates of the longer slice are
/// ignored.
#[inline]
pub fn sq_dist(u: &[f32], v: &[f32]) -> f64 {
    u.iter()
        .zip(v)
        .map(|(&a, &b)| {
            let d = f64::from(a) - f64::from(b);
            d * d
        })
        .sum()
}

pub fn distance_sq(u: &FeatureVector, v: &FeatureVector) -> Result<f64> {
    if u.coords.len() != v.coords.len() {
        return Err(param(format!(
            "dimension mismatch: {} vs {}",
            u.coords.len(),
            v.coords.len()
        )));
    }
    Ok(sq_dist(&u.coords, &v.coords))
}

/// The `k` best candidates, deduplicated by object id, sorted ascending.
pub fn top_k<I>(candidates: I, k: usize) -> Vec<Neighbor>
where
    I: IntoIterator<Item = Neighbor>,
{
    let mut all: Vec<Neighbor> = candidates.into_iter().collect();
    if k == 0 || all.is_empty() {
        return Vec::new();
    }
    all.sort_unstable_by(Neighbor::rank_cmp);
    let mut seen = HashSet::with_capacity(k.min(all.len()));
    let mut out = Vec::with_capacity(k.min(all.len()));
    for n in all {
        if seen.insert(n.obj_id) {
            out.push(n);
            if out.len() == k {
                break;
            }
        }
    }
    out
}
