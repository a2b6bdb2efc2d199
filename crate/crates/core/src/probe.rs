//! Query-directed multi-probe sequences.
//!
//! For every slot of a table function the query sits at some fractional
//! position inside its quantization cell. Moving the slot by -1 costs the
//! distance to the lower cell boundary, +1 the distance to the upper one.
//! Perturbation sets are enumerated in ascending sum of squared boundary
//! distances with a min-heap driven by two moves on the sorted boundary list:
//! *shift* (replace the last element with its successor) and *expand* (append
//! the successor). Every subset is reached exactly once; subsets touching the
//! same slot twice are skipped.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use crate::error::{param, Result};
use crate::lsh::{BucketKey, FeatureVector, LshFamily};

/// One probe: the bucket, the slot deltas that produced it, and its score.
#[derive(Clone, Debug)]
pub struct Probe {
    pub key: BucketKey,
    pub perturbation: Vec<(usize, i64)>,
    pub score: f64,
}

#[derive(Clone, Copy, Debug)]
struct Boundary {
    dist: f64,
    slot: usize,
    delta: i64,
}

#[derive(Debug)]
struct PerturbSet {
    score: f64,
    members: Vec<u32>,
}

impl PartialEq for PerturbSet {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for PerturbSet {}

impl PartialOrd for PerturbSet {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for PerturbSet {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .total_cmp(&other.score)
            .then_with(|| self.members.cmp(&other.members))
    }
}

fn set_score(bounds: &[Boundary], members: &[u32]) -> f64 {
    members
        .iter()
        .map(|&m| {
            let d = bounds[m as usize].dist;
            d * d
        })
        .sum()
}

fn touches_slot_twice(bounds: &[Boundary], members: &[u32]) -> bool {
    members.iter().enumerate().any(|(i, &a)| {
        members[i + 1..]
            .iter()
            .any(|&b| bounds[a as usize].slot == bounds[b as usize].slot)
    })
}

/// Upper bound on distinct buckets reachable by +-1 perturbations: `3^M`.
pub fn max_probes(functions: usize) -> usize {
    u32::try_from(functions)
        .ok()
        .and_then(|m| 3usize.checked_pow(m))
        .unwrap_or(usize::MAX)
}

/// The first `t` probes for `q` in `table`, best first. The first entry is the
/// unperturbed bucket. Returns fewer than `t` entries only when all `3^M`
/// buckets are exhausted.
pub fn probe_plan(family: &LshFamily, table: usize, q: &FeatureVector, t: usize) -> Result<Vec<Probe>> {
    if t == 0 {
        return Err(param("probe count T must be >= 1"));
    }
    let base_slots = family.hash_slots(table, &q.coords)?;
    let scaled = family.projections_scaled(table, &q.coords);
    let table_id = table as u32;

    let mut out = Vec::with_capacity(t.min(max_probes(family.functions())));
    out.push(Probe {
        key: BucketKey::from_slots(table_id, base_slots.clone()),
        perturbation: Vec::new(),
        score: 0.0,
    });
    if t == 1 {
        return Ok(out);
    }

    let mut bounds: Vec<Boundary> = Vec::with_capacity(2 * scaled.len());
    for (slot, &x) in scaled.iter().enumerate() {
        let frac = x - x.floor();
        bounds.push(Boundary { dist: frac, slot, delta: -1 });
        bounds.push(Boundary { dist: 1.0 - frac, slot, delta: 1 });
    }
    bounds.sort_by(|a, b| {
        a.dist
            .total_cmp(&b.dist)
            .then(a.slot.cmp(&b.slot))
            .then(a.delta.cmp(&b.delta))
    });
    let n = bounds.len() as u32;

    let mut heap = BinaryHeap::new();
    heap.push(Reverse(PerturbSet {
        score: set_score(&bounds, &[0]),
        members: vec![0],
    }));
    while out.len() < t {
        let Some(Reverse(set)) = heap.pop() else {
            break;
        };
        let last = *set.members.last().expect("perturbation sets are never empty");
        if last + 1 < n {
            let mut shifted = set.members.clone();
            *shifted.last_mut().unwrap() = last + 1;
            let mut expanded = set.members.clone();
            expanded.push(last + 1);
            heap.push(Reverse(PerturbSet {
                score: set_score(&bounds, &shifted),
                members: shifted,
            }));
            heap.push(Reverse(PerturbSet {
                score: set_score(&bounds, &expanded),
                members: expanded,
            }));
        }
        if touches_slot_twice(&bounds, &set.members) {
            continue;
        }
        let mut slots = base_slots.clone();
        let mut perturbation: Vec<(usize, i64)> = set
            .members
            .iter()
            .map(|&m| {
                let b = bounds[m as usize];
                slots[b.slot] += b.delta;
                (b.slot, b.delta)
            })
            .collect();
        perturbation.sort_unstable();
        out.push(Probe {
            key: BucketKey::from_slots(table_id, slots),
            perturbation,
            score: set.score,
        });
    }
    Ok(out)
}

/// Bucket keys of [`probe_plan`].
pub fn probe_sequence(family: &LshFamily, table: usize, q: &FeatureVector, t: usize) -> Result<Vec<BucketKey>> {
    Ok(probe_plan(family, table, q, t)?
        .into_iter()
        .map(|p| p.key)
        .collect())
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;
    use crate::lsh::sample_family;

    fn query(dim: usize, seed: u64) -> FeatureVector {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        FeatureVector::new(0, (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect())
    }

    #[test]
    fn single_probe_is_plain_hash() {
        let f = sample_family(1, 8, 3, 4, 1.5).unwrap();
        let q = query(8, 2);
        for j in 0..3 {
            let probes = probe_sequence(&f, j, &q, 1).unwrap();
            assert_eq!(probes, vec![f.hash_point(j, &q).unwrap()]);
        }
    }

    #[test]
    fn small_m_probes_differ_in_named_slots() {
        let f = sample_family(4, 8, 1, 2, 2.0).unwrap();
        let q = query(8, 9);
        let plan = probe_plan(&f, 0, &q, 3).unwrap();
        assert_eq!(plan.len(), 3);
        let base = &plan[0].key;
        assert_eq!(*base, f.hash_point(0, &q).unwrap());
        for p in &plan[1..] {
            assert!(!p.perturbation.is_empty());
            for i in 0..2 {
                let delta = p
                    .perturbation
                    .iter()
                    .find(|&&(s, _)| s == i)
                    .map_or(0, |&(_, d)| d);
                assert_eq!(p.key.slots[i], base.slots[i] + delta);
            }
        }
        let distinct: HashSet<_> = plan.iter().map(|p| p.key.id()).collect();
        assert_eq!(distinct.len(), 3);
    }

    #[test]
    fn scores_are_non_decreasing_and_keys_distinct() {
        let f = sample_family(8, 16, 2, 10, 3.0).unwrap();
        let q = query(16, 1);
        let plan = probe_plan(&f, 1, &q, 200).unwrap();
        assert_eq!(plan.len(), 200);
        for w in plan.windows(2) {
            assert!(w[0].score <= w[1].score);
        }
        let distinct: HashSet<_> = plan.iter().map(|p| p.key.id()).collect();
        assert_eq!(distinct.len(), 200);
    }

    #[test]
    fn truncates_at_three_to_the_m() {
        let f = sample_family(2, 4, 1, 2, 1.0).unwrap();
        let q = query(4, 3);
        let plan = probe_plan(&f, 0, &q, 100).unwrap();
        assert_eq!(plan.len(), 9);
        let distinct: HashSet<_> = plan.iter().map(|p| p.key.slots.clone()).collect();
        assert_eq!(distinct.len(), 9);
        assert_eq!(max_probes(2), 9);
        assert_eq!(max_probes(200), usize::MAX);
    }

    #[test]
    fn enumeration_order_matches_brute_force() {
        // Oracle: enumerate all 3^M perturbation vectors and sort by score.
        let m = 4;
        let f = sample_family(21, 6, 1, m, 2.5).unwrap();
        let q = query(6, 4);
        let scaled = f.projections_scaled(0, &q.coords);
        let mut all: Vec<(f64, Vec<i64>)> = Vec::new();
        for code in 0..3usize.pow(m as u32) {
            let mut c = code;
            let mut deltas = vec![0i64; m];
            let mut score = 0.0;
            for (i, d) in deltas.iter_mut().enumerate() {
                *d = (c % 3) as i64 - 1;
                c /= 3;
                let frac = scaled[i] - scaled[i].floor();
                score += match *d {
                    -1 => frac * frac,
                    1 => (1.0 - frac) * (1.0 - frac),
                    _ => 0.0,
                };
            }
            all.push((score, deltas));
        }
        all.sort_by(|a, b| a.0.total_cmp(&b.0));
        let plan = probe_plan(&f, 0, &q, all.len()).unwrap();
        assert_eq!(plan.len(), all.len());
        for (p, (score, _)) in plan.iter().zip(&all) {
            assert!((p.score - score).abs() < 1e-12, "{} vs {}", p.score, score);
        }
    }

    #[test]
    fn prefix_property() {
        let f = sample_family(5, 12, 1, 8, 2.0).unwrap();
        let q = query(12, 5);
        let long = probe_sequence(&f, 0, &q, 40).unwrap();
        let short = probe_sequence(&f, 0, &q, 15).unwrap();
        assert_eq!(&long[..15], &short[..]);
    }

    #[test]
    fn zero_probes_rejected() {
        let f = sample_family(5, 12, 1, 8, 2.0).unwrap();
        assert!(probe_sequence(&f, 0, &query(12, 1), 0).is_err());
    }
}
