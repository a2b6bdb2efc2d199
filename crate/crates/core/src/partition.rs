//! `obj_map` / `bucket_map`: how objects are spread over DP copies and buckets
//! over BI copies.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{param, state, Result};
use crate::lsh::{BucketId, FeatureVector, LshFamily};

pub const DEFAULT_ZORDER_BITS: u32 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Mod,
    #[serde(alias = "z-order", alias = "z_order")]
    Zorder,
    #[serde(alias = "lsh-map", alias = "lshmap")]
    Lsh,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Mod => "mod",
            StrategyKind::Zorder => "zorder",
            StrategyKind::Lsh => "lsh",
        }
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mod" => Ok(StrategyKind::Mod),
            "zorder" | "z-order" | "z_order" => Ok(StrategyKind::Zorder),
            "lsh" | "lshmap" | "lsh-map" => Ok(StrategyKind::Lsh),
            other => Err(format!("unknown strategy {other:?} (expected mod, zorder or lsh)")),
        }
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Z-order placement: quantization box plus quantile cut points on the curve.
#[derive(Clone, Debug, PartialEq)]
pub struct ZOrderMap {
    pub bits: u32,
    pub mins: Vec<f64>,
    pub maxs: Vec<f64>,
    /// `n_dp - 1` non-decreasing curve positions; `None` until built.
    pub cuts: Option<Vec<u64>>,
}

impl ZOrderMap {
    pub fn unbuilt(bits: u32) -> Self {
        Self {
            bits,
            mins: Vec::new(),
            maxs: Vec::new(),
            cuts: None,
        }
    }

    pub fn code(&self, coords: &[f32]) -> Result<u64> {
        morton_code(coords, self.bits, &self.mins, &self.maxs)
    }
}

#[derive(Clone, Debug)]
pub enum PartitionStrategy {
    Mod,
    ZOrder(ZOrderMap),
    /// A single-table family, seeded independently of the index family.
    LshMap(Arc<LshFamily>),
}

impl PartitionStrategy {
    pub fn kind(&self) -> StrategyKind {
        match self {
            PartitionStrategy::Mod => StrategyKind::Mod,
            PartitionStrategy::ZOrder(_) => StrategyKind::Zorder,
            PartitionStrategy::LshMap(_) => StrategyKind::Lsh,
        }
    }

    pub fn lsh_map(seed: u64, dim: usize, functions: usize, width: f64) -> Result<Self> {
        let family = LshFamily::sample(crate::lsh::FamilyParams {
            seed,
            dim,
            tables: 1,
            functions,
            width,
        })?;
        Ok(PartitionStrategy::LshMap(Arc::new(family)))
    }

    /// Rejects an LSH map that shares its seed with the index family.
    pub fn check_against(&self, index_family: &LshFamily) -> Result<()> {
        if let PartitionStrategy::LshMap(f) = self {
            if f.seed() == index_family.seed() {
                return Err(param("LSH map family must use a seed different from the index family"));
            }
            if f.tables() != 1 {
                return Err(param("LSH map family must have exactly one table"));
            }
        }
        Ok(())
    }
}

/// Serializable description of a partition strategy, resolved against the
/// data and index family by [`StrategySpec::build`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    /// Seed of the LSH map family; derived from the index seed when absent.
    pub map_seed: Option<u64>,
    /// Functions of the LSH map; the index family's M when absent.
    pub map_functions: Option<usize>,
    /// Quantization width of the LSH map; the index family's w when absent.
    pub map_width: Option<f64>,
    pub zorder_bits: u32,
    /// Leading reference points used to fit the z-order box and cut points.
    pub zorder_sample: usize,
}

impl Default for StrategySpec {
    fn default() -> Self {
        Self {
            kind: StrategyKind::Mod,
            map_seed: None,
            map_functions: None,
            map_width: None,
            zorder_bits: DEFAULT_ZORDER_BITS,
            zorder_sample: 10_000,
        }
    }
}

impl StrategySpec {
    pub fn of(kind: StrategyKind) -> Self {
        Self {
            kind,
            ..Default::default()
        }
    }

    pub fn build(&self, data: &[FeatureVector], index: &LshFamily, n_dp: usize) -> Result<PartitionStrategy> {
        match self.kind {
            StrategyKind::Mod => Ok(PartitionStrategy::Mod),
            StrategyKind::Zorder => {
                let n = self.zorder_sample.min(data.len());
                build_zorder_ranges(&data[..n], n_dp, self.zorder_bits)
            }
            StrategyKind::Lsh => {
                let seed = self
                    .map_seed
                    .unwrap_or_else(|| index.seed().wrapping_add(0x9e37_79b9_7f4a_7c15));
                let functions = self.map_functions.unwrap_or(index.functions());
                let width = self.map_width.unwrap_or(index.width());
                let s = PartitionStrategy::lsh_map(seed, index.dim(), functions, width)?;
                s.check_against(index)?;
                Ok(s)
            }
        }
    }
}

/// Destination DP copy of `v`.
pub fn obj_map(strategy: &PartitionStrategy, v: &FeatureVector, n_dp: usize) -> Result<usize> {
    if n_dp == 0 {
        return Err(param("n_dp must be >= 1"));
    }
    match strategy {
        PartitionStrategy::Mod => Ok((v.id % n_dp as u64) as usize),
        PartitionStrategy::ZOrder(z) => {
            let cuts = z
                .cuts
                .as_ref()
                .ok_or_else(|| state("z-order ranges have not been built"))?;
            if cuts.len() + 1 != n_dp {
                return Err(state(format!(
                    "z-order ranges built for {} copies, asked for {n_dp}",
                    cuts.len() + 1
                )));
            }
            let code = z.code(&v.coords)?;
            // (lo, hi] ranges: equal cut points resolve to the lowest index
            Ok(cuts.partition_point(|&c| c < code))
        }
        PartitionStrategy::LshMap(f) => {
            let key = f.hash_point(0, v)?;
            Ok((key.route_hash % n_dp as u64) as usize)
        }
    }
}

/// Destination BI copy of a bucket. `n_bi` must be non-zero.
pub fn bucket_map(bucket: &BucketId, n_bi: usize) -> usize {
    (bucket.route_hash % n_bi as u64) as usize
}

/// Number of leading dimensions that fit in a 64-bit code.
pub fn morton_dims(dim: usize, bits: u32) -> usize {
    if bits == 0 {
        return 0;
    }
    dim.min(64 / bits as usize)
}

fn quantize(x: f32, min: f64, max: f64, bits: u32) -> u64 {
    let cells = (1u64 << bits) as f64;
    let t = (f64::from(x) - min) / (max - min) * cells;
    if t.is_nan() || t < 0.0 {
        0
    } else {
        (t.floor() as u64).min((1u64 << bits) - 1)
    }
}

/// Quantized slots of the retained dimensions.
pub fn morton_slots(coords: &[f32], bits: u32, mins: &[f64], maxs: &[f64]) -> Result<Vec<u64>> {
    if bits == 0 || bits > 32 {
        return Err(param(format!("z-order bits must be in 1..=32, got {bits}")));
    }
    let dims = morton_dims(coords.len(), bits);
    if mins.len() < dims || maxs.len() < dims {
        return Err(param(format!("need bounds for {dims} dimensions, have {}", mins.len().min(maxs.len()))));
    }
    (0..dims)
        .map(|d| {
            if mins[d] < maxs[d] {
                Ok(quantize(coords[d], mins[d], maxs[d], bits))
            } else {
                Err(param(format!("dimension {d}: min {} is not below max {}", mins[d], maxs[d])))
            }
        })
        .collect()
}

/// Interleaves quantized slots; dimension 0 supplies the lowest bit of each group.
pub fn interleave(slots: &[u64], bits: u32) -> u64 {
    let dims = slots.len();
    let mut code = 0u64;
    for b in 0..bits as usize {
        for (k, &s) in slots.iter().enumerate() {
            code |= ((s >> b) & 1) << (b * dims + k);
        }
    }
    code
}

pub fn deinterleave(code: u64, bits: u32, dims: usize) -> Vec<u64> {
    let mut slots = vec![0u64; dims];
    for b in 0..bits as usize {
        for (k, s) in slots.iter_mut().enumerate() {
            *s |= ((code >> (b * dims + k)) & 1) << b;
        }
    }
    slots
}

pub fn morton_code(coords: &[f32], bits: u32, mins: &[f64], maxs: &[f64]) -> Result<u64> {
    let slots = morton_slots(coords, bits, mins, maxs)?;
    Ok(interleave(&slots, bits))
}

/// Bounds from `sample`, then `n_dp - 1` quantile cut points of its curve positions.
pub fn build_zorder_ranges(sample: &[FeatureVector], n_dp: usize, bits: u32) -> Result<PartitionStrategy> {
    if sample.is_empty() {
        return Err(param("z-order sample is empty"));
    }
    if n_dp == 0 {
        return Err(param("n_dp must be >= 1"));
    }
    if sample.len() < n_dp {
        return Err(state(format!(
            "z-order sample has {} points, fewer than {n_dp} copies",
            sample.len()
        )));
    }
    if bits == 0 || bits > 32 {
        return Err(param(format!("z-order bits must be in 1..=32, got {bits}")));
    }
    let dims = morton_dims(sample[0].dim(), bits);
    let mut mins = vec![f64::INFINITY; dims];
    let mut maxs = vec![f64::NEG_INFINITY; dims];
    for v in sample {
        if v.dim() != sample[0].dim() {
            return Err(param("z-order sample has mixed dimensions"));
        }
        for d in 0..dims {
            let x = f64::from(v.coords[d]);
            mins[d] = mins[d].min(x);
            maxs[d] = maxs[d].max(x);
        }
    }
    for d in 0..dims {
        if maxs[d] <= mins[d] {
            maxs[d] = mins[d] + 1.0;
        }
    }
    let mut map = ZOrderMap {
        bits,
        mins,
        maxs,
        cuts: None,
    };
    let mut codes = sample
        .iter()
        .map(|v| map.code(&v.coords))
        .collect::<Result<Vec<_>>>()?;
    codes.sort_unstable();
    map.cuts = Some((1..n_dp).map(|i| codes[i * codes.len() / n_dp]).collect());
    Ok(PartitionStrategy::ZOrder(map))
}

/// Per-copy object counts and the max-above-mean imbalance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PartitionCensus {
    pub counts: Vec<usize>,
    pub imbalance_pct: f64,
}

impl PartitionCensus {
    pub fn from_counts(counts: Vec<usize>) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if counts.is_empty() || total == 0 {
            return Err(param("census of an empty assignment"));
        }
        let mean = total as f64 / counts.len() as f64;
        let max = *counts.iter().max().unwrap() as f64;
        Ok(Self {
            imbalance_pct: 100.0 * (max - mean) / mean,
            counts,
        })
    }
}

pub fn census(assignments: &[usize], n: usize) -> Result<PartitionCensus> {
    if assignments.is_empty() {
        return Err(param("census of an empty assignment"));
    }
    let mut counts = vec![0usize; n];
    for &a in assignments {
        *counts
            .get_mut(a)
            .ok_or_else(|| param(format!("assignment {a} outside [0, {n})")))? += 1;
    }
    PartitionCensus::from_counts(counts)
}
