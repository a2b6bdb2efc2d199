//! p-stable hash family for Euclidean distance.
//!
//! Each elementary function is `h(v) = floor((a . v + b) / w)` with `a` drawn
//! from N(0, I) and `b` uniform in `[0, w)`. `M` functions are concatenated
//! into one table function `g_j`, and `L` independent tables form the index.
//!
//! Coefficients come from a ChaCha stream keyed by the family seed and
//! positioned by `(table, function)`, so growing `L` or `M` never perturbs
//! the functions that already existed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{param, Result};
use crate::rank::sq_dist;

pub type ObjId = u64;

/// A point of the reference or query set.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureVector {
    pub id: ObjId,
    pub coords: Vec<f32>,
}

impl FeatureVector {
    pub fn new(id: ObjId, coords: Vec<f32>) -> Self {
        Self { id, coords }
    }

    pub fn dim(&self) -> usize {
        self.coords.len()
    }
}

/// Everything needed to regenerate a family bit-for-bit.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyParams {
    pub seed: u64,
    pub dim: usize,
    pub tables: usize,
    pub functions: usize,
    pub width: f64,
}

impl FamilyParams {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(param("dimension must be >= 1"));
        }
        if self.tables == 0 {
            return Err(param("table count L must be >= 1"));
        }
        if self.functions == 0 {
            return Err(param("functions per table M must be >= 1"));
        }
        if !(self.width.is_finite() && self.width > 0.0) {
            return Err(param(format!("width must be positive, got {}", self.width)));
        }
        Ok(())
    }
}

/// `L` concatenated hash functions of `M` projections each.
#[derive(Clone, Debug, PartialEq)]
pub struct LshFamily {
    params: FamilyParams,
    // Row (table * M + i) holds the d coordinates of a[table][i].
    projections: Vec<f64>,
    offsets: Vec<f64>,
}

/// Identity of a bucket inside the index: two keys denote the same bucket iff
/// all three fields match.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BucketId {
    pub table: u32,
    pub route_hash: u64,
    pub fingerprint: u64,
}

/// Output of `g_j(v)`: the `M` slot values plus the two hashes derived from them.
#[derive(Clone, Debug)]
pub struct BucketKey {
    pub table: u32,
    pub slots: Vec<i64>,
    pub route_hash: u64,
    pub fingerprint: u64,
}

impl BucketKey {
    pub fn from_slots(table: u32, slots: Vec<i64>) -> Self {
        let route_hash = hash_slots(ROUTE_SEED, table, &slots);
        let fingerprint = hash_slots(FINGERPRINT_SEED, table, &slots);
        Self {
            table,
            slots,
            route_hash,
            fingerprint,
        }
    }

    pub fn id(&self) -> BucketId {
        BucketId {
            table: self.table,
            route_hash: self.route_hash,
            fingerprint: self.fingerprint,
        }
    }
}

impl PartialEq for BucketKey {
    fn eq(&self, other: &Self) -> bool {
        self.id() == other.id()
    }
}

impl Eq for BucketKey {}

const ROUTE_SEED: u64 = 0x243F_6A88_85A3_08D3;
const FINGERPRINT_SEED: u64 = 0x1319_8A2E_0370_7344;

pub(crate) fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn hash_slots(seed: u64, table: u32, slots: &[i64]) -> u64 {
    let mut h = splitmix64(seed ^ u64::from(table));
    for &s in slots {
        h = splitmix64(h ^ s as u64);
    }
    splitmix64(h ^ slots.len() as u64)
}

fn chacha_key(seed: u64) -> [u8; 32] {
    let mut key = [0u8; 32];
    let mut state = seed;
    for chunk in key.chunks_exact_mut(8) {
        state = splitmix64(state);
        chunk.copy_from_slice(&state.to_le_bytes());
    }
    key
}

/// Samples `L x M` functions of dimension `d` with quantization width `w`.
pub fn sample_family(seed: u64, dim: usize, tables: usize, functions: usize, width: f64) -> Result<LshFamily> {
    LshFamily::sample(FamilyParams {
        seed,
        dim,
        tables,
        functions,
        width,
    })
}

impl LshFamily {
    pub fn sample(params: FamilyParams) -> Result<Self> {
        params.validate()?;
        let FamilyParams {
            seed,
            dim,
            tables,
            functions,
            width,
        } = params;
        let key = chacha_key(seed);
        let mut projections = Vec::with_capacity(tables * functions * dim);
        let mut offsets = Vec::with_capacity(tables * functions);
        for table in 0..tables {
            for func in 0..functions {
                let mut rng = ChaCha8Rng::from_seed(key);
                rng.set_stream(((table as u64) << 32) | func as u64);
                projections.extend((0..dim).map(|_| rng.sample::<f64, _>(StandardNormal)));
                let mut b = rng.random::<f64>() * width;
                // The product can round up to exactly w.
                while b >= width {
                    b = rng.random::<f64>() * width;
                }
                offsets.push(b);
            }
        }
        Ok(Self {
            params,
            projections,
            offsets,
        })
    }

    /// Builds a family from explicit coefficients. `projections[j][i]` is the
    /// direction of function `i` in table `j`.
    pub fn from_parts(
        seed: u64,
        width: f64,
        projections: Vec<Vec<Vec<f64>>>,
        offsets: Vec<Vec<f64>>,
    ) -> Result<Self> {
        let tables = projections.len();
        let functions = projections.first().map_or(0, Vec::len);
        let dim = projections
            .first()
            .and_then(|t| t.first())
            .map_or(0, Vec::len);
        let params = FamilyParams {
            seed,
            dim,
            tables,
            functions,
            width,
        };
        params.validate()?;
        if offsets.len() != tables
            || offsets.iter().any(|t| t.len() != functions)
            || projections
                .iter()
                .any(|t| t.len() != functions || t.iter().any(|a| a.len() != dim))
        {
            return Err(param("ragged projection/offset arrays"));
        }
        Ok(Self {
            params,
            projections: projections.into_iter().flatten().flatten().collect(),
            offsets: offsets.into_iter().flatten().collect(),
        })
    }

    pub fn params(&self) -> &FamilyParams {
        &self.params
    }

    pub fn dim(&self) -> usize {
        self.params.dim
    }

    pub fn tables(&self) -> usize {
        self.params.tables
    }

    pub fn functions(&self) -> usize {
        self.params.functions
    }

    pub fn width(&self) -> f64 {
        self.params.width
    }

    pub fn seed(&self) -> u64 {
        self.params.seed
    }

    pub fn projection(&self, table: usize, func: usize) -> &[f64] {
        let d = self.params.dim;
        let row = table * self.params.functions + func;
        &self.projections[row * d..(row + 1) * d]
    }

    pub fn offset(&self, table: usize, func: usize) -> f64 {
        self.offsets[table * self.params.functions + func]
    }

    fn check(&self, table: usize, coords: &[f32]) -> Result<()> {
        if table >= self.params.tables {
            return Err(param(format!("table {table} out of range [0, {})", self.params.tables)));
        }
        if coords.len() != self.params.dim {
            return Err(param(format!(
                "dimension mismatch: vector has {}, family expects {}",
                coords.len(),
                self.params.dim
            )));
        }
        Ok(())
    }

    /// `(a . v + b) / w` for every function of `table`, before flooring.
    pub(crate) fn projections_scaled(&self, table: usize, coords: &[f32]) -> Vec<f64> {
        let w = self.params.width;
        (0..self.params.functions)
            .map(|i| (dot(self.projection(table, i), coords) + self.offset(table, i)) / w)
            .collect()
    }

    pub fn hash_slots(&self, table: usize, coords: &[f32]) -> Result<Vec<i64>> {
        self.check(table, coords)?;
        Ok(self
            .projections_scaled(table, coords)
            .into_iter()
            .map(|x| x.floor() as i64)
            .collect())
    }

    pub fn hash_point(&self, table: usize, v: &FeatureVector) -> Result<BucketKey> {
        let slots = self.hash_slots(table, &v.coords)?;
        Ok(BucketKey::from_slots(table as u32, slots))
    }

    /// One key per table.
    pub fn hash_all(&self, v: &FeatureVector) -> Result<Vec<BucketKey>> {
        (0..self.params.tables).map(|j| self.hash_point(j, v)).collect()
    }
}

/// Free-function form of [`LshFamily::hash_point`].
pub fn hash_point(family: &LshFamily, table: usize, v: &FeatureVector) -> Result<BucketKey> {
    family.hash_point(table, v)
}

fn dot(a: &[f64], v: &[f32]) -> f64 {
    a.iter().zip(v).map(|(&x, &y)| x * f64::from(y)).sum()
}

/// Proposes a quantization width: four times the mean distance from a
/// deterministic sample of up to `sample_size` points to their nearest other
/// point in `data`.
pub fn suggest_width(data: &[FeatureVector], sample_size: usize, seed: u64) -> Result<f64> {
    if data.len() < 2 {
        return Err(param("need at least two points to suggest a width"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if data.len() <= sample_size {
        (0..data.len()).collect()
    } else {
        rand::seq::index::sample(&mut rng, data.len(), sample_size).into_vec()
    };
    let mut total = 0.0;
    let mut counted = 0usize;
    for &p in &picks {
        let q = &data[p];
        let best = data
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != p)
            .map(|(_, v)| sq_dist(&q.coords, &v.coords))
            .fold(f64::INFINITY, f64::min);
        if best.is_finite() {
            total += best.sqrt();
            counted += 1;
        }
    }
    let mean = total / counted as f64;
    if mean > 0.0 {
        Ok(4.0 * mean)
    } else {
        Err(param("all sampled points coincide with a neighbor; cannot derive a width"))
    }
}
