//! Vector files, synthetic data and exact nearest neighbors.
//!
//! Files use the dimension-prefixed record layout of the common ANN
//! benchmark sets: per record a little-endian `u32` dimension followed by
//! `d` elements (`f32` for fvecs, `u8` for bvecs, `i32` for ivecs).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{param, Error, Result};
use crate::lsh::{FeatureVector, ObjId};
use crate::rank::{sq_dist, top_k, Neighbor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ElemKind {
    Float32,
    Uint8,
    Int32,
}

impl ElemKind {
    pub fn size(self) -> usize {
        match self {
            ElemKind::Uint8 => 1,
            ElemKind::Float32 | ElemKind::Int32 => 4,
        }
    }

    /// Kind implied by a `.fvecs`, `.bvecs` or `.ivecs` extension.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path.extension().and_then(|e| e.to_str()) {
            Some("fvecs") => Ok(ElemKind::Float32),
            Some("bvecs") => Ok(ElemKind::Uint8),
            Some("ivecs") => Ok(ElemKind::Int32),
            _ => Err(param(format!(
                "cannot infer element kind of {}; expected .fvecs, .bvecs or .ivecs",
                path.display()
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VectorFile {
    pub path: PathBuf,
    pub kind: ElemKind,
    pub dim: usize,
    pub count: usize,
}

impl VectorFile {
    fn record_len(&self) -> u64 {
        4 + (self.dim * self.kind.size()) as u64
    }

    /// Inspects the header and length of `path`.
    pub fn open(path: impl AsRef<Path>, kind: ElemKind) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut f = File::open(&path)?;
        let len = f.metadata()?.len();
        if len == 0 {
            return Ok(Self {
                path,
                kind,
                dim: 0,
                count: 0,
            });
        }
        let mut hdr = [0u8; 4];
        read_at(&mut f, &mut hdr, 0, len)?;
        let dim = u32::from_le_bytes(hdr) as usize;
        if dim == 0 {
            return Err(Error::Format {
                offset: 0,
                msg: "record dimension is zero".into(),
            });
        }
        let rec = 4 + (dim * kind.size()) as u64;
        if len % rec != 0 {
            return Err(Error::Format {
                offset: len - len % rec,
                msg: format!("trailing partial record: file length {len} is not a multiple of {rec}"),
            });
        }
        Ok(Self {
            path,
            kind,
            dim,
            count: (len / rec) as usize,
        })
    }

    /// Opens with the kind implied by the extension.
    pub fn open_auto(path: impl AsRef<Path>) -> Result<Self> {
        let kind = ElemKind::from_path(path.as_ref())?;
        Self::open(path, kind)
    }
}

fn read_at(f: &mut impl Read, buf: &mut [u8], offset: u64, len: u64) -> Result<()> {
    f.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format {
                offset,
                msg: format!("truncated: need {} bytes, file has {len}", offset + buf.len() as u64),
            }
        } else {
            Error::Io(e)
        }
    })
}

/// Raw elements of records `range` (all records when `None`), checking every
/// record's dimension field.
fn read_raw(file: &VectorFile, range: Option<Range<usize>>) -> Result<(Range<usize>, Vec<u8>)> {
    let range = range.unwrap_or(0..file.count);
    if range.start > range.end || range.end > file.count {
        return Err(param(format!(
            "range {range:?} outside the {} records of {}",
            file.count,
            file.path.display()
        )));
    }
    let mut f = File::open(&file.path)?;
    let len = f.metadata()?.len();
    let rec = file.record_len();
    let start = range.start as u64 * rec;
    f.seek(SeekFrom::Start(start))?;
    let mut r = BufReader::with_capacity(1 << 20, f);
    let body = file.dim * file.kind.size();
    let mut out = Vec::with_capacity(range.len() * body);
    let mut hdr = [0u8; 4];
    for i in 0..range.len() {
        let off = start + i as u64 * rec;
        read_at(&mut r, &mut hdr, off, len)?;
        let d = u32::from_le_bytes(hdr) as usize;
        if d != file.dim {
            return Err(Error::Format {
                offset: off,
                msg: format!("record {} has dimension {d}, expected {}", range.start + i, file.dim),
            });
        }
        let at = out.len();
        out.resize(at + body, 0);
        read_at(&mut r, &mut out[at..], off + 4, len)?;
    }
    Ok((range, out))
}

/// Records `range` as vectors whose ids are their positions in the file.
pub fn read_vectors(file: &VectorFile, range: Option<Range<usize>>) -> Result<Vec<FeatureVector>> {
    let (range, raw) = read_raw(file, range)?;
    let d = file.dim;
    let coords: Vec<f32> = match file.kind {
        ElemKind::Float32 => raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        ElemKind::Uint8 => raw.iter().map(|&b| f32::from(b)).collect(),
        ElemKind::Int32 => raw
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()) as f32)
            .collect(),
    };
    Ok(range
        .zip(coords.chunks_exact(d.max(1)))
        .map(|(i, c)| FeatureVector::new(i as ObjId, c.to_vec()))
        .collect())
}

/// Int32 records without conversion to reals (ground-truth id lists).
pub fn read_int_lists(file: &VectorFile) -> Result<Vec<Vec<i32>>> {
    if file.kind != ElemKind::Int32 {
        return Err(param("integer lists need an int32 file"));
    }
    let (_, raw) = read_raw(file, None)?;
    let ints: Vec<i32> = raw
        .chunks_exact(4)
        .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(ints.chunks_exact(file.dim.max(1)).map(<[i32]>::to_vec).collect())
}

fn write_records<'a, I>(path: &Path, kind: ElemKind, records: I) -> Result<VectorFile>
where
    I: IntoIterator<Item = (usize, Box<dyn Iterator<Item = [u8; 4]> + 'a>)>,
{
    let mut w = BufWriter::new(File::create(path)?);
    let mut dim = None;
    let mut count = 0;
    for (d, elems) in records {
        match dim {
            None => dim = Some(d),
            Some(x) if x != d => return Err(param(format!("record {count} has dimension {d}, expected {x}"))),
            _ => {}
        }
        w.write_all(&(d as u32).to_le_bytes())?;
        for e in elems {
            match kind {
                ElemKind::Uint8 => w.write_all(&e[..1])?,
                _ => w.write_all(&e)?,
            }
        }
        count += 1;
    }
    w.flush()?;
    Ok(VectorFile {
        path: path.to_path_buf(),
        kind,
        dim: dim.unwrap_or(0),
        count,
    })
}

/// Writes `vectors` in order (ids are not stored). For `Uint8` and `Int32`
/// every coordinate must be an integer in the element's range.
pub fn write_vectors(path: impl AsRef<Path>, kind: ElemKind, vectors: &[FeatureVector]) -> Result<VectorFile> {
    for v in vectors {
        if v.coords.is_empty() {
            return Err(param(format!("vector {} is empty", v.id)));
        }
        let ok = match kind {
            ElemKind::Float32 => true,
            ElemKind::Uint8 => v.coords.iter().all(|&x| x.fract() == 0.0 && (0.0..=255.0).contains(&x)),
            ElemKind::Int32 => v
                .coords
                .iter()
                .all(|&x| x.fract() == 0.0 && (i32::MIN as f32..=i32::MAX as f32).contains(&x)),
        };
        if !ok {
            return Err(param(format!("vector {} does not fit {kind:?} elements", v.id)));
        }
    }
    write_records(
        path.as_ref(),
        kind,
        vectors.iter().map(|v| {
            let it: Box<dyn Iterator<Item = [u8; 4]>> = Box::new(v.coords.iter().map(move |&x| match kind {
                ElemKind::Float32 => x.to_le_bytes(),
                ElemKind::Uint8 => [x as u8, 0, 0, 0],
                ElemKind::Int32 => (x as i32).to_le_bytes(),
            }));
            (v.coords.len(), it)
        }),
    )
}

pub fn write_int_lists(path: impl AsRef<Path>, lists: &[Vec<i32>]) -> Result<VectorFile> {
    write_records(
        path.as_ref(),
        ElemKind::Int32,
        lists.iter().map(|l| {
            let it: Box<dyn Iterator<Item = [u8; 4]>> = Box::new(l.iter().map(|x| x.to_le_bytes()));
            (l.len(), it)
        }),
    )
}

/// True nearest neighbor ids per query, nearest first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub ids: Vec<Vec<ObjId>>,
}

impl GroundTruth {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<VectorFile> {
        let lists = self
            .ids
            .iter()
            .map(|l| {
                l.iter()
                    .map(|&id| i32::try_from(id).map_err(|_| param(format!("id {id} does not fit int32"))))
                    .collect::<Result<Vec<i32>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        write_int_lists(path, &lists)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let file = VectorFile::open(path, ElemKind::Int32)?;
        let ids = read_int_lists(&file)?
            .into_iter()
            .map(|l| {
                l.into_iter()
                    .map(|x| u64::try_from(x).map_err(|_| param(format!("negative id {x} in ground truth"))))
                    .collect()
            })
            .collect::<Result<_>>()?;
        Ok(Self { ids })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// Gaussian blobs around centers drawn uniformly in the box.
    Clustered,
    /// Points uniform in the box.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub n_points: usize,
    pub n_queries: usize,
    pub dim: usize,
    pub layout: Layout,
    pub n_clusters: usize,
    /// Standard deviation of points around their center.
    pub spread: f64,
    /// Side length of the box `[0, side)^d`.
    pub side: f64,
    /// Standard deviation of the per-coordinate query perturbation.
    pub query_noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            seed: 1,
            n_points: 100_000,
            n_queries: 1_000,
            dim: 128,
            layout: Layout::Clustered,
            n_clusters: 8,
            spread: 4.0,
            side: 100.0,
            query_noise: 0.5,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(param("synthetic dimension must be >= 1"));
        }
        if self.n_clusters == 0 {
            return Err(param("n_clusters must be >= 1"));
        }
        if !(self.spread > 0.0) || !self.spread.is_finite() {
            return Err(param(format!("spread must be positive, got {}", self.spread)));
        }
        if !(self.side > 0.0) || !self.side.is_finite() {
            return Err(param(format!("side must be positive, got {}", self.side)));
        }
        if !(self.query_noise >= 0.0) || !self.query_noise.is_finite() {
            return Err(param(format!("query noise must be non-negative, got {}", self.query_noise)));
        }
        if self.n_points == 0 && self.n_queries > 0 {
            return Err(param("queries are drawn from reference points; n_points must be >= 1"));
        }
        Ok(())
    }
}

/// Reference set with ids `0..n_points` and queries with ids `0..n_queries`.
/// Queries are reference points with Gaussian noise added.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<(Vec<FeatureVector>, Vec<FeatureVector>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.dim;
    let centers: Vec<Vec<f64>> = (0..spec.n_clusters)
        .map(|_| (0..d).map(|_| rng.random::<f64>() * spec.side).collect())
        .collect();
    let blob = Normal::new(0.0, spec.spread).map_err(|e| param(e.to_string()))?;
    let data: Vec<FeatureVector> = (0..spec.n_points)
        .map(|i| {
            let coords = match spec.layout {
                Layout::Uniform => (0..d).map(|_| (rng.random::<f64>() * spec.side) as f32).collect(),
                Layout::Clustered => {
                    let c = &centers[rng.random_range(0..spec.n_clusters)];
                    c.iter().map(|&x| (x + blob.sample(&mut rng)) as f32).collect()
                }
            };
            FeatureVector::new(i as ObjId, coords)
        })
        .collect();
    let noise = Normal::new(0.0, spec.query_noise).map_err(|e| param(e.to_string()))?;
    let queries = (0..spec.n_queries)
        .map(|i| {
            let base = &data[rng.random_range(0..data.len())];
            let coords = base
                .coords
                .iter()
                .map(|&x| (f64::from(x) + noise.sample(&mut rng)) as f32)
                .collect();
            FeatureVector::new(i as ObjId, coords)
        })
        .collect();
    Ok((data, queries))
}

fn byte_valued(v: &[f32]) -> bool {
    v.iter().all(|&x| x.fract() == 0.0 && (0.0..=255.0).contains(&x))
}

fn int_sq_dist(u: &[f32], v: &[f32]) -> u64 {
    u.iter()
        .zip(v)
        .map(|(&a, &b)| {
            let d = a as i64 - b as i64;
            (d * d) as u64
        })
        .sum()
}

/// Exact `k` nearest references of every query, ties broken by object id.
/// Byte-valued inputs are additionally checked against integer arithmetic.
pub fn brute_force_knn(reference: &[FeatureVector], queries: &[FeatureVector], k: usize) -> Result<GroundTruth> {
    Ok(GroundTruth {
        ids: brute_force_neighbors(reference, queries, k)?
            .into_iter()
            .map(|l| l.into_iter().map(|n| n.obj_id).collect())
            .collect(),
    })
}

/// As [`brute_force_knn`], keeping the distances.
pub fn brute_force_neighbors(reference: &[FeatureVector], queries: &[FeatureVector], k: usize) -> Result<Vec<Vec<Neighbor>>> {
    if k == 0 || k > reference.len() {
        return Err(param(format!("k = {k} must be in 1..={}", reference.len())));
    }
    let d = reference[0].dim();
    if let Some(v) = reference.iter().chain(queries).find(|v| v.dim() != d) {
        return Err(param(format!("vector {} has {} dims, expected {d}", v.id, v.dim())));
    }
    let bytes = reference.iter().chain(queries).all(|v| byte_valued(&v.coords));
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let chunk = queries.len().div_ceil(workers).max(1);
    let per_chunk: Vec<Result<Vec<Vec<Neighbor>>>> = std::thread::scope(|sc| {
        let hs: Vec<_> = queries
            .chunks(chunk)
            .map(|qs| {
                sc.spawn(move || {
                    qs.iter()
                        .map(|q| {
                            let mut ranked = Vec::with_capacity(reference.len());
                            for r in reference {
                                let dist = sq_dist(&q.coords, &r.coords);
                                if bytes && int_sq_dist(&q.coords, &r.coords) as f64 != dist {
                                    return Err(Error::State(format!(
                                        "float and integer distances disagree for query {} and object {}",
                                        q.id, r.id
                                    )));
                                }
                                ranked.push(Neighbor::new(r.id, dist));
                            }
                            Ok(top_k(ranked, k))
                        })
                        .collect()
                })
            })
            .collect();
        hs.into_iter().map(|h| h.join().expect("oracle worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(queries.len());
    for c in per_chunk {
        out.extend(c?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn single_float_record() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("one.fvecs");
        let mut raw = 4u32.to_le_bytes().to_vec();
        for x in [1.0f32, 2.0, 3.0, 4.0] {
            raw.extend_from_slice(&x.to_le_bytes());
        }
        std::fs::write(&p, raw).unwrap();
        let f = VectorFile::open_auto(&p).unwrap();
        assert_eq!((f.dim, f.count), (4, 1));
        assert_eq!(read_vectors(&f, None).unwrap(), vec![FeatureVector::new(0, vec![1.0, 2.0, 3.0, 4.0])]);
    }

    #[test]
    fn partial_range_keeps_ordinals() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("r.fvecs");
        let vs: Vec<_> = (0..100).map(|i| FeatureVector::new(i, vec![i as f32; 3])).collect();
        let f = write_vectors(&p, ElemKind::Float32, &vs).unwrap();
        let got = read_vectors(&f, Some(10..20)).unwrap();
        assert_eq!(got.iter().map(|v| v.id).collect::<Vec<_>>(), (10..20).collect::<Vec<_>>());
        assert_eq!(got[0].coords, vec![10.0; 3]);
        assert!(read_vectors(&f, Some(90..101)).is_err());
    }

    #[test]
    fn layout_arithmetic_and_empty() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("three.fvecs");
        let vs: Vec<_> = (0..3).map(|i| FeatureVector::new(i, vec![0.5, -1.0])).collect();
        write_vectors(&p, ElemKind::Float32, &vs).unwrap();
        assert_eq!(std::fs::metadata(&p).unwrap().len(), 36);
        let e = dir.path().join("empty.bvecs");
        let f = write_vectors(&e, ElemKind::Uint8, &[]).unwrap();
        assert_eq!(f.count, 0);
        assert_eq!(std::fs::metadata(&e).unwrap().len(), 0);
        let f = VectorFile::open_auto(&e).unwrap();
        assert!(read_vectors(&f, None).unwrap().is_empty());
    }

    #[test]
    fn format_errors_carry_offsets() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("bad.fvecs");
        let vs: Vec<_> = (0..3).map(|i| FeatureVector::new(i, vec![1.0, 2.0])).collect();
        write_vectors(&p, ElemKind::Float32, &vs).unwrap();
        let mut raw = std::fs::read(&p).unwrap();
        raw.truncate(30);
        std::fs::write(&p, &raw).unwrap();
        match VectorFile::open_auto(&p) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 24),
            other => panic!("{other:?}"),
        }
        // consistent length but a record claims another dimension
        let mut raw = std::fs::read(dir.path().join("bad.fvecs")).unwrap();
        raw.extend_from_slice(&[0u8; 6]);
        raw[12..16].copy_from_slice(&3u32.to_le_bytes());
        std::fs::write(&p, &raw).unwrap();
        let f = VectorFile::open_auto(&p).unwrap();
        match read_vectors(&f, None) {
            Err(Error::Format { offset, msg }) => {
                assert_eq!(offset, 12);
                assert!(msg.contains("dimension 3"));
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn round_trip_all_kinds() {
        let dir = tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let floats: Vec<_> = (0..10_000)
            .map(|i| FeatureVector::new(i, (0..8).map(|_| rng.random::<f32>() * 1e3 - 500.0).collect()))
            .collect();
        let bytes: Vec<_> = (0..1000)
            .map(|i| FeatureVector::new(i, (0..16).map(|_| rng.random_range(0..=255u8) as f32).collect()))
            .collect();
        let ints: Vec<_> = (0..1000)
            .map(|i| FeatureVector::new(i, (0..4).map(|_| rng.random_range(-100_000..100_000) as f32).collect()))
            .collect();
        for (name, kind, vs) in [
            ("f.fvecs", ElemKind::Float32, &floats),
            ("b.bvecs", ElemKind::Uint8, &bytes),
            ("i.ivecs", ElemKind::Int32, &ints),
        ] {
            let p = dir.path().join(name);
            let f = write_vectors(&p, kind, vs).unwrap();
            let back = read_vectors(&VectorFile::open_auto(&p).unwrap(), None).unwrap();
            assert_eq!(f.count, vs.len());
            for (a, b) in back.iter().zip(vs.iter()) {
                assert_eq!(a.id, b.id);
                assert!(a.coords.iter().zip(&b.coords).all(|(x, y)| x.to_bits() == y.to_bits()));
            }
        }
        assert!(write_vectors(dir.path().join("x.bvecs"), ElemKind::Uint8, &floats[..1]).is_err());
    }

    #[test]
    fn ground_truth_round_trip() {
        let dir = tempdir().unwrap();
        let gt = GroundTruth {
            ids: vec![vec![3, 1, 2], vec![0, 9, 7]],
        };
        let p = dir.path().join("gt.ivecs");
        gt.save(&p).unwrap();
        assert_eq!(GroundTruth::load(&p).unwrap(), gt);
        let f = VectorFile::open_auto(&p).unwrap();
        assert_eq!(read_vectors(&f, None).unwrap()[1].coords, vec![0.0, 9.0, 7.0]);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let spec = SyntheticSpec {
            n_points: 500,
            n_queries: 20,
            dim: 6,
            ..Default::default()
        };
        assert_eq!(gen_synthetic(&spec).unwrap(), gen_synthetic(&spec).unwrap());
        let other = SyntheticSpec { seed: 2, ..spec.clone() };
        assert_ne!(gen_synthetic(&spec).unwrap().0, gen_synthetic(&other).unwrap().0);
        assert!(gen_synthetic(&SyntheticSpec { n_clusters: 0, ..spec.clone() }).is_err());
        assert!(gen_synthetic(&SyntheticSpec { spread: 0.0, ..spec }).is_err());
    }

    #[test]
    fn degenerate_cluster_distance_is_noise() {
        let spec = SyntheticSpec {
            n_points: 200,
            n_queries: 50,
            dim: 16,
            n_clusters: 1,
            spread: 1e-9,
            query_noise: 0.5,
            ..Default::default()
        };
        let (data, queries) = gen_synthetic(&spec).unwrap();
        let nn = brute_force_neighbors(&data, &queries, 1).unwrap();
        let mean_sq: f64 = nn.iter().map(|l| l[0].dist_sq).sum::<f64>() / nn.len() as f64;
        // E[|noise|^2] = d * sigma^2 = 4
        assert!((mean_sq - 4.0).abs() < 0.6, "mean squared NN distance {mean_sq}");
    }

    #[test]
    fn oracle_basics() {
        let data: Vec<_> = (0..10).map(|i| FeatureVector::new(i, vec![i as f32, 0.0])).collect();
        let q = FeatureVector::new(0, vec![4.0, 0.0]);
        let gt = brute_force_knn(&data, std::slice::from_ref(&q), 10).unwrap();
        assert_eq!(gt.ids[0], vec![4, 3, 5, 2, 6, 1, 7, 0, 8, 9]);
        assert!(brute_force_knn(&data, std::slice::from_ref(&q), 11).is_err());
        let mut shuffled = data.clone();
        shuffled.reverse();
        assert_eq!(brute_force_knn(&shuffled, &[q], 10).unwrap(), gt);
    }

    #[test]
    fn byte_oracle_matches_integer_distances() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<_> = (0..300)
            .map(|i| FeatureVector::new(i, (0..128).map(|_| rng.random_range(0..=255u8) as f32).collect()))
            .collect();
        let queries: Vec<_> = data[..5].to_vec();
        let nn = brute_force_neighbors(&data, &queries, 5).unwrap();
        for (q, l) in queries.iter().zip(&nn) {
            assert_eq!(l[0], Neighbor::new(q.id, 0.0));
            for n in l {
                let exact = int_sq_dist(&q.coords, &data[n.obj_id as usize].coords);
                assert_eq!(n.dist_sq, exact as f64);
            }
        }
    }
}
