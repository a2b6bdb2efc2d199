//! Experiment harness: configuration, single runs, parameter sweeps and
//! report emission.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::dataset::{brute_force_knn, gen_synthetic, read_int_lists, read_vectors, write_int_lists, GroundTruth, SyntheticSpec, VectorFile};
use crate::error::{param, Error, Result};
use crate::index::SearchParams;
use crate::lsh::{sample_family, suggest_width, FeatureVector, ObjId};
use crate::partition::{PartitionCensus, StrategyKind, StrategySpec};
use crate::pipeline::{Pipeline, PipelineSpec, StageTopology};
use crate::runtime::TrafficCounters;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "kebab-case")]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    Files {
        base: PathBuf,
        queries: PathBuf,
        /// int32 list file of true neighbors; brute-forced when absent.
        #[serde(default)]
        ground_truth: Option<PathBuf>,
        #[serde(default)]
        base_limit: Option<usize>,
        #[serde(default)]
        query_limit: Option<usize>,
    },
}

impl Default for DatasetSource {
    fn default() -> Self {
        DatasetSource::Synthetic(SyntheticSpec::default())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FamilyConfig {
    pub seed: u64,
    /// L
    pub tables: usize,
    /// M
    pub functions: usize,
    /// w; estimated from the reference set when absent.
    pub width: Option<f64>,
}

impl Default for FamilyConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            tables: 6,
            functions: 32,
            width: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    pub k: usize,
    /// T
    pub probes: usize,
    pub candidate_cap: Option<usize>,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            k: 10,
            probes: 1,
            candidate_cap: None,
        }
    }
}

impl SearchConfig {
    pub fn params(&self) -> SearchParams {
        SearchParams {
            k: self.k,
            probes: self.probes,
            candidate_cap: self.candidate_cap,
        }
    }
}

fn default_pipeline() -> PipelineSpec {
    PipelineSpec {
        topology: StageTopology::new(2, 8),
        ..Default::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub dataset: DatasetSource,
    pub family: FamilyConfig,
    pub search: SearchConfig,
    pub strategy: StrategySpec,
    pub pipeline: PipelineSpec,
    /// Directory receiving reports and per-run neighbor lists.
    pub output: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: "run".into(),
            dataset: DatasetSource::default(),
            family: FamilyConfig::default(),
            search: SearchConfig::default(),
            strategy: StrategySpec::default(),
            pipeline: default_pipeline(),
            output: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks everything that can be checked without the data.
    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains([',', '\n', '"']) {
            return Err(param(format!("run name {:?} must be non-empty without commas or quotes", self.name)));
        }
        if let DatasetSource::Synthetic(s) = &self.dataset {
            s.validate()?;
            if s.n_points == 0 || s.n_queries == 0 {
                return Err(param("synthetic dataset needs at least one point and one query"));
            }
        }
        let f = &self.family;
        if f.tables == 0 || f.functions == 0 {
            return Err(param("L and M must be >= 1"));
        }
        if let Some(w) = f.width {
            if !(w > 0.0) || !w.is_finite() {
                return Err(param(format!("width must be positive, got {w}")));
            }
        }
        self.search.params().validate()?;
        self.pipeline.topology.validate()?;
        Ok(())
    }
}

/// Reference set, queries and ground truth shared by the runs of a sweep.
pub struct Prepared {
    pub data: Vec<FeatureVector>,
    pub queries: Vec<FeatureVector>,
    pub truth: GroundTruth,
    /// Width used when the family config leaves it open.
    pub width: f64,
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<Prepared> {
    cfg.validate()?;
    let k = cfg.search.k;
    let (data, queries, truth) = match &cfg.dataset {
        DatasetSource::Synthetic(s) => {
            let (data, queries) = gen_synthetic(s)?;
            let truth = brute_force_knn(&data, &queries, k)?;
            (data, queries, truth)
        }
        DatasetSource::Files {
            base,
            queries,
            ground_truth,
            base_limit,
            query_limit,
        } => {
            let bf = VectorFile::open_auto(base)?;
            let qf = VectorFile::open_auto(queries)?;
            let data = read_vectors(&bf, Some(0..base_limit.unwrap_or(bf.count).min(bf.count)))?;
            let qs = read_vectors(&qf, Some(0..query_limit.unwrap_or(qf.count).min(qf.count)))?;
            let truth = match ground_truth {
                // a truth file computed on the full base set does not apply to a prefix
                Some(p) if base_limit.is_none_or(|l| l >= bf.count) => {
                    let mut t = GroundTruth::load(p)?;
                    t.ids.truncate(qs.len());
                    t
                }
                _ => brute_force_knn(&data, &qs, k)?,
            };
            (data, qs, truth)
        }
    };
    if data.is_empty() || queries.is_empty() {
        return Err(param("dataset has no reference points or no queries"));
    }
    if truth.len() != queries.len() || truth.ids.iter().any(|t| t.len() < k) {
        return Err(param(format!(
            "ground truth covers {} queries with lists shorter than k = {k} or a count other than {}",
            truth.len(),
            queries.len()
        )));
    }
    let width = match cfg.family.width {
        Some(w) => w,
        None => suggest_width(&data, 200, cfg.family.seed)?,
    };
    Ok(Prepared {
        data,
        queries,
        truth,
        width,
    })
}

/// Mean over queries of `|returned ∩ true top-k| / k`.
pub fn recall_at_k(results: &[Vec<ObjId>], truth: &GroundTruth, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(param("k must be >= 1"));
    }
    if results.len() != truth.len() {
        return Err(param(format!("{} result lists for {} ground-truth lists", results.len(), truth.len())));
    }
    if results.is_empty() {
        return Err(param("recall of an empty query set"));
    }
    let mut total = 0.0;
    for (got, want) in results.iter().zip(&truth.ids) {
        if want.len() < k {
            return Err(param(format!("ground-truth list of length {} is shorter than k = {k}", want.len())));
        }
        let want = &want[..k];
        let hits = got.iter().take(k).filter(|id| want.contains(id)).count();
        total += hits as f64 / k as f64;
    }
    Ok(total / results.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub run_id: String,
    pub status: RunStatus,
    pub error: Option<String>,
    /// The configuration as run, with the width filled in.
    pub config: ExperimentConfig,
    pub n_points: usize,
    pub n_queries: usize,
    pub recall: f64,
    /// Launch plus ingestion, seconds.
    pub build_s: f64,
    /// First submission to last completion, seconds.
    pub search_s: f64,
    pub timing: String,
    pub build_traffic: TrafficCounters,
    pub search_traffic: TrafficCounters,
    pub dp_census: Option<PartitionCensus>,
    pub bi_census: Option<PartitionCensus>,
    pub mean_candidates: f64,
    pub mean_dp_touched: f64,
    pub mean_bi_touched: f64,
}

const TIMING_NOTE: &str = "desk-scale wall clock; compare trends, not magnitudes";

impl ExperimentReport {
    fn failed(run_id: String, config: ExperimentConfig, prep: &Prepared, err: &Error) -> Self {
        Self {
            run_id,
            status: RunStatus::Failed,
            error: Some(err.to_string()),
            config,
            n_points: prep.data.len(),
            n_queries: prep.queries.len(),
            recall: 0.0,
            build_s: 0.0,
            search_s: 0.0,
            timing: TIMING_NOTE.into(),
            build_traffic: TrafficCounters::default(),
            search_traffic: TrafficCounters::default(),
            dp_census: None,
            bi_census: None,
            mean_candidates: 0.0,
            mean_dp_touched: 0.0,
            mean_bi_touched: 0.0,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == RunStatus::Ok
    }
}

/// A report plus the neighbor ids it was computed from.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub report: ExperimentReport,
    pub neighbors: Vec<Vec<ObjId>>,
}

fn resolved(cfg: &ExperimentConfig, prep: &Prepared) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.family.width = Some(prep.width);
    c
}

/// One build plus query batch; failures become a failed report.
pub fn run_prepared(run_id: &str, cfg: &ExperimentConfig, prep: &Prepared) -> RunOutput {
    let config = resolved(cfg, prep);
    match try_run(run_id, &config, prep) {
        Ok(out) => out,
        Err(e) => {
            log::warn!("run {run_id} failed: {e}");
            RunOutput {
                report: ExperimentReport::failed(run_id.into(), config, prep, &e),
                neighbors: Vec::new(),
            }
        }
    }
}

fn try_run(run_id: &str, config: &ExperimentConfig, prep: &Prepared) -> Result<RunOutput> {
    config.validate()?;
    let f = &config.family;
    let width = f.width.unwrap_or(prep.width);
    let dim = prep.data[0].dim();
    let family = Arc::new(sample_family(f.seed, dim, f.tables, f.functions, width)?);
    let n_dp = config.pipeline.topology.dp.copies;
    let strategy = config.strategy.build(&prep.data, &family, n_dp)?;

    let t0 = Instant::now();
    let pipeline = Pipeline::launch(family, strategy, &config.pipeline)?;
    let ingest = pipeline.ingest(&prep.data)?;
    let build_s = t0.elapsed().as_secs_f64();
    if ingest.rejected > 0 {
        return Err(param(format!("{} reference vectors rejected at ingestion", ingest.rejected)));
    }
    let build_traffic = pipeline.counters()?;
    let census = pipeline.census()?;

    let params = config.search.params();
    let t1 = Instant::now();
    let batch = pipeline.search_batch(&prep.queries, &params)?;
    let search_s = t1.elapsed().as_secs_f64();
    let search_traffic = batch.traffic.clone();
    let results = batch.into_results()?;

    let n = results.len() as f64;
    let neighbors: Vec<Vec<ObjId>> = results
        .iter()
        .map(|r| r.neighbors.iter().map(|x| x.obj_id).collect())
        .collect();
    let recall = recall_at_k(&neighbors, &prep.truth, params.k)?;
    let counts = |v: &[u64]| v.iter().map(|&x| x as usize).collect::<Vec<_>>();
    let report = ExperimentReport {
        run_id: run_id.into(),
        status: RunStatus::Ok,
        error: None,
        config: config.clone(),
        n_points: prep.data.len(),
        n_queries: prep.queries.len(),
        recall,
        build_s,
        search_s,
        timing: TIMING_NOTE.into(),
        build_traffic,
        search_traffic,
        dp_census: PartitionCensus::from_counts(counts(&census.dp_objects)).ok(),
        bi_census: PartitionCensus::from_counts(counts(&census.bi_entries)).ok(),
        mean_candidates: results.iter().map(|r| r.stats.candidates as f64).sum::<f64>() / n,
        mean_dp_touched: results.iter().map(|r| f64::from(r.stats.dp_touched)).sum::<f64>() / n,
        mean_bi_touched: results.iter().map(|r| f64::from(r.stats.bi_touched)).sum::<f64>() / n,
    };
    Ok(RunOutput { report, neighbors })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let prep = prepare(cfg)?;
    Ok(run_prepared(&cfg.name, cfg, &prep))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SweepAxis {
    L,
    M,
    T,
    Strategy,
    Topology,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "l" | "tables" => Ok(SweepAxis::L),
            "m" | "functions" => Ok(SweepAxis::M),
            "t" | "probes" => Ok(SweepAxis::T),
            "strategy" => Ok(SweepAxis::Strategy),
            "topology" => Ok(SweepAxis::Topology),
            other => Err(param(format!("unknown sweep axis {other:?} (expected L, M, T, strategy or topology)"))),
        }
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::L => "L",
            SweepAxis::M => "M",
            SweepAxis::T => "T",
            SweepAxis::Strategy => "strategy",
            SweepAxis::Topology => "topology",
        }
    }

    /// Copy of `cfg` with this axis set to `value`.
    pub fn apply(self, cfg: &ExperimentConfig, value: &str) -> Result<ExperimentConfig> {
        let mut c = cfg.clone();
        let int = |v: &str| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| param(format!("{} value {v:?} is not a positive integer", self.name())))
        };
        match self {
            SweepAxis::L => c.family.tables = int(value)?,
            SweepAxis::M => c.family.functions = int(value)?,
            SweepAxis::T => c.search.probes = int(value)?,
            SweepAxis::Strategy => c.strategy.kind = value.parse::<StrategyKind>().map_err(param)?,
            SweepAxis::Topology => c.pipeline.topology = parse_topology(value, &cfg.pipeline.topology)?,
        }
        c.validate()?;
        Ok(c)
    }
}

/// `"BIxDP"`, keeping thread counts of `base`.
pub fn parse_topology(value: &str, base: &StageTopology) -> Result<StageTopology> {
    let (b, d) = value
        .split_once(['x', 'X'])
        .ok_or_else(|| param(format!("topology {value:?} must look like 2x8")))?;
    let n = |s: &str| {
        s.trim()
            .parse::<usize>()
            .map_err(|_| param(format!("topology {value:?} must look like 2x8")))
    };
    let mut t = *base;
    t.bi.copies = n(b)?;
    t.dp.copies = n(d)?;
    t.validate()?;
    Ok(t)
}

/// One run per value over a shared dataset and ground truth. Bad values are
/// rejected before anything runs; failing runs are reported and skipped.
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[String]) -> Result<Vec<RunOutput>> {
    if values.is_empty() {
        return Err(param("sweep needs at least one value"));
    }
    let configs = values
        .iter()
        .map(|v| axis.apply(cfg, v))
        .collect::<Result<Vec<_>>>()?;
    let prep = prepare(cfg)?;
    sweep_configs(cfg, axis, values, &configs, &prep)
}

/// As [`sweep`] over an already prepared dataset.
pub fn sweep_prepared(cfg: &ExperimentConfig, axis: SweepAxis, values: &[String], prep: &Prepared) -> Result<Vec<RunOutput>> {
    if values.is_empty() {
        return Err(param("sweep needs at least one value"));
    }
    let configs = values
        .iter()
        .map(|v| axis.apply(cfg, v))
        .collect::<Result<Vec<_>>>()?;
    sweep_configs(cfg, axis, values, &configs, prep)
}

fn sweep_configs(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    values: &[String],
    configs: &[ExperimentConfig],
    prep: &Prepared,
) -> Result<Vec<RunOutput>> {
    Ok(values
        .iter()
        .zip(configs)
        .map(|(v, c)| run_prepared(&format!("{}/{}={}", cfg.name, axis.name(), v.trim()), c, prep))
        .collect())
}

pub const CSV_HEADER: &str = "run_id,L,M,T,strategy,n_bi,n_dp,recall,build_s,search_s,logical_msgs,transport_msgs,bytes,imbalance_pct,mean_dp_touched";

/// Table row; message and byte counts cover the search phase.
pub fn csv_row(r: &ExperimentReport) -> String {
    let c = &r.config;
    let t = &r.search_traffic;
    format!(
        "{},{},{},{},{},{},{},{:.6},{:.3},{:.3},{},{},{},{:.3},{:.3}",
        r.run_id,
        c.family.tables,
        c.family.functions,
        c.search.probes,
        c.strategy.kind,
        c.pipeline.topology.bi.copies,
        c.pipeline.topology.dp.copies,
        r.recall,
        r.build_s,
        r.search_s,
        t.logical(),
        t.transport(),
        t.bytes(),
        r.dp_census.as_ref().map_or(f64::NAN, |c| c.imbalance_pct),
        r.mean_dp_touched,
    )
}

pub fn write_csv(path: impl AsRef<Path>, reports: &[ExperimentReport]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "{CSV_HEADER}")?;
    for r in reports {
        writeln!(w, "{}", csv_row(r))?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_jsonl(path: impl AsRef<Path>, reports: &[ExperimentReport]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in reports {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Io(e.into()))?;
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Vec<ExperimentReport>> {
    let r = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in r.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
                offset,
                msg: e.to_string(),
            })?);
        }
        offset += line.len() as u64 + 1;
    }
    Ok(out)
}

/// File name for a run's neighbor lists.
pub fn neighbors_file(run_id: &str) -> String {
    format!("{}.neighbors.ivecs", run_id.replace(['/', '=', ' '], "_"))
}

/// Neighbor ids padded with -1 to length `k`.
pub fn save_neighbors(path: impl AsRef<Path>, neighbors: &[Vec<ObjId>], k: usize) -> Result<()> {
    let lists = neighbors
        .iter()
        .map(|l| {
            let mut v = l
                .iter()
                .map(|&id| i32::try_from(id).map_err(|_| param(format!("id {id} does not fit int32"))))
                .collect::<Result<Vec<i32>>>()?;
            v.resize(k.max(l.len()), -1);
            Ok(v)
        })
        .collect::<Result<Vec<_>>>()?;
    write_int_lists(path, &lists)?;
    Ok(())
}

pub fn load_neighbors(path: impl AsRef<Path>) -> Result<Vec<Vec<ObjId>>> {
    let f = VectorFile::open(path, crate::dataset::ElemKind::Int32)?;
    Ok(read_int_lists(&f)?
        .into_iter()
        .map(|l| l.into_iter().filter(|&x| x >= 0).map(|x| x as ObjId).collect())
        .collect())
}

/// Writes `reports.jsonl`, `results.csv` and one neighbor file per
/// successful run into `dir`.
pub fn write_outputs(dir: impl AsRef<Path>, runs: &[RunOutput]) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir)?;
    let reports: Vec<_> = runs.iter().map(|r| r.report.clone()).collect();
    write_jsonl(dir.join("reports.jsonl"), &reports)?;
    write_csv(dir.join("results.csv"), &reports)?;
    for r in runs.iter().filter(|r| r.report.is_ok()) {
        save_neighbors(
            dir.join(neighbors_file(&r.report.run_id)),
            &r.neighbors,
            r.report.config.search.k,
        )?;
    }
    Ok(())
}
