use std::io::Write;
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use dlsh_core::dataset::{
    brute_force_knn, gen_synthetic, read_vectors, write_vectors, ElemKind, GroundTruth, Layout, SyntheticSpec, VectorFile,
};
use dlsh_core::eval::{self, DatasetSource, ExperimentConfig, RunOutput, SweepAxis};
use dlsh_core::pipeline::{serve_worker, SocketSpec};
use dlsh_core::{sample_family, PartitionCensus, Pipeline, StrategyKind, TransportSpec};

#[derive(Parser)]
#[command(name = "dlsh", version, about = "Distributed multi-probe LSH: build, search and evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the index and print build statistics as JSON.
    Build(ConfigArgs),
    /// Build, run the query batch and write reports.
    Search(ConfigArgs),
    /// One run per value of an axis over a shared dataset.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        /// L, M, T, strategy or topology.
        #[arg(long)]
        axis: SweepAxis,
        /// Comma-separated values, e.g. 1,2,4,8 or mod,zorder,lsh or 2x8,4x8.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
    },
    /// Write a synthetic reference set and query set.
    GenData {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 100_000)]
        points: usize,
        #[arg(long, default_value_t = 1_000)]
        queries: usize,
        #[arg(long, default_value_t = 128)]
        dim: usize,
        #[arg(long, default_value_t = 8)]
        clusters: usize,
        #[arg(long, default_value_t = 4.0)]
        spread: f64,
        #[arg(long, value_enum, default_value_t = LayoutArg::Clustered)]
        layout: LayoutArg,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Also write exact neighbors for this k.
        #[arg(long)]
        ground_truth_k: Option<usize>,
    },
    /// Exact k nearest neighbors of every query, as an int32 list file.
    GroundTruth {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print a report file as CSV, optionally re-checking recall.
    Report {
        /// reports.jsonl written by search or sweep.
        input: PathBuf,
        /// Recompute recall from the saved neighbor lists against this truth file.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
    },
    /// Host BI and DP copies for a coordinator; prints the bound address.
    Worker {
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: String,
        /// Exit after one session instead of waiting for the next.
        #[arg(long)]
        once: bool,
    },
    /// Print the resolved configuration as TOML.
    Config(ConfigArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum LayoutArg {
    Clustered,
    Uniform,
}

#[derive(Clone, Copy, ValueEnum)]
enum TransportArg {
    InProcess,
    Socket,
}

/// Experiment configuration: a TOML file plus flag overrides.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// TOML experiment configuration.
    #[arg(long, short)]
    config: Option<PathBuf>,
    #[arg(long)]
    name: Option<String>,
    /// Reference vectors (.fvecs/.bvecs/.ivecs); replaces a synthetic dataset.
    #[arg(long, requires = "queries")]
    base: Option<PathBuf>,
    #[arg(long, requires = "base")]
    queries: Option<PathBuf>,
    #[arg(long, requires = "base")]
    ground_truth: Option<PathBuf>,
    #[arg(long)]
    base_limit: Option<usize>,
    #[arg(long)]
    query_limit: Option<usize>,
    /// Synthetic reference set size.
    #[arg(long)]
    points: Option<usize>,
    /// Synthetic query count.
    #[arg(long)]
    num_queries: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    clusters: Option<usize>,
    /// Family seed (also the synthetic data seed).
    #[arg(long)]
    seed: Option<u64>,
    /// Hash tables (L).
    #[arg(short = 'L', long)]
    tables: Option<usize>,
    /// Functions per table (M).
    #[arg(short = 'M', long)]
    functions: Option<usize>,
    /// Quantization width (w).
    #[arg(short = 'w', long)]
    width: Option<f64>,
    #[arg(short = 'k', long)]
    k: Option<usize>,
    /// Probes per table (T).
    #[arg(short = 'T', long)]
    probes: Option<usize>,
    #[arg(long)]
    cap: Option<usize>,
    #[arg(long)]
    strategy: Option<StrategyKind>,
    #[arg(long)]
    map_functions: Option<usize>,
    #[arg(long)]
    map_width: Option<f64>,
    /// BI x DP copies, e.g. 2x8.
    #[arg(long)]
    topology: Option<String>,
    /// Worker threads per DP copy.
    #[arg(long)]
    dp_threads: Option<usize>,
    #[arg(long, value_enum)]
    transport: Option<TransportArg>,
    /// In-process worker endpoints to start (socket transport).
    #[arg(long)]
    workers: Option<usize>,
    /// Address of an external `dlsh worker` (repeatable; socket transport).
    #[arg(long = "worker")]
    external: Vec<String>,
    /// Coordinator listen address (socket transport).
    #[arg(long)]
    bind: Option<String>,
    /// Messages per aggregated transport send; 1 disables aggregation.
    #[arg(long)]
    flush_count: Option<usize>,
    /// Output directory for reports and neighbor lists.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(n) = &self.name {
            c.name = n.clone();
        }
        if let (Some(base), Some(queries)) = (&self.base, &self.queries) {
            c.dataset = DatasetSource::Files {
                base: base.clone(),
                queries: queries.clone(),
                ground_truth: self.ground_truth.clone(),
                base_limit: self.base_limit,
                query_limit: self.query_limit,
            };
        }
        match &mut c.dataset {
            DatasetSource::Synthetic(s) => {
                set(&mut s.n_points, self.points);
                set(&mut s.n_queries, self.num_queries);
                set(&mut s.dim, self.dim);
                set(&mut s.n_clusters, self.clusters);
                set(&mut s.seed, self.seed);
            }
            DatasetSource::Files {
                base_limit, query_limit, ..
            } => {
                if self.base_limit.is_some() {
                    *base_limit = self.base_limit;
                }
                if self.query_limit.is_some() {
                    *query_limit = self.query_limit;
                }
            }
        }
        set(&mut c.family.seed, self.seed);
        set(&mut c.family.tables, self.tables);
        set(&mut c.family.functions, self.functions);
        if self.width.is_some() {
            c.family.width = self.width;
        }
        set(&mut c.search.k, self.k);
        set(&mut c.search.probes, self.probes);
        if self.cap.is_some() {
            c.search.candidate_cap = self.cap;
        }
        set(&mut c.strategy.kind, self.strategy);
        if self.map_functions.is_some() {
            c.strategy.map_functions = self.map_functions;
        }
        if self.map_width.is_some() {
            c.strategy.map_width = self.map_width;
        }
        if let Some(t) = &self.topology {
            c.pipeline.topology = eval::parse_topology(t, &c.pipeline.topology)?;
        }
        set(&mut c.pipeline.topology.dp.threads, self.dp_threads);
        set(&mut c.pipeline.runtime.flush_count, self.flush_count);
        let wants_socket = self.workers.is_some() || !self.external.is_empty() || self.bind.is_some();
        match self.transport {
            Some(TransportArg::InProcess) if wants_socket => {
                bail!("--workers, --worker and --bind need the socket transport")
            }
            Some(TransportArg::InProcess) => c.pipeline.transport = TransportSpec::InProcess,
            Some(TransportArg::Socket) => {
                if !matches!(c.pipeline.transport, TransportSpec::Socket(_)) {
                    c.pipeline.transport = TransportSpec::Socket(SocketSpec::default());
                }
            }
            None if wants_socket && !matches!(c.pipeline.transport, TransportSpec::Socket(_)) => {
                c.pipeline.transport = TransportSpec::Socket(SocketSpec::default());
            }
            None => {}
        }
        if let TransportSpec::Socket(s) = &mut c.pipeline.transport {
            set(&mut s.workers, self.workers);
            if !self.external.is_empty() {
                s.external = self.external.clone();
            }
            if let Some(b) = &self.bind {
                s.bind = b.clone();
            }
        }
        if self.output.is_some() {
            c.output = self.output.clone();
        }
        c.validate()?;
        Ok(c)
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn emit(runs: &[RunOutput], output: Option<&Path>) -> Result<bool> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{}", eval::CSV_HEADER)?;
    for r in runs {
        writeln!(out, "{}", eval::csv_row(&r.report))?;
        if let Some(e) = &r.report.error {
            eprintln!("run {} failed: {e}", r.report.run_id);
        }
    }
    if let Some(dir) = output {
        eval::write_outputs(dir, runs)?;
        eprintln!("reports written to {}", dir.display());
    }
    Ok(runs.iter().all(|r| r.report.is_ok()))
}

fn build(cfg: &ExperimentConfig) -> Result<()> {
    let prep = eval::prepare(cfg)?;
    let f = &cfg.family;
    let family = Arc::new(sample_family(f.seed, prep.data[0].dim(), f.tables, f.functions, prep.width)?);
    let strategy = cfg.strategy.build(&prep.data, &family, cfg.pipeline.topology.dp.copies)?;
    let t = Instant::now();
    let p = Pipeline::launch(family, strategy, &cfg.pipeline)?;
    let ingest = p.ingest(&prep.data)?;
    let build_s = t.elapsed().as_secs_f64();
    let census = p.census()?;
    let counts = |v: &[u64]| v.iter().map(|&x| x as usize).collect::<Vec<_>>();
    let summary = serde_json::json!({
        "name": cfg.name,
        "stored": ingest.stored,
        "rejected": ingest.rejected,
        "width": prep.width,
        "build_s": build_s,
        "traffic": p.counters()?,
        "dp_census": PartitionCensus::from_counts(counts(&census.dp_objects)).ok(),
        "bi_census": PartitionCensus::from_counts(counts(&census.bi_entries)).ok(),
    });
    println!("{}", serde_json::to_string_pretty(&summary)?);
    Ok(())
}

fn report(input: &Path, truth: Option<&Path>) -> Result<bool> {
    let reports = eval::read_jsonl(input).with_context(|| format!("reading {}", input.display()))?;
    println!("{}", eval::CSV_HEADER);
    for r in &reports {
        println!("{}", eval::csv_row(r));
    }
    let Some(truth) = truth else {
        return Ok(true);
    };
    let gt = GroundTruth::load(truth)?;
    let dir = input.parent().unwrap_or(Path::new("."));
    let mut consistent = true;
    for r in reports.iter().filter(|r| r.is_ok()) {
        let neighbors = eval::load_neighbors(dir.join(eval::neighbors_file(&r.run_id)))?;
        let recall = eval::recall_at_k(&neighbors, &gt, r.config.search.k)?;
        let same = recall == r.recall;
        consistent &= same;
        eprintln!(
            "{}: recall {recall:.6} recomputed, {:.6} reported{}",
            r.run_id,
            r.recall,
            if same { "" } else { " MISMATCH" }
        );
    }
    Ok(consistent)
}

fn worker(listen: &str, once: bool) -> Result<()> {
    let listener = TcpListener::bind(listen).with_context(|| format!("binding {listen}"))?;
    let addr: SocketAddr = listener.local_addr()?;
    println!("listening on {addr}");
    std::io::stdout().flush()?;
    let mut listener = Some(listener);
    loop {
        let l = match listener.take() {
            Some(l) => l,
            None => TcpListener::bind(addr).with_context(|| format!("rebinding {addr}"))?,
        };
        match serve_worker(l) {
            Ok(()) => log::info!("session finished"),
            Err(e) if once => return Err(e.into()),
            Err(e) => log::warn!("session failed: {e}"),
        }
        if once {
            return Ok(());
        }
    }
}

fn gen_data(
    out_dir: &Path,
    spec: SyntheticSpec,
    ground_truth_k: Option<usize>,
) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let (data, queries) = gen_synthetic(&spec)?;
    let b = write_vectors(out_dir.join("base.fvecs"), ElemKind::Float32, &data)?;
    let q = write_vectors(out_dir.join("queries.fvecs"), ElemKind::Float32, &queries)?;
    eprintln!("wrote {} x {} reference and {} query vectors", b.count, b.dim, q.count);
    if let Some(k) = ground_truth_k {
        brute_force_knn(&data, &queries, k)?.save(out_dir.join("groundtruth.ivecs"))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Build(args) => build(&args.resolve()?).map(|_| true),
        Command::Search(args) => {
            let cfg = args.resolve()?;
            let out = eval::run_experiment(&cfg)?;
            emit(std::slice::from_ref(&out), cfg.output.as_deref())
        }
        Command::Sweep { config, axis, values } => {
            let cfg = config.resolve()?;
            let runs = eval::sweep(&cfg, axis, &values)?;
            emit(&runs, cfg.output.as_deref())
        }
        Command::GenData {
            out_dir,
            points,
            queries,
            dim,
            clusters,
            spread,
            layout,
            seed,
            ground_truth_k,
        } => {
            let spec = SyntheticSpec {
                seed,
                n_points: points,
                n_queries: queries,
                dim,
                layout: match layout {
                    LayoutArg::Clustered => Layout::Clustered,
                    LayoutArg::Uniform => Layout::Uniform,
                },
                n_clusters: clusters,
                spread,
                ..Default::default()
            };
            gen_data(&out_dir, spec, ground_truth_k).map(|_| true)
        }
        Command::GroundTruth { base, queries, k, out } => {
            let data = read_vectors(&VectorFile::open_auto(&base)?, None)?;
            let qs = read_vectors(&VectorFile::open_auto(&queries)?, None)?;
            brute_force_knn(&data, &qs, k)?.save(&out)?;
            eprintln!("wrote {} lists of {k} neighbors to {}", qs.len(), out.display());
            Ok(true)
        }
        Command::Report { input, ground_truth } => report(&input, ground_truth.as_deref()),
        Command::Worker { listen, once } => worker(&listen, once).map(|_| true),
        Command::Config(args) => {
            print!("{}", args.resolve()?.to_toml()?);
            Ok(true)
        }
    }
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(true) => {}
        Ok(false) => std::process::exit(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(1);
        }
    }
}
