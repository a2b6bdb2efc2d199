//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Run all: `cargo test --release -p dlsh-core --test acceptance`.
//! Select by number or name fragment: `... --test acceptance -- 4 recall`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::{Arc, OnceLock};
use std::time::Instant;

use dlsh_core::dataset::Layout;
use dlsh_core::eval::{self, FamilyConfig, Prepared, RunOutput, SearchConfig, SweepAxis};
use dlsh_core::lsh::suggest_width;
use dlsh_core::pipeline::SocketSpec;
use dlsh_core::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{ContinuousCDF, Normal};

const N_POINTS: usize = 100_000;
const N_QUERIES: usize = 1_000;
const DIM: usize = 128;
const K: usize = 10;

type Verdict = Result<(bool, String), String>;

fn synthetic(seed: u64, layout: Layout, n_clusters: usize) -> SyntheticSpec {
    SyntheticSpec {
        seed,
        n_points: N_POINTS,
        n_queries: N_QUERIES,
        dim: DIM,
        layout,
        n_clusters,
        ..Default::default()
    }
}

fn base_config(seed: u64, tables: usize, functions: usize, probes: usize) -> ExperimentConfig {
    ExperimentConfig {
        name: "acceptance".into(),
        dataset: eval::DatasetSource::Synthetic(synthetic(seed, Layout::Clustered, 8)),
        family: FamilyConfig {
            seed,
            tables,
            functions,
            width: None,
        },
        search: SearchConfig {
            k: K,
            probes,
            candidate_cap: None,
        },
        pipeline: PipelineSpec {
            topology: StageTopology::new(2, 8),
            ..Default::default()
        },
        ..Default::default()
    }
}

/// Clustered 100k set with brute-force ground truth, shared by several criteria.
fn shared() -> &'static Prepared {
    static P: OnceLock<Prepared> = OnceLock::new();
    P.get_or_init(|| eval::prepare(&base_config(1, 6, 16, 1)).expect("shared dataset"))
}

fn check_runs(runs: &[RunOutput]) -> Result<(), String> {
    match runs.iter().find(|r| !r.report.is_ok()) {
        Some(r) => Err(format!("run {} failed: {:?}", r.report.run_id, r.report.error)),
        None => Ok(()),
    }
}

fn values(v: &[usize]) -> Vec<String> {
    v.iter().map(usize::to_string).collect()
}

/// T sweep {1,...,32} over the shared set, reused by criteria 2 and 3.
fn t_sweep() -> Result<&'static [RunOutput], String> {
    static S: OnceLock<Result<Vec<RunOutput>, String>> = OnceLock::new();
    S.get_or_init(|| {
        let runs = eval::sweep_prepared(
            &base_config(1, 6, 16, 1),
            SweepAxis::T,
            &values(&[1, 2, 4, 8, 16, 32]),
            shared(),
        )
        .map_err(|e| e.to_string())?;
        check_runs(&runs)?;
        Ok(runs)
    })
    .as_ref()
    .map(Vec::as_slice)
    .map_err(Clone::clone)
}

fn socket_spec(topology: StageTopology) -> PipelineSpec {
    PipelineSpec {
        topology,
        transport: TransportSpec::Socket(SocketSpec {
            workers: 2,
            ..Default::default()
        }),
        ..Default::default()
    }
}

fn c1_oracle_equivalence() -> Verdict {
    let mut compared = 0usize;
    let mut mismatched = Vec::new();
    for seed in [1u64, 2, 3] {
        let (data, queries) = gen_synthetic(&synthetic(seed, Layout::Clustered, 8)).map_err(|e| e.to_string())?;
        let w = suggest_width(&data, 200, seed).map_err(|e| e.to_string())?;
        let family = Arc::new(sample_family(seed, DIM, 6, 16, w).map_err(|e| e.to_string())?);
        let index = SequentialIndex::build(family.clone(), &data).map_err(|e| e.to_string())?;
        let params = [SearchParams::new(K, 1), SearchParams::new(K, 4)];
        let expected: Vec<Vec<Vec<Neighbor>>> = params
            .iter()
            .map(|p| queries.iter().map(|q| sequential_search(&index, q, p).unwrap()).collect())
            .collect();
        for (n_bi, n_dp) in [(1, 1), (2, 8), (4, 8)] {
            let topology = StageTopology::new(n_bi, n_dp);
            for kind in [StrategyKind::Mod, StrategyKind::Zorder, StrategyKind::Lsh] {
                let strategy = StrategySpec::of(kind).build(&data, &family, n_dp).map_err(|e| e.to_string())?;
                let in_process = PipelineSpec {
                    topology,
                    ..Default::default()
                };
                for (transport, spec) in [("in-process", in_process), ("socket", socket_spec(topology))] {
                    let label = format!("seed {seed} {n_bi}x{n_dp} {kind} {transport}");
                    let p = Pipeline::launch(family.clone(), strategy.clone(), &spec).map_err(|e| format!("{label}: {e}"))?;
                    p.ingest(&data).map_err(|e| format!("{label}: {e}"))?;
                    for (params, want) in params.iter().zip(&expected) {
                        let got = p
                            .search_batch(&queries, params)
                            .and_then(|b| b.into_results())
                            .map_err(|e| format!("{label}: {e}"))?;
                        compared += got.len();
                        let bad = got.iter().zip(want).filter(|(g, w)| &g.neighbors != *w).count();
                        if bad > 0 {
                            mismatched.push(format!("{label} T={}: {bad} queries differ", params.probes));
                        }
                    }
                }
            }
        }
    }
    Ok((
        mismatched.is_empty(),
        format!(
            "{compared} query results over 54 configurations x T in {{1,4}}; mismatches: {}",
            if mismatched.is_empty() { "none".into() } else { mismatched.join("; ") }
        ),
    ))
}

fn c2_recall_monotone_in_t() -> Verdict {
    let runs = t_sweep()?;
    let recalls: Vec<f64> = runs.iter().map(|r| r.report.recall).collect();
    let monotone = recalls.windows(2).all(|w| w[1] >= w[0]);
    let gain = recalls[recalls.len() - 1] - recalls[0];
    Ok((
        monotone && gain >= 0.01,
        format!(
            "recall@10 for T=1,2,4,8,16,32: {}; cumulative gain {gain:.3}",
            recalls.iter().map(|r| format!("{r:.3}")).collect::<Vec<_>>().join(", ")
        ),
    ))
}

fn c3_sublinear_traffic() -> Verdict {
    let runs = t_sweep()?;
    let at = |t: usize| runs.iter().find(|r| r.report.config.search.probes == t).unwrap();
    let (a, b) = (&at(8).report.search_traffic, &at(16).report.search_traffic);
    let transport = b.transport() as f64 / a.transport() as f64;
    let cand = |t: &TrafficCounters| t.stream("CANDIDATES").map_or(0, |s| s.logical) as f64;
    let logical = cand(b) / cand(a);
    let bytes = b.bytes() as f64 / a.bytes() as f64;
    Ok((
        transport <= 1.95 && logical <= 1.95,
        format!(
            "T 8 -> 16: transport msgs {} -> {} (x{transport:.3}), BI->DP logical {} -> {} (x{logical:.3}), bytes x{bytes:.3}; limit 1.95",
            a.transport(),
            b.transport(),
            cand(a),
            cand(b)
        ),
    ))
}

/// Coarse LSH map used for the traffic comparison: half the index's
/// functions at four times its width.
fn coarse_map(index: &LshFamily) -> StrategySpec {
    StrategySpec {
        map_functions: Some(index.functions() / 2),
        map_width: Some(index.width() * 4.0),
        ..StrategySpec::of(StrategyKind::Lsh)
    }
}

fn c4_partition_traffic() -> Verdict {
    let mut ok = true;
    let mut lines = Vec::new();
    for clusters in [2, 4, 8] {
        let (data, queries) = gen_synthetic(&synthetic(4, Layout::Clustered, clusters)).map_err(|e| e.to_string())?;
        let w = suggest_width(&data, 200, 4).map_err(|e| e.to_string())?;
        let family = Arc::new(sample_family(4, DIM, 6, 16, w).map_err(|e| e.to_string())?);
        let spec = PipelineSpec {
            topology: StageTopology::new(2, 8),
            ..Default::default()
        };
        let mut traffic = Vec::new();
        for s in [StrategySpec::of(StrategyKind::Mod), coarse_map(&family)] {
            let strategy = s.build(&data, &family, 8).map_err(|e| e.to_string())?;
            let p = Pipeline::launch(family.clone(), strategy, &spec).map_err(|e| e.to_string())?;
            p.ingest(&data).map_err(|e| e.to_string())?;
            let build = p.counters().map_err(|e| e.to_string())?.transport();
            let b = p.search_batch(&queries, &SearchParams::new(K, 4)).map_err(|e| e.to_string())?;
            b.first_error().map_err(|e| e.to_string())?;
            traffic.push((build, b.traffic.transport()));
        }
        let ratio = traffic[1].1 as f64 / traffic[0].1 as f64;
        ok &= ratio <= 0.9;
        lines.push(format!(
            "{clusters} clusters: search transport lsh {} / mod {} = {ratio:.3} (build phase {} / {})",
            traffic[1].1, traffic[0].1, traffic[1].0, traffic[0].0
        ));
    }
    Ok((ok, format!("{}; limit 0.9", lines.join("; "))))
}

trait FirstError {
    fn first_error(&self) -> Result<()>;
}

impl FirstError for SearchBatch {
    fn first_error(&self) -> Result<()> {
        match self.results.iter().find_map(|r| r.as_ref().err()) {
            Some(e) => Err(Error::State(e.to_string())),
            None => Ok(()),
        }
    }
}

fn c5_load_imbalance() -> Verdict {
    let (data, _) = gen_synthetic(&SyntheticSpec {
        n_queries: 0,
        ..synthetic(5, Layout::Uniform, 1)
    })
    .map_err(|e| e.to_string())?;
    let w = suggest_width(&data, 200, 5).map_err(|e| e.to_string())?;
    let family = Arc::new(sample_family(5, DIM, 6, 16, w).map_err(|e| e.to_string())?);
    let spec = PipelineSpec {
        topology: StageTopology::new(2, 8),
        ..Default::default()
    };
    // fine-grained map: the index's M at half its width
    let fine = StrategySpec {
        map_width: Some(w / 2.0),
        ..StrategySpec::of(StrategyKind::Lsh)
    };
    let mut out = Vec::new();
    for s in [StrategySpec::of(StrategyKind::Mod), fine] {
        let strategy = s.build(&data, &family, 8).map_err(|e| e.to_string())?;
        let p = Pipeline::launch(family.clone(), strategy, &spec).map_err(|e| e.to_string())?;
        p.ingest(&data).map_err(|e| e.to_string())?;
        let c = p.census().map_err(|e| e.to_string())?;
        let counts = c.dp_objects.iter().map(|&x| x as usize).collect();
        out.push(PartitionCensus::from_counts(counts).map_err(|e| e.to_string())?);
    }
    Ok((
        out[0].imbalance_pct == 0.0 && out[1].imbalance_pct <= 5.0,
        format!(
            "mod {:.3}% (counts {:?}); lsh {:.3}% (counts {:?}); limits 0% and 5%",
            out[0].imbalance_pct, out[0].counts, out[1].imbalance_pct, out[1].counts
        ),
    ))
}

fn c6_m_selectivity() -> Verdict {
    let runs = eval::sweep_prepared(&base_config(1, 6, 16, 4), SweepAxis::M, &values(&[12, 16, 20]), shared())
        .map_err(|e| e.to_string())?;
    check_runs(&runs)?;
    let recall: Vec<f64> = runs.iter().map(|r| r.report.recall).collect();
    let cands: Vec<f64> = runs.iter().map(|r| r.report.mean_candidates).collect();
    let decreasing = |v: &[f64]| v.windows(2).all(|w| w[1] < w[0]);
    Ok((
        decreasing(&recall) && decreasing(&cands),
        format!("M=12,16,20 at L=6,T=4: recall {recall:.3?}, mean candidates {cands:.1?}"),
    ))
}

fn mean_candidates(rs: &[QueryResult]) -> f64 {
    rs.iter().map(|r| r.stats.candidates as f64).sum::<f64>() / rs.len() as f64
}

fn c7_tables_vs_probes() -> Verdict {
    let prep = shared();
    let spec = PipelineSpec {
        topology: StageTopology::new(2, 8),
        ..Default::default()
    };
    let measure = |p: &Pipeline, t: usize| -> Result<(f64, f64), String> {
        let rs = p
            .search_batch(&prep.queries, &SearchParams::new(K, t))
            .and_then(|b| b.into_results())
            .map_err(|e| e.to_string())?;
        let ids: Vec<Vec<ObjId>> = rs.iter().map(|r| r.neighbors.iter().map(|n| n.obj_id).collect()).collect();
        Ok((recall_at_k(&ids, &prep.truth, K).map_err(|e| e.to_string())?, mean_candidates(&rs)))
    };
    let launch = |tables: usize| -> Result<Pipeline, String> {
        let f = Arc::new(sample_family(1, DIM, tables, 16, prep.width).map_err(|e| e.to_string())?);
        let p = Pipeline::launch(f, PartitionStrategy::Mod, &spec).map_err(|e| e.to_string())?;
        p.ingest(&prep.data).map_err(|e| e.to_string())?;
        Ok(p)
    };
    let t8 = 2;
    let (r8, c8) = {
        let p = launch(8)?;
        measure(&p, t8)?
    };
    let p2 = launch(2)?;
    // recall is non-decreasing in T, so the first T reaching the band is found by bisection
    let (mut lo, mut hi) = (1usize, 512usize);
    let mut at_hi = measure(&p2, hi)?;
    if at_hi.0 < r8 - 0.02 {
        return Ok((false, format!("L=2 never reaches recall {:.3} by T={hi} (got {:.3})", r8 - 0.02, at_hi.0)));
    }
    while lo < hi {
        let mid = (lo + hi) / 2;
        let m = measure(&p2, mid)?;
        if m.0 >= r8 - 0.02 {
            hi = mid;
            at_hi = m;
        } else {
            lo = mid + 1;
        }
    }
    let (t2, (r2, c2)) = (hi, at_hi);
    Ok((
        (r2 - r8).abs() <= 0.02 && t2 > t8 && c2 > c8,
        format!("L=8,T={t8}: recall {r8:.3}, {c8:.0} candidates/query; L=2 matched at T={t2}: recall {r2:.3}, {c2:.0} candidates/query"),
    ))
}

/// Collision probability of one p-stable function for points at distance `c`.
fn p_stable_collision(c: f64, w: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).unwrap();
    let s = w / c;
    1.0 - 2.0 * n.cdf(-s) - 2.0 / ((2.0 * std::f64::consts::PI).sqrt() * s) * (1.0 - (-s * s / 2.0).exp())
}

fn c8_family_sensitivity() -> Verdict {
    const FUNCS: usize = 10_000;
    let (d, w) = (32, 4.0);
    let family = sample_family(8, d, FUNCS, 1, w).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(88);
    let mut collisions = |r: f64| -> usize {
        (0..FUNCS)
            .filter(|&j| {
                let u: Vec<f32> = (0..d).map(|_| rng.random_range(-50.0..50.0)).collect();
                let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
                let norm = dir.iter().map(|x| x * x).sum::<f64>().sqrt();
                let v: Vec<f32> = u.iter().zip(&dir).map(|(&a, &b)| (f64::from(a) + r * b / norm) as f32).collect();
                family.hash_slots(j, &u).unwrap() == family.hash_slots(j, &v).unwrap()
            })
            .count()
    };
    let std_normal = Normal::new(0.0, 1.0).unwrap();
    let n = FUNCS as f64;
    let mut ok = true;
    let mut lines = Vec::new();
    for r in [0.5 * w, w, 2.0 * w] {
        let (a, b) = (collisions(r) as f64 / n, collisions(4.0 * r) as f64 / n);
        let pooled = (a + b) / 2.0;
        let z = (a - b) / (pooled * (1.0 - pooled) * 2.0 / n).sqrt();
        let p = 1.0 - std_normal.cdf(z);
        // empirical rates against the closed form, within 4 standard errors
        let near = |obs: f64, c: f64| {
            let e = p_stable_collision(c, w);
            (obs - e).abs() <= 4.0 * (e * (1.0 - e) / n).sqrt()
        };
        let analytic = near(a, r) && near(b, 4.0 * r);
        ok &= p < 0.01 && analytic;
        lines.push(format!(
            "r={r}: p(r)={a:.4} (closed form {:.4}), p(4r)={b:.4} (closed form {:.4}), z={z:.1}, p-value {p:.2e}",
            p_stable_collision(r, w),
            p_stable_collision(4.0 * r, w)
        ));
    }
    Ok((ok, lines.join("; ")))
}

fn c9_runtime_soundness() -> Verdict {
    let prep = shared();
    let family = Arc::new(sample_family(1, DIM, 6, 16, prep.width).map_err(|e| e.to_string())?);
    let params = SearchParams::new(K, 4);
    let topology = StageTopology::new(2, 8);
    let mut problems = Vec::new();
    let mut results = Vec::new();
    let mut transport = Vec::new();
    for (label, spec) in [
        ("aggregated", PipelineSpec { topology, ..Default::default() }),
        (
            "unaggregated",
            PipelineSpec {
                topology,
                runtime: RuntimeOptions {
                    flush_count: 1,
                    ..Default::default()
                },
                ..Default::default()
            },
        ),
        ("socket", socket_spec(topology)),
    ] {
        let p = Pipeline::launch(family.clone(), PartitionStrategy::Mod, &spec).map_err(|e| e.to_string())?;
        p.ingest(&prep.data).map_err(|e| e.to_string())?;
        let b = p.search_batch(&prep.queries, &params).map_err(|e| e.to_string())?;
        let t = b.traffic.clone();
        let rs = b.into_results().map_err(|e| e.to_string())?;
        let rt = p.runtime();
        rt.drain_barrier().map_err(|e| e.to_string())?;
        let loads = rt.stage_loads().map_err(|e| e.to_string())?;
        if let Some(l) = loads.iter().find(|l| l.queued + l.active + l.buffered > 0) {
            problems.push(format!("{label}: stage {} not idle after barrier: {l:?}", l.name));
        }
        let c = p.counters().map_err(|e| e.to_string())?;
        for s in &c.streams {
            if s.delivered != s.logical {
                problems.push(format!("{label}: stream {} sent {} delivered {}", s.name, s.logical, s.delivered));
            }
        }
        results.push(rs.into_iter().map(|r| r.neighbors).collect::<Vec<_>>());
        transport.push((t.logical(), t.transport()));
    }
    if results[0] != results[1] || results[0] != results[2] {
        problems.push("results differ between aggregated, unaggregated and socket runs".into());
    }
    if transport[0].0 != transport[1].0 || transport[0].1 >= transport[1].1 {
        problems.push(format!("aggregation did not change only transport counts: {transport:?}"));
    }
    Ok((
        problems.is_empty(),
        if problems.is_empty() {
            format!(
                "delivered == sent on every stream, queues empty after barrier, search transport {} aggregated vs {} unaggregated with identical results",
                transport[0].1, transport[1].1
            )
        } else {
            problems.join("; ")
        },
    ))
}

fn c10_thread_scaling_proxy() -> Verdict {
    let prep = shared();
    // M=12 and T=8 make the DP distance work dominate
    let family = Arc::new(sample_family(1, DIM, 6, 12, prep.width).map_err(|e| e.to_string())?);
    let params = SearchParams::new(K, 8);
    let mut qps = Vec::new();
    for threads in [1, 8] {
        let mut topology = StageTopology::new(1, 1);
        topology.dp.threads = threads;
        let spec = PipelineSpec {
            topology,
            ..Default::default()
        };
        let p = Pipeline::launch(family.clone(), PartitionStrategy::Mod, &spec).map_err(|e| e.to_string())?;
        p.ingest(&prep.data).map_err(|e| e.to_string())?;
        let t = Instant::now();
        p.search_batch(&prep.queries, &params)
            .and_then(|b| b.into_results())
            .map_err(|e| e.to_string())?;
        qps.push(prep.queries.len() as f64 / t.elapsed().as_secs_f64());
    }
    let ratio = qps[1] / qps[0];
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    Ok((
        ratio >= 3.0,
        format!(
            "same-box proxy: {:.0} q/s with 1 DP thread, {:.0} q/s with 8 (x{ratio:.2}, limit 3.0) on {cores} available core(s)",
            qps[0], qps[1]
        ),
    ))
}

/// Criteria that cannot pass on the current machine, with the reason. Their
/// verdict is still printed; it does not fail the suite.
fn hardware_waiver(id: u32) -> Option<String> {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    (id == 10 && cores < 8).then(|| format!("needs >= 8 cores for an 8-thread speedup, machine has {cores}"))
}

fn main() {
    let criteria: [(u32, &str, fn() -> Verdict); 10] = [
        (1, "oracle-equivalence", c1_oracle_equivalence),
        (2, "recall-monotone-in-T", c2_recall_monotone_in_t),
        (3, "sublinear-traffic-in-T", c3_sublinear_traffic),
        (4, "partition-traffic-ordering", c4_partition_traffic),
        (5, "load-imbalance", c5_load_imbalance),
        (6, "M-selectivity", c6_m_selectivity),
        (7, "tables-vs-probes", c7_tables_vs_probes),
        (8, "family-sensitivity", c8_family_sensitivity),
        (9, "runtime-soundness", c9_runtime_soundness),
        (10, "thread-scaling-proxy", c10_thread_scaling_proxy),
    ];
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = |id: u32, name: &str| {
        filters.is_empty() || filters.iter().any(|f| f.parse::<u32>() == Ok(id) || name.contains(f.as_str()))
    };
    let mut failures = 0;
    let mut ran = 0;
    for (id, name, check) in criteria {
        if !selected(id, name) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let (pass, detail) = match verdict {
            Ok(v) => v,
            Err(e) => (false, format!("error: {e}")),
        };
        let waiver = (!pass).then(|| hardware_waiver(id)).flatten();
        let tag = match (pass, &waiver) {
            (true, _) => "PASS",
            (false, Some(_)) => "FAIL (expected on this machine)",
            (false, None) => "FAIL",
        };
        println!("[{tag}] criterion {id:>2} {name}: {detail} [{secs:.1}s]");
        if let Some(w) = waiver {
            println!("       waiver: {w}");
        } else if !pass {
            failures += 1;
        }
    }
    println!("acceptance: {ran} criteria run, {failures} unexpected failure(s)");
    if failures > 0 {
        std::process::exit(1);
    }
}
