use std::sync::Arc;

use dlsh_core::{
    brute_force_knn, gen_synthetic, recall_at_k, sample_family, sequential_search, ExperimentConfig, FeatureVector,
    PartitionStrategy, Pipeline, PipelineSpec, SearchParams, SequentialIndex, StageTopology, SyntheticSpec,
};
use proptest::prelude::*;

fn points(seed: u64, n: usize, dim: usize, base_id: u64) -> Vec<FeatureVector> {
    // small LCG so proptest only has to shrink the seed
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n)
        .map(|i| {
            let coords = (0..dim)
                .map(|_| {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    ((s >> 40) % 64) as f32 / 4.0
                })
                .collect();
            FeatureVector::new(base_id + i as u64, coords)
        })
        .collect()
}

fn spec(n_bi: usize, n_dp: usize) -> PipelineSpec {
    PipelineSpec {
        topology: StageTopology::new(n_bi, n_dp),
        runtime: Default::default(),
        transport: Default::default(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn pipeline_agrees_with_sequential_search(
        seed in any::<u64>(),
        n in 1usize..300,
        n_bi in 1usize..4,
        n_dp in 1usize..6,
        tables in 1usize..5,
        probes in 1usize..10,
        k in 1usize..12,
    ) {
        let dim = 8;
        let data = points(seed, n, dim, 0);
        let queries = points(seed ^ 0xabc, 7, dim, 1 << 32);
        let family = Arc::new(sample_family(seed, dim, tables, 4, 6.0).unwrap());
        let index = SequentialIndex::build(family.clone(), &data).unwrap();
        let params = SearchParams::new(k, probes);

        let pipeline = Pipeline::launch(family, PartitionStrategy::Mod, &spec(n_bi, n_dp)).unwrap();
        prop_assert_eq!(pipeline.ingest(&data).unwrap().stored, n as u64);
        let results = pipeline.search_batch(&queries, &params).unwrap().into_results().unwrap();
        for (q, r) in queries.iter().zip(&results) {
            prop_assert_eq!(&r.neighbors, &sequential_search(&index, q, &params).unwrap());
        }
    }
}

#[test]
fn exhaustive_probing_of_one_table_recovers_exact_neighbors() {
    let data = points(3, 200, 4, 0);
    let queries = points(4, 5, 4, 1000);
    // one function with a huge width puts every point in one bucket
    let family = Arc::new(sample_family(1, 4, 1, 1, 1e9).unwrap());
    let pipeline = Pipeline::launch(family, PartitionStrategy::Mod, &spec(1, 3)).unwrap();
    pipeline.ingest(&data).unwrap();
    let got = pipeline
        .search_batch(&queries, &SearchParams::new(10, 1))
        .unwrap()
        .into_results()
        .unwrap();
    let truth = brute_force_knn(&data, &queries, 10).unwrap();
    let ids: Vec<Vec<_>> = got.iter().map(|r| r.neighbors.iter().map(|n| n.obj_id).collect()).collect();
    assert_eq!(recall_at_k(&ids, &truth, 10).unwrap(), 1.0);
}

#[test]
fn experiment_config_drives_a_full_run() {
    let mut cfg = ExperimentConfig::default();
    cfg.dataset = dlsh_core::eval::DatasetSource::Synthetic(SyntheticSpec {
        n_points: 2000,
        n_queries: 20,
        dim: 16,
        ..Default::default()
    });
    cfg.family.tables = 4;
    cfg.family.functions = 6;
    cfg.search.probes = 4;
    cfg.pipeline = spec(2, 4);
    let out = dlsh_core::eval::run_experiment(&cfg).unwrap();
    assert!(out.report.is_ok(), "{:?}", out.report.error);
    assert_eq!(out.report.n_points, 2000);
    assert_eq!(out.neighbors.len(), 20);
    assert!(out.report.recall > 0.0 && out.report.recall <= 1.0);
    assert!(out.report.config.family.width.is_some());

    let (data, queries) = gen_synthetic(&SyntheticSpec {
        n_points: 2000,
        n_queries: 20,
        dim: 16,
        ..Default::default()
    })
    .unwrap();
    assert_eq!((data.len(), queries.len()), (2000, 20));
}
