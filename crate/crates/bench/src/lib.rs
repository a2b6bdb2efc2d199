//! Shared fixtures for the benchmarks.

use std::sync::Arc;

use dlsh_core::dataset::{gen_synthetic, SyntheticSpec};
use dlsh_core::lsh::suggest_width;
use dlsh_core::{sample_family, FeatureVector, LshFamily};

pub struct Fixture {
    pub data: Vec<FeatureVector>,
    pub queries: Vec<FeatureVector>,
    pub width: f64,
}

/// Clustered 128-d reference set and queries.
pub fn fixture(n_points: usize, n_queries: usize) -> Fixture {
    let (data, queries) = gen_synthetic(&SyntheticSpec {
        n_points,
        n_queries,
        dim: 128,
        ..Default::default()
    })
    .expect("synthetic data");
    let width = suggest_width(&data, 100, 1).expect("width");
    Fixture { data, queries, width }
}

pub fn family(fx: &Fixture, tables: usize, functions: usize) -> Arc<LshFamily> {
    Arc::new(sample_family(1, 128, tables, functions, fx.width).expect("family"))
}
