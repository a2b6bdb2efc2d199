//! Distributed multi-probe locality-sensitive hashing.

mod codec;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod index;
pub mod lsh;
pub mod partition;
pub mod pipeline;
pub mod probe;
pub mod rank;
pub mod runtime;

pub use dataset::{brute_force_knn, gen_synthetic, GroundTruth, SyntheticSpec};
pub use error::{Error, Result};
pub use eval::{recall_at_k, ExperimentConfig, ExperimentReport};
pub use index::{sequential_search, SearchOutcome, SearchParams, SequentialIndex};
pub use lsh::{hash_point, sample_family, BucketId, BucketKey, FamilyParams, FeatureVector, LshFamily, ObjId};
pub use partition::{bucket_map, build_zorder_ranges, census, morton_code, obj_map, PartitionCensus, PartitionStrategy, StrategyKind, StrategySpec};
pub use pipeline::{IngestReport, Pipeline, PipelineSpec, QueryResult, QueryStats, SearchBatch, StageSpec, StageTopology, TransportSpec};
pub use probe::{probe_plan, probe_sequence};
pub use rank::{distance_sq, top_k, Neighbor};
pub use runtime::{RuntimeOptions, StageId, StreamId, TrafficCounters};
