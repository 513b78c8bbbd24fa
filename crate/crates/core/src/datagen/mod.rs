//! Synthetic datasets, client partitioning and IDX ingestion.

mod blobs;
mod dataset;
mod graphs;
mod idx;
mod partition;

pub use blobs::{apply_feature_shift, client_feature_offsets, make_blobs, BlobSpec};
pub use dataset::{Dataset, Features, TaskKind, Targets};
pub use graphs::{make_graph_tasks, GraphRule, GraphTaskSpec};
pub use idx::{idx_load, read_idx_images, read_idx_labels, IMAGE_MAGIC, LABEL_MAGIC};
pub use partition::{
    iid_partition, lda_partition, total_variation, DirichletParams, Partition,
    MAX_PARTITION_ATTEMPTS,
};

/// Generator input: what kind of synthetic samples to draw.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SyntheticTaskSpec {
    Blobs(BlobSpec),
    Graphs(GraphTaskSpec),
}

impl SyntheticTaskSpec {
    pub fn generate(&self, n: usize, seed: u64) -> crate::error::Result<Dataset> {
        match self {
            SyntheticTaskSpec::Blobs(s) => make_blobs(s, n, seed),
            SyntheticTaskSpec::Graphs(s) => make_graph_tasks(s, n, seed),
        }
    }
}
