//! Retrieval evaluation: datasets, AP, ranking and experiment reports.

mod ap;
mod dataset;
mod experiment;
mod generate;

pub use ap::{average_precision, rank_database, ApConvention};
pub use dataset::{
    prepare_query, DatabaseEntry, GroundTruth, QueryRecord, QuerySubset, RetrievalDataset, DEFAULT_ORIGINAL_DIM,
};
pub use experiment::{
    attack_queries, database_descriptors, evaluate_attacks, load_attacks, run_experiment, save_attacks,
    similarity_report, AttackPlan, DatabaseIndex, EvalReport, EvalSummary, ExperimentSpec, QueryAttack, QueryRow,
    SimilarityReport, SimilarityRow,
};
pub use generate::{write_synthetic_dataset, SyntheticDatasetSpec};

#[cfg(test)]
mod tests;
