//! Evaluation harness: yes/no QA metrics, CHAIR, calibration of the
//! uncertainty score, seeded corpora and pipeline benchmarks.

mod benchmark;
mod corpus;
mod metrics;

pub use benchmark::{
    biased_model, calibration_csv, metrics_csv, run_benchmark, scalar_metrics, uncertainty_score, BenchmarkConfig,
    BenchmarkReport, ItemResult, Pipeline, ScoreReduction, FIXTURE_BIAS,
};
pub use corpus::{generate_corpus, parse_corpus, write_corpus, CorpusItem, Setting, MAX_OBJECTS, MIN_OBJECTS};
pub use metrics::{
    auroc, bin_index, binary_metrics, chair_metrics, ece, BinaryMetrics, CalibrationBin, CalibrationReport,
    ChairMetrics, EvalRecord,
};
