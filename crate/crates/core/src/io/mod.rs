//! File formats, dataset manifests and dataset-level evaluation.

mod evaluate;
mod manifest;
mod zteb;

pub use evaluate::{
    evaluate_dataset, risk_check_dataset, sample_key, zeroshot_predict, ConfigEcho, EvaluationReport, FilterStats,
    Method, MethodSummary, RiskReport, RiskSummary, SamplePrediction, ZeroShotPrediction,
};
pub use manifest::{Dataset, DatasetManifest, SampleRecord};
pub use zteb::{
    decode_zteb, encode_zteb, read_embedding_file, write_embedding_file, DTYPE_F32, FILE_NORM_TOLERANCE, MAGIC, VERSION,
};
