//! Desk-scale benchmark for temporal pyramid routing: synthetic
//! moving-shapes clips with instance ground truth, toy detection / mask /
//! tracking heads, spatio-temporal metrics, training and online inference.

pub mod bench;
pub mod data;
pub mod heads;
pub mod infer;
pub mod metrics;
pub mod model;
pub mod train;

pub use bench::{evaluate_model, EvalReport};
pub use data::{gen_clip, gen_dataset, Clip, ClipGroundTruth, SynthConfig};
pub use infer::{infer_clip, ClipPrediction, InferOptions, ReferenceMode};
pub use metrics::{evaluate, Metrics};
pub use model::{Model, ModelConfig, RunOptions};
pub use train::{train, StepLog, TrainProtocol};
