//! Training and evaluation plumbing: configuration, optimizer, checkpoints,
//! manifests, the procedural corpus and the evaluation flows.

pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod dataset;
pub mod eval;
pub mod optim;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use config::{RunConfig, RunMode};
pub use corpus::{generate_synthetic_corpus, synthesize_corpus, CorpusSpec};
pub use dataset::{load_dataset, load_synth_dataset, Sample, SampleRecord};
pub use eval::{center_bias_baseline, evaluate, evaluate_predictions, zero_shot_eval, EvalReport};
pub use train::{train, TrainOptions, TrainOutcome};
