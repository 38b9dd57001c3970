//! Desk-scale experiment harness: synthetic scenes, matching and AP, the
//! toy detection pipeline, training, gradient suite, ablations, fixtures.

pub mod ablation;
pub mod config;
pub mod fixtures;
pub mod gradsuite;
pub mod metrics;
pub mod model;
pub mod reparam;
pub mod scene;
pub mod train;

pub use ablation::{run_ablation, AblationRow};
pub use config::RunConfig;
pub use gradsuite::{run_grad_suite, GradRecord, GradSuiteReport};
pub use metrics::{assign_for_training, evaluate_ap, greedy_match, interpolated_ap};
pub use model::{count_params, Pipeline, PipelineOutput};
pub use reparam::{verify_reparam, ReparamRecord};
pub use scene::{gen_synthetic_scene, read_boxsets_csv, write_boxsets_csv, BoxSet, Scene};
pub use train::{train_toy, AdamW, StepRecord, TrainOutcome};
