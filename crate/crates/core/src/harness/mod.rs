//! Synthetic data, training, evaluation and the inference-reduction
//! experiments.

pub mod data;
pub mod eval;
pub mod experiments;
pub mod train;

pub use data::{
    class_color, export_dataset, generate_dataset, generate_scene, import_dataset, SceneSpec, SyntheticScene,
    IGNORE_INDEX,
};
pub use eval::{argmax_lastdim, confusion_matrix, evaluate, worker_count, Metrics};
pub use experiments::{feature_similarity, isr_experiments, IsrInputs, IsrReport, RatioTransfer, Verdict};
pub use train::{batch_plan, train, train_new, train_step, StepLog, TrainConfig, TrainState};
