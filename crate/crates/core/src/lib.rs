//! Normalizing-flow OOD detection with a likelihood-based contrastive
//! objective, on top of a small reverse-mode tensor engine.

mod container;
pub mod datasets;
pub mod error;
pub mod flow;
pub mod loss;
pub mod metrics;
pub mod nd;
pub mod oodscore;
pub mod rng;
pub mod train;

pub use datasets::{read_features, write_features, FeatureDataset, UNLABELED};
pub use error::{Error, Result};
pub use flow::{
    flow_forward, flow_inverse, init_model, load_checkpoint, save_checkpoint, FlowModel, FlowOutput,
};
pub use loss::{total_loss, BatchLatent, LossConfig, LossValues};
pub use metrics::{evaluate_suite, EvalConfig, EvalReport, Metrics, SuiteReport};
pub use nd::Tensor;
pub use oodscore::{compute_prototypes, ood_score, ClassPrototypes};
pub use train::{adam_step, fit, train_epoch, AdamConfig, AdamState, TrainConfig, TrainState};
