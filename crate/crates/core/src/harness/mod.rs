//! Run orchestration: configuration, file formats, model assembly, training,
//! evaluation, ablations and the whole-model gradient check.

pub mod ablation;
pub mod archive;
mod bytes;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod train;

pub use ablation::{run_ablation_matrix, AblationRow, AblationTable};
pub use archive::TensorArchive;
pub use checkpoint::Checkpoint;
pub use config::{AblationFlags, EvalConfig, Paths, RunConfig, ScheduleConfig, TeacherConfig, Variant};
pub use eval::{evaluate, standard_splits, EvalReport, SplitReport};
pub use gradcheck::{gradcheck_all, tiny_config};
pub use model::{pretrain_backbones, pretrain_brain, pretrain_image, BmflModel, Features};
pub use train::{save_metrics_csv, train, write_metrics_csv, RunSummary, StepLog, TrainResult};
