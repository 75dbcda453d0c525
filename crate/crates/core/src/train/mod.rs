//! Optimization of the recursive network: L1 loss, Adam with a cosine
//! schedule, the batch-parallel training loop, tiled evaluation,
//! checkpoints and ablation sweeps.

mod ablation;
mod checkpoint;
mod config;
mod data;
mod eval;
mod optim;
mod trainer;

pub use ablation::{ablation_rows, run_ablation, AblationAxis, AblationRow, AblationTable, TABLE_COLUMNS};
pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, meta_path, read_checkpoint, read_meta, write_checkpoint, Checkpoint,
    CheckpointMeta, ADAM_M_PREFIX, ADAM_V_PREFIX,
};
pub use config::{auto_branch, ModelConfig, TrainConfig};
pub use data::{Dataset, Scene};
pub use eval::{
    evaluate_baseline, evaluate_scenes, inference_policy, predict_tiled, tile_starts, EvalReport, SceneMetrics,
};
pub use optim::{cosine_lr, l1_loss, Adam};
pub use trainer::{sample_seed, LogRecord, Model, Trainer};
