//! Training loop, checkpoints, metrics and the evaluation suite.

pub mod ablate;
pub mod checkpoint;
pub mod cost;
pub mod eval;
pub mod metrics;
pub mod optim;
pub mod trainer;

pub use ablate::{ablate, AblationRow, AblationTable};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use cost::{cost_report, CostReport, REFERENCE_LENGTH};
pub use eval::{
    evaluate_fixed, evaluate_random, predict_all_heads, predict_routed, EvalRow, EvalTable,
    AVG_CONDITION, DEFAULT_MR_GRID, FIXED_ORDER,
};
pub use metrics::{acc2, acc2_with, acc7, intensity_class, mae, ZeroPrediction};
pub use optim::{Adam, AdamConfig};
pub use trainer::{train, validation_mae, EpochLog, TrainConfig, TrainOutcome};
