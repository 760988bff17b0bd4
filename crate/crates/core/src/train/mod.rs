//! Losses, metrics, optimization and k-fold training.

mod folds;
mod loss;
pub mod metrics;
mod optim;
mod trainer;

pub use folds::{hold_out, kfold_split, split_hash, Fold};
pub use loss::{combined_loss, cross_entropy, DICE_SMOOTH};
pub use metrics::{boundary, dice_score, hd95, mean_std, ClassScore};
pub use optim::{adam_step, cosine_lr, Adam, AdamState, ADAM_EPS, BETA1, BETA2};
pub use trainer::{
    aggregate, derive_seed, evaluate, train_fold, train_fold_with, Aggregate, ClassSummary, EarlyStopper, EpochRecord,
    EvalSummary, FoldData, FoldReport, SampleScore, StopDecision, TrainConfig, SEED_HOLDOUT, SEED_MODEL, SEED_TRAIN,
};
