//! Subspace prompt tuning on a frozen toy text encoder.
//!
//! The crate trains a prompt (a small matrix of context-token embeddings) by
//! full-batch gradient descent on a synthetic few-shot task, records the
//! per-epoch checkpoints, fits a PCA subspace over an early window of them,
//! and reruns training with every gradient projected onto that subspace. An
//! optional cosine-similarity regularizer pulls text features of chosen
//! classes toward frozen teacher features.

// `!(x >= 0.0)` style checks are meant to reject NaN too.
#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod cli;
pub mod error;
pub mod linalg;
pub mod model;
pub mod subspace;
pub mod synth;
mod textio;
pub mod trainer;
pub mod trajectory;

pub use error::{Error, Result};
pub use linalg::{eig_sym, orthonormalize, DenseMatrix, EigResult};
pub use model::{
    ce_loss_and_grad, nfl_loss_and_grad, predict_proba, total_loss_and_grad, CeInputs, ClassEmbedding, Encoder,
    Feature, LossGrad, NflInputs, PromptState, Reduction, Sample,
};
pub use subspace::{leading_alignment, pca_fit, project, Subspace};
pub use synth::{generate_task, generate_task_for, teacher_features, SpuriousTestMode, SynthConfig, SyntheticTask};
pub use trainer::{
    analyze_orthogonality, evaluate, subpt_pipeline, train, EpochMetrics, LrSchedule, Mode, NflTarget,
    OrthogonalityReport, PipelineResult, RunResult, TrainConfig,
};
pub use trajectory::Trajectory;
