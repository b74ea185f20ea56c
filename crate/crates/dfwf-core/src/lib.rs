//! Desk-scale continual-learning laboratory for fake-audio detection.
//!
//! The pipeline: LFCC features ([`frontend`]), a small reverse-mode tensor
//! engine ([`tensor`]), an LCNN-style binary classifier ([`model`]), the
//! regularized objective combining cross-entropy with knowledge distillation
//! and positive-sample alignment ([`losses`]), sequential-task training
//! strategies ([`trainer`]), EER/AvgEER evaluation ([`metrics`]), and a
//! seeded synthetic benchmark generator ([`data`]).

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod frontend;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use error::{Error, Result};
pub use frontend::{FeatureMatrix, LfccConfig, Waveform, TARGET_FRAMES};
pub use losses::{DistillationConfig, LossBreakdown, LossWeights};
pub use metrics::{avg_eer, compute_eer, EvalReport, Label, ScoreRecord};
pub use model::{Classifier, ConvBlock, LcnnConfig, StatPooling};
pub use optim::{AdamConfig, AdamState};
pub use tensor::{Graph, NodeId, ParamSet, Parameter, PsaForm, Tensor};
pub use trainer::{
    run_sequence, train_task, SequenceResult, StrategyKind, TaskFeatures, TaskSequence,
    TrainingStrategy,
};
