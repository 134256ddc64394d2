//! Training loops: EMA teacher tracking, frame-budgeted batching, gradient
//! accumulation, learning-rate schedules, pretraining and finetuning
//! drivers, and checkpoints.

mod batching;
mod checkpoint;
mod data;
mod ema;
mod finetune;
mod metrics;
mod pretrain;
mod schedule;

pub use batching::{plan_batches, plan_fixed, Batch, BatchPlan, SHUFFLE_WINDOW};
pub use checkpoint::{Checkpoint, MAGIC, VERSION};
pub use data::{encoder_labels, normalize, utterance_seed, Corpus, NoiseMix, Utterance};
pub use ema::ema_update;
pub use finetune::{finetune, frozen_layers, Downstream, FinetuneConfig, HeadKind};
pub use metrics::{MetricsLog, StepRecord};
pub use pretrain::{crop_frames, Batching, Objective, PretrainConfig, Pretrainer};
pub use schedule::{lr_at, ScheduleConfig, ScheduleKind, TRI_PHASE_FLOOR};
