//! Joint diffusion over paired variables: a shared denoiser whose branches
//! exchange information through LoRA-adapted cross-attention, plus training,
//! sampling plans, guidance, synthetic data and evaluation.

pub mod adapters;
pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod denoiser;
pub mod error;
pub mod eval;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod sampling;
pub mod scalar;
pub mod schedule;
pub mod training;

pub use adapters::{
    attach, detach, effective_weight, init_joint_from_self_attention, AdapterId, AdapterMeta,
    AdapterOptions, AdapterSet, LoraAdapter, LoraRole,
};
pub use denoiser::{
    joint_cross_attention, scaled_dot_attention, AttentionWeights, BranchInput, DenoiserConfig,
    JointAttnModule, JointDenoiser, JointOverrides, JointSites, ProjOut,
};
pub use checkpoint::{Checkpoint, CheckpointKind, CheckpointMeta};
pub use data::{derive_condition, ConditionKind, PairKind, PairSpec};
pub use error::{Error, Result};
pub use optim::{AdamW, AdamWConfig};
pub use sampling::{build_interpolated_plan, build_plan, run_plan, Preset, PresetParams, SamplingPlan};
pub use scalar::Scalar;
pub use training::{train, Stage, TrainConfig, TrainReport};
pub use schedule::{
    add_noise, make_schedule, predict_x0, reverse_step, NoiseSchedule, ScheduleKind, ScheduleParams,
};

pub type JointDenoiser32 = JointDenoiser<f32>;
pub type JointDenoiser64 = JointDenoiser<f64>;
pub type AdapterSet32 = AdapterSet<f32>;
pub type AdapterSet64 = AdapterSet<f64>;
