//! Hybrid convolutional encoder and transformer models for minute-level
//! wearable sensor streams, with the data pipeline, handcrafted-feature
//! baselines and evaluation protocol needed to train and compare them.

pub mod baselines;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod features;
pub mod model;
pub mod numerics;
pub mod synth;
pub mod training;

pub use data::{
    DailyLabels, DayLabel, Dataset, ExampleKey, Normalization, Participant, ParticipantSeries, SplitPlan, SplitSpec,
    Task, Window, WindowSpec,
};
pub use error::{Error, ErrorCategory, Result};
pub use numerics::{AdamConfig, AdamState, Gradients, Tape, Tensor, Var};
pub use synth::{generate_cohort, CohortConfig, CohortGenerator, EffectSizes, GroundTruth, IllnessEpisode};
