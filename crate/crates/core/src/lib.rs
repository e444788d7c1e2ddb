//! Decision-pretrained transformers, end to end: a small f64 tensor/autodiff
//! engine, a GPT-style sequence model over in-context decision datasets, task
//! distributions (multi-armed/linear bandits, Dark Room gridworlds), dataset
//! generators for pretraining, classical bandit baselines, supervised
//! pretraining, offline/online deployment, and exact posterior-sampling
//! checks on small enumerable task families.
//!
//! The pieces compose bottom-up: [`numerics`] knows nothing about models,
//! [`model`] knows nothing about environments (it consumes encoded
//! sequences), and [`training`]/[`evaluation`]/[`theory`] tie the layers
//! together.

pub mod baselines;
pub mod datagen;
pub mod environments;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod theory;
pub mod training;

pub use datagen::{DatasetKind, GoalPartition, PretrainSample, PretrainSpec, TaskFamilyConfig};
pub use environments::{BanditTask, DarkRoomTask, State, TabularMdp, Task, Transition};
pub use model::{ModelConfig, ModelState, StateEncoding};
pub use numerics::{Rng, Tensor};
