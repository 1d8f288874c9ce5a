//! Desk-scale laboratory for group-relative policy optimization over toy
//! multi-turn environments.
//!
//! The crate wires together five layers:
//!
//! 1. [`envs`]: tiny episodic tasks (grid pushing, key-and-door, a bandit
//!    chain) that consume structured token responses and emit shaped rewards.
//! 2. [`policy`]: a log-linear softmax token policy with sparse hashed
//!    features and exact analytic gradients, small enough to verify against
//!    finite differences.
//! 3. [`rollout`] and [`advantage`]: group rollout collection, trajectory
//!    decomposition into single-turn samples, and the advantage estimators
//!    (group-normalized episode, anchor-state step, entropy-modulated).
//! 4. [`objective`]: the surrogate-loss family (token/sequence importance
//!    ratios, hard and soft clipping, sequence masking, dynamic group
//!    filtering, k3 KL penalty) behind one [`config::ObjectiveConfig`].
//! 5. [`trainer`] and [`diagnostics`]: behavior cloning, Adam, the staged
//!    training loop, and the collapse-forensics instrumentation (out-of-bounds
//!    token fractions, eight-group KL attribution, action-transition flows).
//!
//! Everything is f64, single-threaded, and deterministic given a run seed.

pub mod advantage;
pub mod config;
pub mod diagnostics;
pub mod envs;
pub mod hashing;
pub mod objective;
pub mod policy;
pub mod records;
pub mod rollout;
pub mod trainer;
pub mod types;

pub use config::{Aggregation, EnvConfig, FNorm, ObjectiveConfig, PolicyConfig, RunConfig, TrainerConfig, Variant};
pub use types::{
    AdvantageRecord, HistoryEntry, PromptContext, RolloutGroup, StepMetrics, TokenId, TokenSequence, Trajectory,
    Turn, TurnSample,
};
