//! Deterministic fixtures for the benchmark targets: a small random policy
//! and a decomposed rollout batch of realistic shape, so every benchmark
//! measures the same workload.

use arlab_core::advantage::compute_for_groups;
use arlab_core::config::EnvId;
use arlab_core::envs::min_vocab_size;
use arlab_core::policy::PolicyParams;
use arlab_core::rollout::{attach_advantages, collect_batch, decompose};
use arlab_core::{EnvConfig, ObjectiveConfig, PolicyConfig, RolloutGroup, TurnSample, Variant};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub const FEATURE_DIM: usize = 1024;

pub fn bench_env() -> EnvConfig {
    EnvConfig {
        id: EnvId::MiniSokoban,
        grid_size: 3,
        max_steps: 8,
        format_penalty: 0.1,
        chain_length: 1,
    }
}

pub fn bench_policy_config() -> PolicyConfig {
    PolicyConfig {
        vocab_size: min_vocab_size(EnvId::MiniSokoban),
        feature_dim: FEATURE_DIM,
        max_response_len: 8,
        temperature_train: 1.0,
        temperature_eval: 0.6,
        history_window: 2,
    }
}

pub fn bench_policy(seed: u64) -> PolicyParams {
    let pol = bench_policy_config();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    PolicyParams::random(pol.vocab_size, pol.feature_dim, 0.4, &mut rng)
}

/// Objective settings for `variant` with the normalizer horizon resolved,
/// mirroring what config loading would produce.
pub fn bench_objective(variant: Variant) -> ObjectiveConfig {
    let mut cfg = ObjectiveConfig::preset(variant);
    cfg.t_max = bench_policy_config().max_response_len;
    cfg
}

/// Thirty-two trajectories collected from the fixture policy, grouped
/// eight ways.
pub fn bench_groups(policy: &PolicyParams, seed: u64) -> Vec<RolloutGroup> {
    collect_batch(policy, &bench_env(), &bench_policy_config(), seed, 0, 4, 2, 4)
        .expect("fixture rollout should succeed")
        .groups
}

/// The same trajectories flattened to turn samples with `variant`'s
/// advantages attached, ready for the loss kernel.
pub fn bench_samples(policy: &PolicyParams, seed: u64, variant: Variant) -> Vec<TurnSample> {
    let groups = bench_groups(policy, seed);
    let advantages = compute_for_groups(&groups, &bench_objective(variant));
    let mut samples = decompose(&groups);
    attach_advantages(&mut samples, &advantages);
    samples
}
