//! Group rollout collection, turn-wise decomposition into single-turn
//! samples, and mini-batch scheduling (the off-policy staleness knob).
//!
//! Collection runs one episode at a time under a frozen behavior snapshot.
//! Every member of a group resets from the same prompt seed, so the G
//! trajectories share their initial state; sampling streams differ per
//! member. All randomness is derived from the run seed through labeled
//! streams, which makes collection reproducible stage by stage after a
//! resume.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::config::{EnvConfig, PolicyConfig, ShuffleLevel};
use crate::envs::{self, EnvError, EOS};
use crate::hashing::stream_seed;
use crate::policy::{response_logps, sample_response, PolicyError, PolicyParams};
use crate::types::{
    AdvantageRecord, HistoryEntry, PromptContext, RolloutGroup, Trajectory, Turn, TurnSample,
};

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// All groups collected in one stage under one behavior snapshot.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutBatch {
    /// Stage index of the behavior snapshot that produced the data.
    pub snapshot_stage: u64,
    /// Root of the labeled rng streams used during collection.
    pub collection_seed: u64,
    pub groups: Vec<RolloutGroup>,
}

/// Ordered mini-batches over a decomposed turn set. Entries are indices
/// into the sample vector the schedule was planned for.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UpdateSchedule {
    pub mini_batches: Vec<Vec<usize>>,
    pub mini_batch_size: usize,
}

impl UpdateSchedule {
    /// Number of optimizer updates this schedule performs, which is the
    /// staleness degree of the stage: updates after the first consume data
    /// from an already-moved policy.
    pub fn updates(&self) -> usize {
        self.mini_batches.len()
    }
}

/// Builds the next turn's prompt from the previous one: the fresh
/// observation, an incremented turn counter, and a sliding window over the
/// (observation, action) pairs already played.
pub(crate) fn advance_context(
    ctx: PromptContext,
    action: Option<crate::types::TokenId>,
    observation: Vec<crate::types::ObsFeatureId>,
    history_window: usize,
) -> PromptContext {
    let mut history = ctx.history;
    history.push(HistoryEntry { observation: ctx.obs_features, action });
    if history.len() > history_window {
        let drop = history.len() - history_window;
        history.drain(..drop);
    }
    PromptContext { obs_features: observation, turn_index: ctx.turn_index + 1, history }
}

/// Runs one full episode under `policy`, recording per-token log-probs and
/// entropies at sampling time. `env_rng` drives instance generation,
/// `sample_rng` drives token sampling.
pub fn run_episode(
    policy: &PolicyParams,
    env_cfg: &EnvConfig,
    pol_cfg: &PolicyConfig,
    temperature: f64,
    env_rng: &mut ChaCha12Rng,
    sample_rng: &mut impl Rng,
) -> Result<Trajectory, RolloutError> {
    let admissible = envs::admissible_tokens(env_cfg.id);
    let (mut state, mut ctx) = envs::reset(env_cfg, env_rng);
    let mut turns = Vec::new();
    let mut total_reward = 0.0;
    while !state.done {
        let state_fingerprint = envs::fingerprint(env_cfg, &state);
        let sampled = sample_response(
            policy,
            &ctx,
            pol_cfg.max_response_len,
            temperature,
            EOS,
            sample_rng,
        )?;
        let parse = envs::parse_action(&sampled.response, &admissible);
        let action = parse.action();
        let action_ix = action.and_then(envs::action_index);
        let feedback = envs::step(env_cfg, &mut state, action_ix)?;
        let reward = envs::shape_reward(feedback.reward, &parse, env_cfg.format_penalty);
        total_reward += reward;
        turns.push(Turn {
            context: ctx.clone(),
            response: sampled.response,
            logp_current: sampled.logps.clone(),
            logp_behavior: sampled.logps.clone(),
            logp_reference: sampled.logps,
            entropies: sampled.entropies,
            action,
            reward,
            state_fingerprint,
        });
        if state.done {
            break;
        }
        ctx = advance_context(ctx, action, feedback.observation, pol_cfg.history_window);
    }
    Ok(Trajectory { turns, total_reward, success: state.succeeded })
}

/// Collects G trajectories from one shared prompt. Every member replays
/// the same instance-generation stream (identical initial state) but
/// samples its responses from its own stream.
pub fn collect_group(
    policy: &PolicyParams,
    env_cfg: &EnvConfig,
    pol_cfg: &PolicyConfig,
    collection_seed: u64,
    group_id: u64,
    prompt_seed: u64,
    group_size: usize,
) -> Result<RolloutGroup, RolloutError> {
    assert!(group_size >= 2, "group normalization needs at least 2 rollouts");
    let mut members = Vec::with_capacity(group_size);
    for member in 0..group_size {
        let mut env_rng = ChaCha12Rng::seed_from_u64(prompt_seed);
        let mut sample_rng = ChaCha12Rng::seed_from_u64(stream_seed(
            collection_seed,
            "sample",
            &[group_id, member as u64],
        ));
        members.push(run_episode(
            policy,
            env_cfg,
            pol_cfg,
            pol_cfg.temperature_train,
            &mut env_rng,
            &mut sample_rng,
        )?);
    }
    Ok(RolloutGroup { group_id, prompt_seed, members })
}

/// Collects one stage's worth of groups. `prompts` distinct prompt streams
/// are dealt round-robin across `groups` groups, so raising the group count
/// with prompts fixed adds data volume without adding prompt diversity.
pub fn collect_batch(
    policy: &PolicyParams,
    env_cfg: &EnvConfig,
    pol_cfg: &PolicyConfig,
    run_seed: u64,
    stage: u64,
    prompts: usize,
    groups: usize,
    group_size: usize,
) -> Result<RolloutBatch, RolloutError> {
    assert!(prompts >= 1 && groups >= 1);
    let collection_seed = stream_seed(run_seed, "rollout", &[stage]);
    let mut out = Vec::with_capacity(groups);
    for g in 0..groups {
        let prompt_ix = (g % prompts) as u64;
        let prompt_seed = stream_seed(collection_seed, "prompt", &[prompt_ix]);
        out.push(collect_group(
            policy,
            env_cfg,
            pol_cfg,
            collection_seed,
            g as u64,
            prompt_seed,
            group_size,
        )?);
    }
    Ok(RolloutBatch { snapshot_stage: stage, collection_seed, groups: out })
}

/// Recomputes `logp_reference` for every turn under the reference
/// snapshot. Collection leaves the field equal to the behavior log-probs;
/// this pass is only needed when the KL penalty is active.
pub fn fill_reference_logps(
    groups: &mut [RolloutGroup],
    reference: &PolicyParams,
    temperature: f64,
) -> Result<(), RolloutError> {
    for group in groups {
        for member in &mut group.members {
            for turn in &mut member.turns {
                turn.logp_reference =
                    response_logps(reference, &turn.context, &turn.response, temperature)?;
            }
        }
    }
    Ok(())
}

/// Flattens groups into one sample per (trajectory, turn). Trajectory ids
/// are dense ordinals in batch iteration order, matching the advantage
/// stage's member ordering; advantages start unset.
pub fn decompose(groups: &[RolloutGroup]) -> Vec<TurnSample> {
    let mut samples = Vec::new();
    let mut trajectory_id = 0u64;
    for group in groups {
        for member in &group.members {
            for turn in &member.turns {
                samples.push(TurnSample {
                    group_id: group.group_id,
                    trajectory_id,
                    turn_index: turn.context.turn_index,
                    success: member.success,
                    context: turn.context.clone(),
                    response: turn.response.clone(),
                    logp_current: turn.logp_current.clone(),
                    logp_behavior: turn.logp_behavior.clone(),
                    logp_reference: turn.logp_reference.clone(),
                    entropies: turn.entropies.clone(),
                    advantage: None,
                });
            }
            trajectory_id += 1;
        }
    }
    samples
}

/// Writes the advantage stage's output onto a decomposed sample vector.
/// `records` is indexed [group][member][turn] in the same order
/// [`decompose`] walked; the shapes must line up exactly.
pub fn attach_advantages(samples: &mut [TurnSample], records: &[Vec<Vec<AdvantageRecord>>]) {
    let mut ix = 0usize;
    for group in records {
        for member in group {
            for record in member {
                assert!(ix < samples.len(), "advantage records outnumber samples");
                samples[ix].advantage = Some(*record);
                ix += 1;
            }
        }
    }
    assert_eq!(ix, samples.len(), "samples outnumber advantage records");
}

/// Randomly partitions the decomposed turn set into mini-batches. The
/// number of mini-batches is ceil(N / mini_batch_size); every turn appears
/// in exactly one of them.
///
/// Turn-level shuffling permutes individual samples. Trajectory-level
/// shuffling permutes whole trajectories and keeps each trajectory's turns
/// adjacent and in order within the stream before chunking.
pub fn plan_updates(
    samples: &[TurnSample],
    mini_batch_size: usize,
    shuffle: ShuffleLevel,
    rng: &mut impl Rng,
) -> UpdateSchedule {
    assert!(mini_batch_size >= 1, "mini-batches must hold at least one sample");
    let mut order: Vec<usize> = match shuffle {
        ShuffleLevel::Turn => {
            let mut ixs: Vec<usize> = (0..samples.len()).collect();
            ixs.shuffle(rng);
            ixs
        }
        ShuffleLevel::Trajectory => {
            let mut trajectories: Vec<u64> = Vec::new();
            for s in samples {
                if trajectories.last() != Some(&s.trajectory_id) {
                    trajectories.push(s.trajectory_id);
                }
            }
            trajectories.shuffle(rng);
            let mut ixs = Vec::with_capacity(samples.len());
            for t in trajectories {
                for (ix, s) in samples.iter().enumerate() {
                    if s.trajectory_id == t {
                        ixs.push(ix);
                    }
                }
            }
            ixs
        }
    };
    let mut mini_batches = Vec::new();
    while !order.is_empty() {
        let take = order.len().min(mini_batch_size);
        let rest = order.split_off(take);
        mini_batches.push(order);
        order = rest;
    }
    UpdateSchedule { mini_batches, mini_batch_size }
}
