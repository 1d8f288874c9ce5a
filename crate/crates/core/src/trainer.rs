//! Behavior-cloning cold start, the adaptive-moment optimizer, and the
//! staged training loop: snapshot the behavior policy, collect groups,
//! estimate advantages, optionally filter uniform groups, then run the
//! scheduled mini-batch updates and append metrics.
//!
//! Everything random is drawn from labeled streams derived from the run
//! seed ("rollout", "refill_prompt", "schedule", "eval", "expert", ...), so
//! a run that stops at a stage boundary and reloads its training state
//! continues bit-for-bit as if it had never stopped. The run directory is
//! append-only for metrics and evaluations, which lets a resumed run extend
//! the same files.

use std::fs;
use std::io::Read;
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

use crate::advantage::compute_for_groups;
use crate::config::{BcKeep, ConfigError, EnvConfig, PolicyConfig, RunConfig, TrainerConfig};
use crate::diagnostics::{collect_step_metrics, skipped_metrics, StageContext};
use crate::envs;
use crate::hashing::{stream_seed, StableHasher, HASH_VERSION};
use crate::objective::{compute_loss, dynamic_filter, FilterStats, ObjectiveError};
use crate::policy::{
    accumulate_grad_log_prob, featurize, read_matrix, read_u32, read_u64, response_logps,
    token_distribution, write_matrix, FeatureVec, PolicyError, PolicyParams,
};
use crate::records::{
    load_eval_records, save_json_pretty, save_turn_records, BatchManifest, EvalRecord, EvalWriter,
    MetricsWriter, RecordError, RunManifest, RunPaths,
};
use crate::rollout::{
    advance_context, attach_advantages, collect_batch, collect_group, decompose,
    fill_reference_logps, plan_updates, run_episode, RolloutError,
};
use crate::types::{Trajectory, Turn, TurnSample};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Rollout(#[from] RolloutError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("gradient overflow: non-finite values in the update")]
    GradientOverflow,
    #[error("behavior cloning kept no expert episodes")]
    EmptyExpertSet,
    #[error("training state file is corrupt: {0}")]
    Corrupt(&'static str),
    #[error("training state does not match the config: {0}")]
    StateMismatch(&'static str),
}

/// Adaptive-moment accumulators aligned with the policy weights.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub m: Array2<f64>,
    pub v: Array2<f64>,
    /// Updates applied so far; drives bias correction.
    pub step: u64,
}

impl OptimizerState {
    pub fn new(vocab: usize, dim: usize) -> Self {
        OptimizerState { m: Array2::zeros((vocab, dim)), v: Array2::zeros((vocab, dim)), step: 0 }
    }
}

/// One adaptive-moment update with bias correction. A non-finite gradient
/// is rejected before any state is touched: the parameters, the moment
/// accumulators, and the step counter all stay as they were, so the caller
/// can log the skip and carry on.
pub fn optimizer_step(
    params: &mut PolicyParams,
    grad: &Array2<f64>,
    opt: &mut OptimizerState,
    cfg: &TrainerConfig,
) -> Result<(), TrainError> {
    let shape = params.theta().dim();
    assert_eq!(grad.dim(), shape, "gradient shape must match the weights");
    assert_eq!(opt.m.dim(), shape, "optimizer state shape must match the weights");
    assert_eq!(opt.v.dim(), shape, "optimizer state shape must match the weights");
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::GradientOverflow);
    }
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let (lr, eps) = (cfg.learning_rate, cfg.adam_eps);
    opt.step += 1;
    let bc1 = 1.0 - b1.powi(opt.step as i32);
    let bc2 = 1.0 - b2.powi(opt.step as i32);
    let theta = params.theta_mut();
    for (((w, m), v), &g) in
        theta.iter_mut().zip(opt.m.iter_mut()).zip(opt.v.iter_mut()).zip(grad.iter())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let mhat = *m / bc1;
        let vhat = *v / bc2;
        *w -= lr * mhat / (vhat.sqrt() + eps);
    }
    Ok(())
}

/// Collects episodes from the scripted per-environment solver, formatted
/// through the action grammar. With probability `noise` a turn takes a
/// random admissible action instead of the scripted one (also the fallback
/// when the solver finds no plan). The expert is treated as a deterministic
/// policy that assigns probability one to its chosen tokens, so every
/// stored log-prob is zero and every entropy is zero.
pub fn collect_expert_episodes(
    env_cfg: &EnvConfig,
    pol_cfg: &PolicyConfig,
    episodes: usize,
    noise: f64,
    seed: u64,
) -> Result<Vec<Trajectory>, TrainError> {
    let admissible = envs::admissible_tokens(env_cfg.id);
    let mut out = Vec::with_capacity(episodes);
    for ep in 0..episodes {
        let mut env_rng = ChaCha12Rng::seed_from_u64(stream_seed(seed, "expert_env", &[ep as u64]));
        let mut noise_rng =
            ChaCha12Rng::seed_from_u64(stream_seed(seed, "expert_noise", &[ep as u64]));
        let (mut state, mut ctx) = envs::reset(env_cfg, &mut env_rng);
        let mut turns = Vec::new();
        let mut total_reward = 0.0;
        while !state.done {
            let state_fingerprint = envs::fingerprint(env_cfg, &state);
            let scripted = envs::expert_action(env_cfg, &state);
            let take_random = noise_rng.gen::<f64>() < noise;
            let action_ix = match scripted {
                Some(ix) if !take_random => ix,
                _ => noise_rng.gen_range(0..admissible.len()),
            };
            let token = admissible[action_ix];
            let response = envs::format_response(token);
            let feedback = envs::step(env_cfg, &mut state, Some(action_ix)).map_err(RolloutError::from)?;
            // The response is grammatical by construction, so the shaped
            // reward is the raw environment reward.
            let reward = feedback.reward;
            total_reward += reward;
            let len = response.tokens.len();
            turns.push(Turn {
                context: ctx.clone(),
                response,
                logp_current: vec![0.0; len],
                logp_behavior: vec![0.0; len],
                logp_reference: vec![0.0; len],
                entropies: vec![0.0; len],
                action: Some(token),
                reward,
                state_fingerprint,
            });
            if state.done {
                break;
            }
            ctx = advance_context(ctx, Some(token), feedback.observation, pol_cfg.history_window);
        }
        out.push(Trajectory { turns, total_reward, success: state.succeeded });
    }
    Ok(out)
}

/// What behavior cloning did: how many expert episodes survived the keep
/// filter, and the full-set cross-entropy before training plus after each
/// epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct BcReport {
    pub kept_episodes: usize,
    pub losses: Vec<f64>,
}

fn keeps(keep: &BcKeep, t: &Trajectory) -> bool {
    match keep {
        BcKeep::Success => t.success,
        BcKeep::MinScore(bound) => t.total_reward >= *bound,
    }
}

/// Supervised cross-entropy training on the kept expert episodes by plain
/// gradient descent at `bc_learning_rate`. `bc_batch_size` of zero means
/// full batch, which makes the loss non-increasing for small rates because
/// the objective is convex in the weights. Zero epochs leave the policy
/// bit-exactly unchanged.
pub fn behavior_clone(
    policy: &mut PolicyParams,
    experts: &[Trajectory],
    cfg: &TrainerConfig,
    temperature: f64,
) -> Result<BcReport, TrainError> {
    let kept: Vec<&Trajectory> = experts.iter().filter(|t| keeps(&cfg.bc_keep, t)).collect();
    if kept.is_empty() {
        return Err(TrainError::EmptyExpertSet);
    }
    // Features depend only on the frozen contexts and response prefixes, so
    // they are computed once and shared by every epoch.
    let mut positions: Vec<(FeatureVec, usize)> = Vec::new();
    for traj in &kept {
        for turn in &traj.turns {
            for (t, &tok) in turn.response.tokens.iter().enumerate() {
                let phi = featurize(&turn.context, &turn.response.tokens[..t], policy.dim());
                positions.push((phi, usize::from(tok)));
            }
        }
    }
    assert!(!positions.is_empty(), "kept episodes always contain at least one turn");
    let mut losses = Vec::with_capacity(cfg.bc_epochs + 1);
    losses.push(cross_entropy(policy, &positions, temperature)?);
    let full = cfg.bc_batch_size == 0 || cfg.bc_batch_size >= positions.len();
    let chunk = if full { positions.len() } else { cfg.bc_batch_size };
    let mut order: Vec<usize> = (0..positions.len()).collect();
    for epoch in 0..cfg.bc_epochs {
        if !full {
            let mut rng = ChaCha12Rng::seed_from_u64(stream_seed(
                cfg.seed,
                "clone_schedule",
                &[epoch as u64],
            ));
            order.shuffle(&mut rng);
        }
        for batch in order.chunks(chunk) {
            let mut grad = Array2::zeros(policy.theta().dim());
            let scale = -1.0 / batch.len() as f64;
            for &ix in batch {
                let (phi, tok) = &positions[ix];
                let dist = token_distribution(policy, phi, temperature)?;
                accumulate_grad_log_prob(&mut grad, scale, &dist, *tok, phi, temperature);
            }
            let lr = cfg.bc_learning_rate;
            policy.theta_mut().zip_mut_with(&grad, |w, g| *w -= lr * g);
        }
        losses.push(cross_entropy(policy, &positions, temperature)?);
    }
    Ok(BcReport { kept_episodes: kept.len(), losses })
}

/// Mean negative log-likelihood of the expert tokens under `policy`.
fn cross_entropy(
    policy: &PolicyParams,
    positions: &[(FeatureVec, usize)],
    temperature: f64,
) -> Result<f64, TrainError> {
    let mut total = 0.0;
    for (phi, tok) in positions {
        let dist = token_distribution(policy, phi, temperature)?;
        total -= dist[*tok].ln();
    }
    Ok(total / positions.len() as f64)
}

/// Aggregate results of one evaluation pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalSummary {
    pub success_rate: f64,
    pub mean_return: f64,
    pub valid_format_ratio: f64,
}

/// Runs `episodes` fresh episodes at the evaluation temperature and reports
/// success rate, mean shaped return, and the fraction of grammatical turns.
/// The policy is only read; evaluation never moves parameters. Episode
/// randomness is derived from `seed` alone, so the same seed replays the
/// same instances and samples.
pub fn evaluate(
    policy: &PolicyParams,
    env_cfg: &EnvConfig,
    pol_cfg: &PolicyConfig,
    episodes: usize,
    seed: u64,
) -> Result<EvalSummary, TrainError> {
    assert!(episodes >= 1, "evaluation needs at least one episode");
    let mut successes = 0usize;
    let mut total_return = 0.0;
    let mut turns = 0usize;
    let mut valid = 0usize;
    for ep in 0..episodes {
        let mut env_rng = ChaCha12Rng::seed_from_u64(stream_seed(seed, "eval_env", &[ep as u64]));
        let mut sample_rng =
            ChaCha12Rng::seed_from_u64(stream_seed(seed, "eval_sample", &[ep as u64]));
        let traj = run_episode(
            policy,
            env_cfg,
            pol_cfg,
            pol_cfg.temperature_eval,
            &mut env_rng,
            &mut sample_rng,
        )?;
        successes += usize::from(traj.success);
        total_return += traj.total_reward;
        for turn in &traj.turns {
            turns += 1;
            valid += usize::from(turn.action.is_some());
        }
    }
    Ok(EvalSummary {
        success_rate: successes as f64 / episodes as f64,
        mean_return: total_return / episodes as f64,
        valid_format_ratio: valid as f64 / turns.max(1) as f64,
    })
}

/// Everything needed to continue a run from a stage boundary: the live
/// policy, the frozen reference policy, the optimizer accumulators, and the
/// next stage index. Rollout randomness is a pure function of the run seed
/// and the stage, so no generator state is stored.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub policy: PolicyParams,
    pub reference: PolicyParams,
    pub opt: OptimizerState,
    pub next_stage: u64,
    pub config_hash: u64,
}

const TRAIN_MAGIC: &[u8; 8] = b"ARLTRN1\0";

/// Writes the training state with a header (vocab, dim, hash version, next
/// stage, optimizer step, config hash), the four weight matrices, and a
/// trailing content hash.
pub fn save_train_state(s: &TrainState, path: &Path) -> Result<(), TrainError> {
    let (vocab, dim) = s.policy.theta().dim();
    assert_eq!(s.reference.theta().dim(), (vocab, dim), "reference shape must match the policy");
    assert_eq!(s.opt.m.dim(), (vocab, dim), "optimizer state shape must match the policy");
    assert_eq!(s.opt.v.dim(), (vocab, dim), "optimizer state shape must match the policy");
    let mut buf = Vec::with_capacity(48 + 4 * vocab * dim * 8 + 8);
    buf.extend_from_slice(TRAIN_MAGIC);
    buf.extend_from_slice(&(vocab as u32).to_le_bytes());
    buf.extend_from_slice(&(dim as u32).to_le_bytes());
    buf.extend_from_slice(&HASH_VERSION.to_le_bytes());
    buf.extend_from_slice(&0u32.to_le_bytes());
    buf.extend_from_slice(&s.next_stage.to_le_bytes());
    buf.extend_from_slice(&s.opt.step.to_le_bytes());
    buf.extend_from_slice(&s.config_hash.to_le_bytes());
    write_matrix(&mut buf, s.policy.theta())?;
    write_matrix(&mut buf, s.reference.theta())?;
    write_matrix(&mut buf, &s.opt.m)?;
    write_matrix(&mut buf, &s.opt.v)?;
    let digest = StableHasher::new().bytes(&buf).finish();
    buf.extend_from_slice(&digest.to_le_bytes());
    fs::write(path, buf)?;
    Ok(())
}

pub fn load_train_state(path: &Path) -> Result<TrainState, TrainError> {
    let data = fs::read(path)?;
    if data.len() < 48 + 8 {
        return Err(TrainError::Corrupt("truncated header"));
    }
    let (body, tail) = data.split_at(data.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8-byte tail"));
    if StableHasher::new().bytes(body).finish() != stored {
        return Err(TrainError::Corrupt("content hash mismatch"));
    }
    let mut r = body;
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != TRAIN_MAGIC {
        return Err(TrainError::Corrupt("unrecognized header"));
    }
    let vocab = read_u32(&mut r)? as usize;
    let dim = read_u32(&mut r)? as usize;
    let hash_version = read_u32(&mut r)?;
    let _reserved = read_u32(&mut r)?;
    if hash_version != HASH_VERSION {
        return Err(TrainError::Corrupt("hashing scheme version mismatch"));
    }
    let next_stage = read_u64(&mut r)?;
    let step = read_u64(&mut r)?;
    let config_hash = read_u64(&mut r)?;
    let policy = PolicyParams::from_theta(read_matrix(&mut r, vocab, dim)?);
    let reference = PolicyParams::from_theta(read_matrix(&mut r, vocab, dim)?);
    let m = read_matrix(&mut r, vocab, dim)?;
    let v = read_matrix(&mut r, vocab, dim)?;
    if !r.is_empty() {
        return Err(TrainError::Corrupt("trailing bytes"));
    }
    Ok(TrainState { policy, reference, opt: OptimizerState { m, v, step }, next_stage, config_hash })
}

/// Applies the stability rule: population variance of the success rate over
/// the final fifth of evaluations (rounded up) stays below the threshold.
/// An empty history is never stable.
pub fn stable_by_final_window(success_rates: &[f64], threshold: f64) -> bool {
    if success_rates.is_empty() {
        return false;
    }
    let window = success_rates.len().div_ceil(5);
    let tail = &success_rates[success_rates.len() - window..];
    let mean = tail.iter().sum::<f64>() / tail.len() as f64;
    let var = tail.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / tail.len() as f64;
    var < threshold
}

/// Outcome of one `train` call.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    /// Stages executed by this invocation (zero when the stored state had
    /// already reached the configured total).
    pub stages_run: u64,
    pub final_eval: Option<EvalRecord>,
    /// Every evaluation on record for the run, stored rows included.
    pub eval_history: Vec<EvalRecord>,
    /// Stability flag over the final fifth of `eval_history`.
    pub stable: bool,
    /// Present when this invocation ran the cloning cold start.
    pub bc: Option<BcReport>,
}

/// Valid-parse ratio over turns and success ratio over trajectories,
/// measured on the batch as collected (before any filtering).
fn batch_stats(groups: &[crate::types::RolloutGroup]) -> (f64, f64) {
    let mut turns = 0usize;
    let mut valid = 0usize;
    let mut trajectories = 0usize;
    let mut successes = 0usize;
    for g in groups {
        for member in &g.members {
            trajectories += 1;
            successes += usize::from(member.success);
            for turn in &member.turns {
                turns += 1;
                valid += usize::from(turn.action.is_some());
            }
        }
    }
    (valid as f64 / turns.max(1) as f64, successes as f64 / trajectories.max(1) as f64)
}

fn env_config_hash(env: &EnvConfig) -> u64 {
    let text = toml::to_string(env).expect("env config serializes");
    StableHasher::new().str(&text).finish()
}

/// Runs (or resumes) a full training run in `run_dir`.
///
/// A fresh directory gets a config copy, a manifest, and a cloning cold
/// start when `bc_episodes` is positive; the reference policy is frozen at
/// the post-cloning weights. When `train_state.bin` already exists the run
/// resumes from it instead (no re-cloning), which also allows extending a
/// finished run by raising `total_stages`.
///
/// Per stage: collect groups under the frozen snapshot, optionally filter
/// uniform-outcome groups (resampling with fresh prompt streams), refresh
/// reference log-probs when the KL penalty is active, attach advantages,
/// then apply the scheduled mini-batch updates. A stage whose filtered
/// batch is empty logs one skipped metrics row; an update whose gradient
/// overflows logs a skipped row and leaves the parameters untouched.
/// `overrides` is recorded in the manifest verbatim.
pub fn train(cfg: &RunConfig, run_dir: &Path, overrides: &[String]) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    fs::create_dir_all(run_dir)?;
    let paths = RunPaths::new(run_dir);
    let run_seed = cfg.trainer.seed;
    let config_hash = cfg.hash();
    let total = cfg.trainer.total_stages;

    let state_path = paths.dir.join("train_state.bin");
    let (mut policy, reference, mut opt, start_stage, bc) = if state_path.exists() {
        let state = load_train_state(&state_path)?;
        if state.policy.vocab() != cfg.policy.vocab_size
            || state.policy.dim() != cfg.policy.feature_dim
        {
            return Err(TrainError::StateMismatch(
                "stored policy shape differs from the configured vocab and feature dimensions",
            ));
        }
        (state.policy, state.reference, state.opt, state.next_stage, None)
    } else {
        let mut policy = PolicyParams::zeros(cfg.policy.vocab_size, cfg.policy.feature_dim);
        let bc = if cfg.trainer.bc_episodes > 0 {
            let experts = collect_expert_episodes(
                &cfg.env,
                &cfg.policy,
                cfg.trainer.bc_episodes,
                cfg.trainer.bc_noise,
                stream_seed(run_seed, "expert", &[]),
            )?;
            Some(behavior_clone(&mut policy, &experts, &cfg.trainer, cfg.policy.temperature_train)?)
        } else {
            None
        };
        let reference = policy.clone();
        let opt = OptimizerState::new(cfg.policy.vocab_size, cfg.policy.feature_dim);
        (policy, reference, opt, 0u64, bc)
    };

    fs::write(paths.config(), cfg.to_toml_string())?;
    let mut manifest = RunManifest {
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        feature_hash_version: HASH_VERSION,
        config_hash,
        seed: run_seed,
        variant: cfg.objective.variant.name().to_string(),
        env: cfg.env.id.name().to_string(),
        overrides: overrides.to_vec(),
        stages_completed: start_stage,
    };
    save_json_pretty(&paths.manifest(), &manifest)?;

    let mut metrics = MetricsWriter::open(&paths.dir)?;
    let mut eval_writer = EvalWriter::open(&paths.dir)?;
    let mut eval_history: Vec<EvalRecord> = if paths.dir.join("eval.csv").exists() {
        load_eval_records(&paths.dir)?
    } else {
        Vec::new()
    };

    let t_train = cfg.policy.temperature_train;
    for stage in start_stage..total {
        // Collection runs under the stage's frozen snapshot; every update
        // after the first inside this stage consumes stale data.
        let batch = collect_batch(
            &policy,
            &cfg.env,
            &cfg.policy,
            run_seed,
            stage,
            cfg.trainer.prompts_per_rollout,
            cfg.trainer.groups_per_rollout,
            cfg.trainer.group_size,
        )?;
        let collection_seed = batch.collection_seed;
        let (valid_format_ratio, rollout_success) = batch_stats(&batch.groups);

        let mut resample_err: Option<RolloutError> = None;
        let (mut kept, fstats) = if cfg.objective.dynamic_filter {
            let mut refill_ix: u64 = 0;
            let base_group_id = cfg.trainer.groups_per_rollout as u64;
            let refill = |need: usize| {
                let mut fresh = Vec::with_capacity(need);
                for _ in 0..need {
                    let prompt_seed =
                        stream_seed(collection_seed, "refill_prompt", &[refill_ix]);
                    let group_id = base_group_id + refill_ix;
                    refill_ix += 1;
                    match collect_group(
                        &policy,
                        &cfg.env,
                        &cfg.policy,
                        collection_seed,
                        group_id,
                        prompt_seed,
                        cfg.trainer.group_size,
                    ) {
                        Ok(g) => fresh.push(g),
                        Err(e) => {
                            // An empty return stops the filter; the error
                            // surfaces right after it hands back control.
                            resample_err = Some(e);
                            return Vec::new();
                        }
                    }
                }
                fresh
            };
            dynamic_filter(batch.groups, refill, cfg.objective.max_try)
        } else {
            let n = batch.groups.len();
            (batch.groups, FilterStats { requested: n, kept: n, ..FilterStats::default() })
        };
        if let Some(e) = resample_err {
            return Err(e.into());
        }

        if cfg.objective.beta > 0.0 {
            fill_reference_logps(&mut kept, &reference, t_train)?;
        }
        let advantages = compute_for_groups(&kept, &cfg.objective);
        let mut samples = decompose(&kept);
        attach_advantages(&mut samples, &advantages);

        let mut schedule_rng =
            ChaCha12Rng::seed_from_u64(stream_seed(run_seed, "schedule", &[stage]));
        let schedule = plan_updates(
            &samples,
            cfg.trainer.mini_batch_size,
            cfg.trainer.shuffle,
            &mut schedule_rng,
        );

        if schedule.updates() == 0 {
            let ctx = StageContext {
                stage,
                update: 0,
                valid_format_ratio,
                rollout_success,
                filtered_groups: fstats.dropped_uniform,
            };
            metrics.append(&skipped_metrics(&ctx))?;
        }
        for (update, mini_batch) in schedule.mini_batches.iter().enumerate() {
            let ctx = StageContext {
                stage,
                update: update as u64,
                valid_format_ratio,
                rollout_success,
                filtered_groups: fstats.dropped_uniform,
            };
            let mb_samples: Vec<TurnSample> =
                mini_batch.iter().map(|&ix| samples[ix].clone()).collect();
            let out = compute_loss(&policy, &mb_samples, &cfg.objective, t_train)?;
            match optimizer_step(&mut policy, &out.grad, &mut opt, &cfg.trainer) {
                Ok(()) => metrics.append(&collect_step_metrics(&out, &ctx))?,
                Err(TrainError::GradientOverflow) => metrics.append(&skipped_metrics(&ctx))?,
                Err(e) => return Err(e),
            }
        }

        if cfg.trainer.log_batches_every > 0 && (stage + 1) % cfg.trainer.log_batches_every == 0 {
            // Stored records carry current log-probs refreshed under the
            // end-of-stage policy, so offline ratio analyses see the real
            // post-update drift instead of all-ones.
            for s in &mut samples {
                s.logp_current = response_logps(&policy, &s.context, &s.response, t_train)?;
            }
            save_turn_records(&paths.batch_records(stage), &samples)?;
            save_json_pretty(
                &paths.batch_manifest(stage),
                &BatchManifest {
                    snapshot_stage: stage,
                    collection_seed,
                    env_config_hash: env_config_hash(&cfg.env),
                },
            )?;
        }

        let last = stage + 1 == total;
        if (stage + 1) % cfg.trainer.eval_every == 0 || last {
            let summary = evaluate(
                &policy,
                &cfg.env,
                &cfg.policy,
                cfg.trainer.eval_episodes,
                stream_seed(run_seed, "eval", &[stage]),
            )?;
            let record = EvalRecord {
                stage,
                success_rate: summary.success_rate,
                mean_return: summary.mean_return,
                valid_format_ratio: summary.valid_format_ratio,
            };
            eval_writer.append(&record)?;
            eval_history.push(record);
        }

        if cfg.trainer.checkpoint_every > 0 && (stage + 1) % cfg.trainer.checkpoint_every == 0 {
            let state = TrainState {
                policy: policy.clone(),
                reference: reference.clone(),
                opt: opt.clone(),
                next_stage: stage + 1,
                config_hash,
            };
            save_train_state(&state, &paths.checkpoint(stage + 1))?;
            save_train_state(&state, &state_path)?;
            manifest.stages_completed = stage + 1;
            save_json_pretty(&paths.manifest(), &manifest)?;
        }
        metrics.flush()?;
        eval_writer.flush()?;
    }

    let final_state = TrainState {
        policy,
        reference,
        opt,
        next_stage: start_stage.max(total),
        config_hash,
    };
    save_train_state(&final_state, &paths.final_checkpoint())?;
    save_train_state(&final_state, &state_path)?;
    manifest.stages_completed = final_state.next_stage;
    save_json_pretty(&paths.manifest(), &manifest)?;
    metrics.flush()?;
    eval_writer.flush()?;

    let successes: Vec<f64> = eval_history.iter().map(|r| r.success_rate).collect();
    Ok(TrainReport {
        stages_run: total.saturating_sub(start_stage),
        final_eval: eval_history.last().cloned(),
        stable: stable_by_final_window(&successes, cfg.trainer.stability_variance_threshold),
        eval_history,
        bc,
    })
}
