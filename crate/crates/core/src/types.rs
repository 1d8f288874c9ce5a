//! Record types shared across the rollout, advantage, objective, and
//! diagnostics stages, plus the trajectory validation pass.
//!
//! The granularities, from coarse to fine: a [`RolloutGroup`] holds the G
//! trajectories sampled from one prompt; a [`Trajectory`] holds the turns of
//! one episode; a [`TurnSample`] is the unit the optimizer consumes after
//! multi-turn episodes are decomposed into independent single-turn updates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Token id within the fixed response vocabulary.
pub type TokenId = u16;

/// Sparse binary observation feature id emitted by an environment encoder.
pub type ObsFeatureId = u32;

/// A non-empty token sequence (one sampled response).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<TokenId>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// One prior (observation, action) pair kept in the context window.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub observation: Vec<ObsFeatureId>,
    /// Parsed action token of that turn; None when the response violated the
    /// output format and the environment executed a no-op.
    pub action: Option<TokenId>,
}

/// Everything the policy conditions on when sampling one turn.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptContext {
    /// Current observation as sorted, deduplicated sparse features.
    pub obs_features: Vec<ObsFeatureId>,
    /// 1-based turn number within the episode.
    pub turn_index: u32,
    /// Sliding window of prior turns, oldest first, bounded by the configured
    /// memory length.
    pub history: Vec<HistoryEntry>,
}

/// One turn of an episode as collected during rollout.
///
/// The three log-prob vectors are the interchange convention used everywhere
/// downstream: `logp_behavior` is frozen at sampling time, `logp_current` is
/// refreshed by the objective before every update, `logp_reference` is filled
/// lazily from the reference snapshot. At collection time all three start
/// equal, which keeps every stored record finite and self-consistent.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub context: PromptContext,
    pub response: TokenSequence,
    pub logp_current: Vec<f64>,
    pub logp_behavior: Vec<f64>,
    pub logp_reference: Vec<f64>,
    /// Per-token sampling-distribution entropies recorded at collection.
    pub entropies: Vec<f64>,
    /// Parsed action token, None on a format violation.
    pub action: Option<TokenId>,
    /// Shaped reward collected on this turn (format penalty already applied).
    pub reward: f64,
    /// Fingerprint of the environment state this turn acted from.
    pub state_fingerprint: u64,
}

/// One complete episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub turns: Vec<Turn>,
    /// Total shaped return, the sum of the per-turn rewards.
    pub total_reward: f64,
    /// True when the episode terminated with task success.
    pub success: bool,
}

impl Trajectory {
    pub fn turn_rewards(&self) -> Vec<f64> {
        self.turns.iter().map(|t| t.reward).collect()
    }

    pub fn fingerprints(&self) -> Vec<u64> {
        self.turns.iter().map(|t| t.state_fingerprint).collect()
    }
}

/// G trajectories sampled from one shared prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub group_id: u64,
    /// Seed of the prompt stream that produced the shared initial state.
    pub prompt_seed: u64,
    pub members: Vec<Trajectory>,
}

impl RolloutGroup {
    /// Successful members, the quantity dynamic filtering keys on.
    pub fn success_count(&self) -> usize {
        self.members.iter().filter(|m| m.success).count()
    }
}

/// Advantage assigned to one turn.
///
/// `episode` is the group-normalized episode advantage shared by every turn
/// of the trajectory; `combined` is what the objective actually multiplies
/// into the surrogate. The optional fields record how `combined` was built:
/// `step` for anchor-state estimators, `modulation`/`bonus` for the
/// entropy-modulated one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdvantageRecord {
    pub episode: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub step: Option<f64>,
    pub combined: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub modulation: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bonus: Option<f64>,
}

impl AdvantageRecord {
    /// Plain episode advantage, broadcast unchanged to the turn.
    pub fn episode_only(a: f64) -> Self {
        AdvantageRecord { episode: a, step: None, combined: a, modulation: None, bonus: None }
    }
}

/// One single-turn training sample, the unit of optimization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnSample {
    pub group_id: u64,
    pub trajectory_id: u64,
    /// 1-based turn number within the source trajectory.
    pub turn_index: u32,
    /// Outcome flag of the source trajectory (kept for flow diagnostics).
    pub success: bool,
    pub context: PromptContext,
    pub response: TokenSequence,
    pub logp_current: Vec<f64>,
    pub logp_behavior: Vec<f64>,
    pub logp_reference: Vec<f64>,
    pub entropies: Vec<f64>,
    /// Filled once the advantage stage has run.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub advantage: Option<AdvantageRecord>,
}

/// Scalar metrics recorded for every optimizer update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub stage: u64,
    pub update: u64,
    pub loss: f64,
    pub grad_norm: f64,
    /// Mean k3 of the current policy against the behavior snapshot.
    pub off_policy_kl: f64,
    /// Mean k3 of the current policy against the reference snapshot.
    pub reference_kl: f64,
    /// Fraction of rollout turns this stage that parsed cleanly.
    pub valid_format_ratio: f64,
    /// Success rate of this stage's rollouts.
    pub rollout_success: f64,
    /// Fraction of tokens with importance ratio outside the clip range.
    pub oob_total: f64,
    /// Fraction below the lower bound with negative advantage.
    pub oob_lower_neg: f64,
    /// Fraction above the upper bound with positive advantage.
    pub oob_upper_pos: f64,
    /// Eight-group KL attribution shares (advantage sign x ratio side x
    /// entropy side); see the diagnostics module for the cell order.
    pub kl_shares: [f64; 8],
    /// Groups dropped by dynamic filtering this stage.
    pub filtered_groups: u64,
    /// True when the update was skipped (empty batch or non-finite gradient).
    pub skipped: bool,
}

/// Violations reported by [`validate_trajectory`].
#[derive(Debug, Error, PartialEq)]
pub enum ValidationError {
    #[error("trajectory has no turns")]
    EmptyTrajectory,
    #[error("turn {turn}: empty response")]
    EmptyResponse { turn: usize },
    #[error("turn {turn}: token id {token} outside vocabulary of {vocab}")]
    TokenOutOfRange { turn: usize, token: TokenId, vocab: usize },
    #[error("turn {turn}: {field} has length {got}, response has {want} tokens")]
    LengthMismatch { turn: usize, field: &'static str, got: usize, want: usize },
    #[error("turn {turn}: non-finite value in {field}")]
    NonFinite { turn: usize, field: &'static str },
    #[error("turn {turn}: positive log-probability in {field}")]
    PositiveLogProb { turn: usize, field: &'static str },
    #[error("turn {turn}: context turn_index is {got}, expected {want}")]
    TurnIndexMismatch { turn: usize, got: u32, want: u32 },
    #[error("total reward {total} does not match per-turn sum {sum}")]
    RewardMismatch { total: f64, sum: f64 },
}

/// Checks the structural invariants every stored or decomposed trajectory
/// must satisfy: non-empty turns, in-vocabulary tokens, log-prob and entropy
/// vectors aligned with the response, finite values, nonpositive log-probs,
/// consecutive turn indices, and a total reward consistent with the per-turn
/// rewards.
pub fn validate_trajectory(traj: &Trajectory, vocab: usize) -> Result<(), ValidationError> {
    if traj.turns.is_empty() {
        return Err(ValidationError::EmptyTrajectory);
    }
    let mut sum = 0.0;
    for (ix, turn) in traj.turns.iter().enumerate() {
        let want = turn.response.len();
        if want == 0 {
            return Err(ValidationError::EmptyResponse { turn: ix });
        }
        for &tok in &turn.response.tokens {
            if usize::from(tok) >= vocab {
                return Err(ValidationError::TokenOutOfRange { turn: ix, token: tok, vocab });
            }
        }
        let logps: [(&'static str, &[f64]); 3] = [
            ("logp_current", &turn.logp_current),
            ("logp_behavior", &turn.logp_behavior),
            ("logp_reference", &turn.logp_reference),
        ];
        for (field, v) in logps {
            if v.len() != want {
                return Err(ValidationError::LengthMismatch { turn: ix, field, got: v.len(), want });
            }
            if v.iter().any(|x| !x.is_finite()) {
                return Err(ValidationError::NonFinite { turn: ix, field });
            }
            if v.iter().any(|&x| x > 0.0) {
                return Err(ValidationError::PositiveLogProb { turn: ix, field });
            }
        }
        if turn.entropies.len() != want {
            return Err(ValidationError::LengthMismatch {
                turn: ix,
                field: "entropies",
                got: turn.entropies.len(),
                want,
            });
        }
        if turn.entropies.iter().any(|x| !x.is_finite()) {
            return Err(ValidationError::NonFinite { turn: ix, field: "entropies" });
        }
        if !turn.reward.is_finite() {
            return Err(ValidationError::NonFinite { turn: ix, field: "reward" });
        }
        let want_index = ix as u32 + 1;
        if turn.context.turn_index != want_index {
            return Err(ValidationError::TurnIndexMismatch { turn: ix, got: turn.context.turn_index, want: want_index });
        }
        sum += turn.reward;
    }
    if !traj.total_reward.is_finite() || (traj.total_reward - sum).abs() > 1e-9 {
        return Err(ValidationError::RewardMismatch { total: traj.total_reward, sum });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn stub_turn(turn_index: u32, tokens: Vec<TokenId>, reward: f64) -> Turn {
        let n = tokens.len();
        Turn {
            context: PromptContext { obs_features: vec![1, 2], turn_index, history: vec![] },
            response: TokenSequence { tokens },
            logp_current: vec![-0.5; n],
            logp_behavior: vec![-0.5; n],
            logp_reference: vec![-0.5; n],
            entropies: vec![0.9; n],
            action: None,
            reward,
            state_fingerprint: 42,
        }
    }

    fn stub_trajectory() -> Trajectory {
        Trajectory {
            turns: vec![stub_turn(1, vec![1, 2, 0], -0.01), stub_turn(2, vec![1, 3, 0], 0.99)],
            total_reward: 0.98,
            success: true,
        }
    }

    #[test]
    fn valid_trajectory_passes() {
        assert_eq!(validate_trajectory(&stub_trajectory(), 8), Ok(()));
    }

    #[test]
    fn rejects_vocab_overflow() {
        let t = stub_trajectory();
        assert_eq!(
            validate_trajectory(&t, 3),
            Err(ValidationError::TokenOutOfRange { turn: 1, token: 3, vocab: 3 })
        );
    }

    #[test]
    fn rejects_misaligned_logps() {
        let mut t = stub_trajectory();
        t.turns[0].logp_behavior.pop();
        assert_eq!(
            validate_trajectory(&t, 8),
            Err(ValidationError::LengthMismatch { turn: 0, field: "logp_behavior", got: 2, want: 3 })
        );
    }

    #[test]
    fn rejects_nan_entropy() {
        let mut t = stub_trajectory();
        t.turns[1].entropies[0] = f64::NAN;
        assert_eq!(validate_trajectory(&t, 8), Err(ValidationError::NonFinite { turn: 1, field: "entropies" }));
    }

    #[test]
    fn rejects_positive_logp() {
        let mut t = stub_trajectory();
        t.turns[0].logp_current[2] = 0.25;
        assert_eq!(
            validate_trajectory(&t, 8),
            Err(ValidationError::PositiveLogProb { turn: 0, field: "logp_current" })
        );
    }

    #[test]
    fn rejects_reward_drift() {
        let mut t = stub_trajectory();
        t.total_reward = 0.5;
        assert!(matches!(validate_trajectory(&t, 8), Err(ValidationError::RewardMismatch { .. })));
    }

    #[test]
    fn rejects_turn_index_gap() {
        let mut t = stub_trajectory();
        t.turns[1].context.turn_index = 5;
        assert_eq!(
            validate_trajectory(&t, 8),
            Err(ValidationError::TurnIndexMismatch { turn: 1, got: 5, want: 2 })
        );
    }
}
