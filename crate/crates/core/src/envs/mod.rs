//! Toy multi-turn environments behind a structured-output grammar.
//!
//! Every agent response must follow the tag grammar
//! `THINK_OPEN think* THINK_CLOSE ACT_OPEN action ACT_CLOSE [EOS]`.
//! Violations never abort an episode: the environment executes a no-op, the
//! turn still consumes a step, and the reward takes a fixed deduction. That
//! keeps malformed rollouts in the training data, where the diagnostics can
//! see them.

mod bandit;
mod keydoor;
mod sokoban;

pub use bandit::BanditState;
pub use keydoor::KeyDoorState;
pub use sokoban::SokobanState;

use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{EnvConfig, EnvId};
use crate::hashing::StableHasher;
use crate::types::{PromptContext, TokenId, TokenSequence};

/// Vocabulary layout: the first five ids are structural, action tokens
/// follow, and everything above the action block is inert filler.
pub const EOS: TokenId = 0;
pub const THINK_OPEN: TokenId = 1;
pub const THINK_CLOSE: TokenId = 2;
pub const ACT_OPEN: TokenId = 3;
pub const ACT_CLOSE: TokenId = 4;
pub const ACTION_BASE: TokenId = 5;

/// Number of distinct actions the environment understands.
pub fn action_count(id: EnvId) -> usize {
    match id {
        EnvId::MiniSokoban => sokoban::ACTIONS.len(),
        EnvId::KeyDoor => keydoor::ACTIONS.len(),
        EnvId::BanditChain => bandit::ARMS,
    }
}

/// Smallest vocabulary that fits the grammar markers plus this
/// environment's action block.
pub fn min_vocab_size(id: EnvId) -> usize {
    usize::from(ACTION_BASE) + action_count(id)
}

/// Token id carrying env action index `ix`.
pub fn action_token(ix: usize) -> TokenId {
    ACTION_BASE + ix as TokenId
}

/// Inverse of [`action_token`]; `None` for structural or filler tokens.
pub fn action_index(token: TokenId) -> Option<usize> {
    token.checked_sub(ACTION_BASE).map(usize::from)
}

/// Human-readable action name, for transition-flow exports and error text.
pub fn action_name(id: EnvId, ix: usize) -> &'static str {
    match id {
        EnvId::MiniSokoban => sokoban::ACTIONS.get(ix).copied().unwrap_or("?"),
        EnvId::KeyDoor => keydoor::ACTIONS.get(ix).copied().unwrap_or("?"),
        EnvId::BanditChain => match ix {
            0 => "arm0",
            1 => "arm1",
            _ => "?",
        },
    }
}

/// All action tokens the environment accepts. Admissibility is
/// state-independent here: blocked moves are executed as no-ops rather than
/// rejected, so the grammar check stays a pure function of the response.
pub fn admissible_tokens(id: EnvId) -> Vec<TokenId> {
    (0..action_count(id)).map(action_token).collect()
}

/// First grammar failure found in a response.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FormatViolation {
    /// A required tag never appears (or the sequence ends early).
    MissingTag,
    /// A structural tag shows up where it cannot legally nest.
    MalformedNesting,
    /// Tokens continue after the closing tag (or after the end marker).
    TrailingContent,
    /// Tags are well formed but the action token is not in the admissible set.
    InadmissibleAction,
}

impl std::fmt::Display for FormatViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            FormatViolation::MissingTag => "missing tag",
            FormatViolation::MalformedNesting => "malformed nesting",
            FormatViolation::TrailingContent => "extraneous trailing content",
            FormatViolation::InadmissibleAction => "inadmissible action",
        };
        f.write_str(s)
    }
}

/// Result of grammar-checking one response. Total over every possible token
/// sequence; violations are values, not errors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParseOutcome {
    Valid { action: TokenId },
    Violation(FormatViolation),
}

impl ParseOutcome {
    pub fn action(&self) -> Option<TokenId> {
        match self {
            ParseOutcome::Valid { action } => Some(*action),
            ParseOutcome::Violation(_) => None,
        }
    }

    pub fn is_valid(&self) -> bool {
        matches!(self, ParseOutcome::Valid { .. })
    }
}

fn is_tag(t: TokenId) -> bool {
    matches!(t, THINK_OPEN | THINK_CLOSE | ACT_OPEN | ACT_CLOSE)
}

/// Checks a response against the tag grammar and the admissible action set.
/// Reports the first failure in reading order; admissibility is checked only
/// once the tags themselves are well formed.
pub fn parse_action(y: &TokenSequence, admissible: &[TokenId]) -> ParseOutcome {
    use FormatViolation::*;
    let toks = &y.tokens;
    let mut i = 0;
    if toks.get(i) != Some(&THINK_OPEN) {
        return ParseOutcome::Violation(MissingTag);
    }
    i += 1;
    // Think region: any non-structural tokens (the end marker included,
    // though sampling would have stopped there).
    while let Some(&t) = toks.get(i) {
        if t == THINK_CLOSE {
            break;
        }
        if is_tag(t) {
            return ParseOutcome::Violation(MalformedNesting);
        }
        i += 1;
    }
    if toks.get(i) != Some(&THINK_CLOSE) {
        return ParseOutcome::Violation(MissingTag);
    }
    i += 1;
    match toks.get(i) {
        Some(&ACT_OPEN) => {}
        Some(&t) if is_tag(t) => return ParseOutcome::Violation(MalformedNesting),
        Some(_) => return ParseOutcome::Violation(MissingTag),
        None => return ParseOutcome::Violation(MissingTag),
    }
    i += 1;
    let action = match toks.get(i) {
        Some(&t) if is_tag(t) => return ParseOutcome::Violation(MalformedNesting),
        Some(&t) => t,
        None => return ParseOutcome::Violation(MissingTag),
    };
    i += 1;
    match toks.get(i) {
        Some(&ACT_CLOSE) => {}
        Some(&t) if is_tag(t) => return ParseOutcome::Violation(MalformedNesting),
        Some(_) => return ParseOutcome::Violation(MissingTag),
        None => return ParseOutcome::Violation(MissingTag),
    }
    i += 1;
    if let Some(&t) = toks.get(i) {
        if t != EOS {
            return ParseOutcome::Violation(TrailingContent);
        }
        i += 1;
    }
    if i != toks.len() {
        return ParseOutcome::Violation(TrailingContent);
    }
    if !admissible.contains(&action) {
        return ParseOutcome::Violation(InadmissibleAction);
    }
    ParseOutcome::Valid { action }
}

/// Applies the format deduction: violations cost `coeff`, valid responses
/// pass the base reward through unchanged.
pub fn shape_reward(base: f64, parse: &ParseOutcome, coeff: f64) -> f64 {
    assert!(coeff >= 0.0, "format penalty must be nonnegative");
    match parse {
        ParseOutcome::Valid { .. } => base,
        ParseOutcome::Violation(_) => base - coeff,
    }
}

/// Shortest valid response that performs the given action (empty think
/// region, closed with the end marker). Used by the scripted expert.
pub fn format_response(action: TokenId) -> TokenSequence {
    TokenSequence { tokens: vec![THINK_OPEN, THINK_CLOSE, ACT_OPEN, action, ACT_CLOSE, EOS] }
}

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("episode finished")]
    EpisodeFinished,
    #[error("action index {0} out of range")]
    BadAction(usize),
}

/// One environment instance: the world state plus episode bookkeeping.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnvState {
    pub inner: EnvInner,
    pub steps: u32,
    pub done: bool,
    /// True once the task goal has been reached (distinct from running out
    /// of steps, which also sets `done`).
    pub succeeded: bool,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum EnvInner {
    Sokoban(SokobanState),
    KeyDoor(KeyDoorState),
    Bandit(BanditState),
}

/// What one transition hands back to the rollout layer.
#[derive(Clone, Debug, PartialEq)]
pub struct StepFeedback {
    pub reward: f64,
    pub done: bool,
    pub observation: Vec<u32>,
}

/// Creates a fresh episode. Deterministic given the rng stream; MiniSokoban
/// redraws layouts until the instance is solvable within the step budget.
pub fn reset(cfg: &EnvConfig, rng: &mut ChaCha12Rng) -> (EnvState, PromptContext) {
    let inner = match cfg.id {
        EnvId::MiniSokoban => EnvInner::Sokoban(sokoban::reset(cfg, rng)),
        EnvId::KeyDoor => EnvInner::KeyDoor(keydoor::reset()),
        EnvId::BanditChain => EnvInner::Bandit(bandit::reset()),
    };
    let state = EnvState { inner, steps: 0, done: false, succeeded: false };
    let ctx = PromptContext { obs_features: observe(cfg, &state), turn_index: 1, history: vec![] };
    (state, ctx)
}

/// Advances one turn. `action` is an env action index; `None` is the
/// format-violation no-op, which still consumes a step (and the step
/// penalty, where the environment has one).
pub fn step(cfg: &EnvConfig, state: &mut EnvState, action: Option<usize>) -> Result<StepFeedback, EnvError> {
    if state.done {
        return Err(EnvError::EpisodeFinished);
    }
    if let Some(ix) = action {
        if ix >= action_count(cfg.id) {
            return Err(EnvError::BadAction(ix));
        }
    }
    state.steps += 1;
    let (reward, succeeded) = match &mut state.inner {
        EnvInner::Sokoban(s) => sokoban::step(cfg, s, action),
        EnvInner::KeyDoor(s) => keydoor::step(s, action),
        EnvInner::Bandit(s) => bandit::step(cfg, s, action),
    };
    if succeeded {
        state.succeeded = true;
        state.done = true;
    } else if state.steps >= cfg.max_steps {
        state.done = true;
    }
    Ok(StepFeedback { reward, done: state.done, observation: observe(cfg, state) })
}

/// Observation feature codes for the current state. Codes are small stable
/// integers in per-field ranges; the policy layer hashes them, so only
/// stability and distinctness matter.
pub fn observe(cfg: &EnvConfig, state: &EnvState) -> Vec<u32> {
    match &state.inner {
        EnvInner::Sokoban(s) => sokoban::observe(cfg, s),
        EnvInner::KeyDoor(s) => keydoor::observe(s),
        EnvInner::Bandit(s) => bandit::observe(s),
    }
}

/// 64-bit hash of the canonical world-state serialization. Deliberately
/// excludes the step counter and done flag: anchor grouping treats a
/// revisited board as the same state regardless of elapsed time.
pub fn fingerprint(cfg: &EnvConfig, state: &EnvState) -> u64 {
    let h = StableHasher::new().str("env").str(cfg.id.name());
    match &state.inner {
        EnvInner::Sokoban(s) => sokoban::fingerprint(h, s),
        EnvInner::KeyDoor(s) => keydoor::fingerprint(h, s),
        EnvInner::Bandit(s) => bandit::fingerprint(h, s),
    }
}

/// Scripted solver move for the current state, if one exists. Breadth-first
/// search for MiniSokoban, fixed scripts for the others. Drives the expert
/// dataset for the cold-start phase.
pub fn expert_action(cfg: &EnvConfig, state: &EnvState) -> Option<usize> {
    if state.done {
        return None;
    }
    match &state.inner {
        EnvInner::Sokoban(s) => {
            let budget = cfg.max_steps - state.steps;
            sokoban::solve(cfg, s, budget).and_then(|plan| plan.first().copied())
        }
        EnvInner::KeyDoor(s) => Some(keydoor::expert_action(s)),
        EnvInner::Bandit(_) => Some(bandit::GOOD_ARM),
    }
}

/// Full solver plan from the current state (test oracle for solvability).
pub fn solve(cfg: &EnvConfig, state: &EnvState) -> Option<Vec<usize>> {
    if state.done {
        return Some(vec![]);
    }
    let budget = cfg.max_steps - state.steps;
    match &state.inner {
        EnvInner::Sokoban(s) => sokoban::solve(cfg, s, budget),
        EnvInner::KeyDoor(s) => {
            let plan = keydoor::plan(s);
            (plan.len() as u32 <= budget).then_some(plan)
        }
        EnvInner::Bandit(s) => {
            let plan = bandit::plan(cfg, s);
            (plan.len() as u32 <= budget).then_some(plan)
        }
    }
}
