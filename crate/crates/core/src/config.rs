//! Run configuration: the objective family selector, environment and policy
//! settings, trainer schedule, TOML loading with dotted-path overrides, and
//! validation.
//!
//! Configs are declarative TOML with one section per module (`[env]`,
//! `[policy]`, `[objective]`, `[trainer]`). Loading works in three steps:
//! parse the user file, apply `--set key=value` overrides into the parsed
//! tree, then deep-merge the tree over the defaults for the selected variant
//! so partial files stay valid. Unknown keys are rejected with the offending
//! key named.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::StableHasher;

/// The eleven objective variants. Naming follows the common shorthand for
/// each method; `_ST` is the sequence-mean-token-mean aggregation twin of
/// GRPO and `_SM` its sequence-masked twin.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "GRPO")]
    Grpo,
    #[serde(rename = "GRPO_ST")]
    GrpoSt,
    #[serde(rename = "GRPO_SM")]
    GrpoSm,
    #[serde(rename = "CISPO")]
    Cispo,
    #[serde(rename = "SAPO")]
    Sapo,
    #[serde(rename = "GSPO")]
    Gspo,
    #[serde(rename = "GIGPO")]
    Gigpo,
    #[serde(rename = "EMPG")]
    Empg,
    #[serde(rename = "DAPO_GRPO")]
    DapoGrpo,
    #[serde(rename = "DAPO_GIGPO")]
    DapoGigpo,
    #[serde(rename = "SAMPO")]
    Sampo,
}

impl Variant {
    pub const ALL: [Variant; 11] = [
        Variant::Grpo,
        Variant::GrpoSt,
        Variant::GrpoSm,
        Variant::Cispo,
        Variant::Sapo,
        Variant::Gspo,
        Variant::Gigpo,
        Variant::Empg,
        Variant::DapoGrpo,
        Variant::DapoGigpo,
        Variant::Sampo,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Grpo => "GRPO",
            Variant::GrpoSt => "GRPO_ST",
            Variant::GrpoSm => "GRPO_SM",
            Variant::Cispo => "CISPO",
            Variant::Sapo => "SAPO",
            Variant::Gspo => "GSPO",
            Variant::Gigpo => "GIGPO",
            Variant::Empg => "EMPG",
            Variant::DapoGrpo => "DAPO_GRPO",
            Variant::DapoGigpo => "DAPO_GIGPO",
            Variant::Sampo => "SAMPO",
        }
    }

    pub fn valid_names() -> String {
        Variant::ALL.map(|v| v.name()).join(", ")
    }

    /// Importance ratio granularity: per-token w_t or one s_i per sequence.
    pub fn ratio_level(self) -> RatioLevel {
        match self {
            Variant::Gspo | Variant::Sampo => RatioLevel::Sequence,
            _ => RatioLevel::Token,
        }
    }

    /// How the ratio turns into a per-token objective coefficient.
    pub fn clip_style(self) -> ClipStyle {
        match self {
            Variant::Cispo => ClipStyle::Cispo,
            Variant::Sapo => ClipStyle::Sapo,
            _ => ClipStyle::Hard,
        }
    }

    /// Which advantage construction feeds the surrogate.
    pub fn advantage_kind(self) -> AdvantageKind {
        match self {
            Variant::Gigpo | Variant::DapoGigpo | Variant::Sampo => AdvantageKind::Gigpo,
            Variant::Empg => AdvantageKind::Empg,
            _ => AdvantageKind::Episode,
        }
    }

    /// Whether the variant turns dynamic group filtering on by default.
    pub fn filters_by_default(self) -> bool {
        matches!(self, Variant::DapoGrpo | Variant::DapoGigpo | Variant::Sampo)
    }

    fn default_aggregation(self) -> Aggregation {
        match self {
            // Sequence-ratio objectives average per-sequence values, and the
            // sequence-mean aggregation is exactly that average when every
            // token of a sequence carries the sequence value.
            Variant::GrpoSt | Variant::Gspo | Variant::Sampo => Aggregation::SeqMeanTokenMean,
            _ => Aggregation::TokenMean,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, ConfigError> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| ConfigError::UnknownVariant { got: s.to_string(), valid: Variant::valid_names() })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RatioLevel {
    Token,
    Sequence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClipStyle {
    /// Pessimistic min(w·A, clip(w)·A); plateaus carry zero gradient.
    Hard,
    /// Detached clipped coefficient times A times log-prob.
    Cispo,
    /// Smooth sigmoid gate times A.
    Sapo,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdvantageKind {
    Episode,
    Gigpo,
    Empg,
}

/// The four loss aggregation estimators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    TokenMean,
    SeqMeanTokenMean,
    SeqMeanTokenSum,
    SeqMeanTokenSumNorm,
}

/// Group normalization denominator: sample standard deviation with an
/// epsilon guard, or a fixed constant.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FNorm {
    Std,
    Constant(f64),
}

/// Keep rule for behavior-cloning episodes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BcKeep {
    /// Keep only episodes that solved the task.
    Success,
    /// Keep episodes whose total shaped reward reaches the bound.
    MinScore(f64),
}

/// Mini-batch shuffling granularity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShuffleLevel {
    Turn,
    Trajectory,
}

/// Environment selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnvId {
    MiniSokoban,
    KeyDoor,
    BanditChain,
}

impl EnvId {
    pub fn name(self) -> &'static str {
        match self {
            EnvId::MiniSokoban => "mini_sokoban",
            EnvId::KeyDoor => "key_door",
            EnvId::BanditChain => "bandit_chain",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvConfig {
    pub id: EnvId,
    /// Board side length (grid task only).
    pub grid_size: u8,
    /// Maximum interaction turns per episode.
    pub max_steps: u32,
    /// Reward deduction applied to a turn whose response violates the
    /// output grammar.
    pub format_penalty: f64,
    /// Number of sequential arm picks (bandit task only).
    pub chain_length: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub vocab_size: usize,
    /// Hashed feature space dimension.
    pub feature_dim: usize,
    /// Hard cap on sampled response length, including the end marker.
    pub max_response_len: usize,
    pub temperature_train: f64,
    pub temperature_eval: f64,
    /// Prior (observation, action) pairs kept in the prompt context.
    pub history_window: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub variant: Variant,
    /// Convenience key: when present, sets both eps_low and eps_high.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub eps: Option<f64>,
    pub eps_low: f64,
    pub eps_high: f64,
    /// Soft-gate temperature for positive advantages.
    pub tau_pos: f64,
    /// Soft-gate temperature for negative advantages.
    pub tau_neg: f64,
    /// Sequence-mask threshold on mean log(pi_old/pi_theta).
    pub delta_mask: f64,
    /// Compose sequence masking onto any variant (forced on for GRPO_SM).
    pub sequence_mask: bool,
    pub aggregation: Aggregation,
    /// Fixed normalizer for the seq-mean-token-sum-norm mode; 0 means
    /// "inherit policy.max_response_len" and is resolved at load time.
    pub t_max: usize,
    /// KL penalty coefficient against the reference policy.
    pub beta: f64,
    /// Discount for anchor-state step returns.
    pub gamma: f64,
    /// Step-advantage weight in A' = A_i + omega * A_step.
    pub omega: f64,
    /// Entropy-modulation sharpness for the advantage scale.
    pub k: f64,
    /// Entropy-modulation sharpness for the next-step bonus.
    pub k_prime: f64,
    /// Weight of the next-step clarity bonus.
    pub zeta: f64,
    /// Normalize modulated advantages to unit variance as well as zero mean.
    pub empg_unit_variance: bool,
    pub f_norm: FNorm,
    /// Drop rollout groups whose success indicators are uniform.
    pub dynamic_filter: bool,
    /// Resampling rounds when filtering thins the batch.
    pub max_try: u32,
}

impl ObjectiveConfig {
    /// Defaults for one variant: symmetric 0.2 clipping unless the method's
    /// reference configuration says otherwise, token-mean aggregation except
    /// for the `_ST` twin, dynamic filtering only where the method requires
    /// it.
    pub fn preset(variant: Variant) -> Self {
        let mut cfg = ObjectiveConfig {
            variant,
            eps: None,
            eps_low: 0.2,
            eps_high: 0.2,
            tau_pos: 1.0,
            tau_neg: 1.05,
            delta_mask: 0.1,
            sequence_mask: variant == Variant::GrpoSm,
            aggregation: variant.default_aggregation(),
            t_max: 0,
            beta: 0.01,
            gamma: 0.95,
            omega: 1.0,
            k: 1.0,
            k_prime: 1.0,
            zeta: 0.05,
            empg_unit_variance: false,
            f_norm: FNorm::Std,
            dynamic_filter: variant.filters_by_default(),
            max_try: 3,
        };
        match variant {
            Variant::Cispo => {
                cfg.eps_low = 1.0;
                cfg.eps_high = 0.2;
            }
            // Sequence-level ratios drift much less per token, hence the
            // tight reference bounds.
            Variant::Gspo | Variant::Sampo => {
                cfg.eps_low = 3e-3;
                cfg.eps_high = 4e-3;
            }
            _ => {}
        }
        cfg
    }

    /// True when sequence masking applies (the `_SM` variant or the
    /// composable flag).
    pub fn masks_sequences(&self) -> bool {
        self.variant == Variant::GrpoSm || self.sequence_mask
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainerConfig {
    pub seed: u64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Rollouts per group (G).
    pub group_size: usize,
    /// Distinct prompt streams per stage.
    pub prompts_per_rollout: usize,
    /// Groups collected per stage; staleness knob.
    pub groups_per_rollout: usize,
    pub mini_batch_size: usize,
    pub total_stages: u64,
    /// Evaluate every this many stages (also the metrics cadence for eval).
    pub eval_every: u64,
    pub eval_episodes: usize,
    /// Periodic full-state checkpoint cadence; 0 keeps only the final one.
    pub checkpoint_every: u64,
    /// Expert episodes collected for behavior cloning; 0 skips BC.
    pub bc_episodes: usize,
    pub bc_epochs: usize,
    pub bc_learning_rate: f64,
    /// Mini-batch size for BC; 0 means full batch.
    pub bc_batch_size: usize,
    /// Probability the scripted expert takes a random admissible action.
    pub bc_noise: f64,
    pub bc_keep: BcKeep,
    /// Persist decomposed turn batches every this many stages; 0 disables.
    pub log_batches_every: u64,
    /// Success-rate variance bound over the final fifth of evaluations.
    pub stability_variance_threshold: f64,
    pub shuffle: ShuffleLevel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub env: EnvConfig,
    pub policy: PolicyConfig,
    pub objective: ObjectiveConfig,
    pub trainer: TrainerConfig,
}

impl RunConfig {
    pub fn defaults_for(variant: Variant) -> Self {
        RunConfig {
            env: EnvConfig {
                id: EnvId::MiniSokoban,
                grid_size: 3,
                max_steps: 15,
                format_penalty: 0.1,
                chain_length: 1,
            },
            policy: PolicyConfig {
                vocab_size: 32,
                feature_dim: 4096,
                max_response_len: 10,
                temperature_train: 1.0,
                temperature_eval: 0.6,
                history_window: 2,
            },
            objective: ObjectiveConfig::preset(variant),
            trainer: TrainerConfig {
                seed: 0,
                learning_rate: 1e-3,
                adam_beta1: 0.9,
                adam_beta2: 0.999,
                adam_eps: 1e-8,
                group_size: 8,
                prompts_per_rollout: 4,
                groups_per_rollout: 4,
                mini_batch_size: 128,
                total_stages: 200,
                eval_every: 25,
                eval_episodes: 64,
                checkpoint_every: 0,
                bc_episodes: 200,
                bc_epochs: 80,
                bc_learning_rate: 0.2,
                bc_batch_size: 256,
                bc_noise: 0.1,
                bc_keep: BcKeep::Success,
                log_batches_every: 0,
                stability_variance_threshold: 1e-3,
                shuffle: ShuffleLevel::Turn,
            },
        }
    }

    /// Parses a TOML document, applies dotted-path overrides, merges over
    /// the variant's defaults, resolves derived fields, and validates.
    pub fn from_toml_str(text: &str, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let mut user: toml::Value = text.parse().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        for (key, raw) in overrides {
            set_path(&mut user, key, raw)?;
        }
        let variant = match user.get("objective").and_then(|o| o.get("variant")) {
            Some(v) => {
                let name = v.as_str().ok_or_else(|| ConfigError::BadValue {
                    key: "objective.variant".into(),
                    reason: "must be a string".into(),
                })?;
                name.parse::<Variant>()?
            }
            None => Variant::Grpo,
        };
        let defaults =
            toml::Value::try_from(RunConfig::defaults_for(variant)).expect("default config serializes");
        let merged = deep_merge(defaults, user);
        let mut cfg: RunConfig =
            merged.try_into().map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: path.display().to_string(), source: e })?;
        Self::from_toml_str(&text, overrides)
    }

    /// Fills derived fields: the `eps` convenience key and the inherited
    /// aggregation normalizer.
    pub fn resolve(&mut self) {
        if let Some(eps) = self.objective.eps.take() {
            self.objective.eps_low = eps;
            self.objective.eps_high = eps;
        }
        if self.objective.t_max == 0 {
            self.objective.t_max = self.policy.max_response_len;
        }
        if self.objective.variant == Variant::GrpoSm {
            self.objective.sequence_mask = true;
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        fn bad(key: &str, reason: impl Into<String>) -> ConfigError {
            ConfigError::BadValue { key: key.into(), reason: reason.into() }
        }
        let o = &self.objective;
        if o.clip_uses_eps() {
            if !(o.eps_low > 0.0 && o.eps_low <= 1.0) {
                return Err(bad("objective.eps_low", "must be in (0, 1]"));
            }
            if o.eps_high <= 0.0 {
                return Err(bad("objective.eps_high", "must be positive"));
            }
        }
        if o.variant.clip_style() == ClipStyle::Sapo && (o.tau_pos <= 0.0 || o.tau_neg <= 0.0) {
            return Err(bad("objective.tau_pos/tau_neg", "must be positive"));
        }
        if !(o.gamma > 0.0 && o.gamma <= 1.0) {
            return Err(bad("objective.gamma", "must be in (0, 1]"));
        }
        if !o.omega.is_finite() || o.omega < 0.0 {
            return Err(bad("objective.omega", "must be finite and nonnegative"));
        }
        if o.k <= 0.0 || o.k_prime <= 0.0 {
            return Err(bad("objective.k/k_prime", "must be positive"));
        }
        if o.zeta < 0.0 {
            return Err(bad("objective.zeta", "must be nonnegative"));
        }
        if !o.delta_mask.is_finite() {
            return Err(bad("objective.delta_mask", "must be finite"));
        }
        if o.beta < 0.0 {
            return Err(bad("objective.beta", "must be nonnegative"));
        }
        if o.max_try == 0 {
            return Err(bad("objective.max_try", "must be at least 1"));
        }
        if let FNorm::Constant(c) = o.f_norm {
            if c <= 0.0 {
                return Err(bad("objective.f_norm", "constant must be positive"));
            }
        }
        if o.t_max == 0 {
            return Err(bad("objective.t_max", "must resolve to a positive length"));
        }

        let p = &self.policy;
        let min_vocab = crate::envs::min_vocab_size(self.env.id);
        if p.vocab_size < min_vocab {
            return Err(bad(
                "policy.vocab_size",
                format!("must be at least {min_vocab} for {}", self.env.id.name()),
            ));
        }
        if p.vocab_size > usize::from(u16::MAX) {
            return Err(bad("policy.vocab_size", "must fit a 16-bit token id"));
        }
        if p.feature_dim == 0 {
            return Err(bad("policy.feature_dim", "must be positive"));
        }
        if p.max_response_len < 5 {
            return Err(bad("policy.max_response_len", "grammar needs at least 5 tokens"));
        }
        if p.temperature_train <= 0.0 || p.temperature_eval <= 0.0 {
            return Err(bad("policy.temperature_train/temperature_eval", "must be positive"));
        }

        let e = &self.env;
        if e.id == EnvId::MiniSokoban && e.grid_size < 3 {
            return Err(bad("env.grid_size", "board must be at least 3x3"));
        }
        if e.max_steps == 0 {
            return Err(bad("env.max_steps", "must be positive"));
        }
        if e.format_penalty < 0.0 {
            return Err(bad("env.format_penalty", "must be nonnegative"));
        }
        if e.id == EnvId::BanditChain && e.chain_length == 0 {
            return Err(bad("env.chain_length", "must be positive"));
        }

        let t = &self.trainer;
        if t.learning_rate <= 0.0 {
            return Err(bad("trainer.learning_rate", "must be positive"));
        }
        if !(0.0..1.0).contains(&t.adam_beta1) || !(0.0..1.0).contains(&t.adam_beta2) {
            return Err(bad("trainer.adam_beta1/adam_beta2", "must be in [0, 1)"));
        }
        if t.adam_eps <= 0.0 {
            return Err(bad("trainer.adam_eps", "must be positive"));
        }
        if t.group_size < 2 {
            return Err(bad("trainer.group_size", "group normalization needs at least 2 rollouts"));
        }
        for (key, v) in [
            ("trainer.prompts_per_rollout", t.prompts_per_rollout),
            ("trainer.groups_per_rollout", t.groups_per_rollout),
            ("trainer.mini_batch_size", t.mini_batch_size),
            ("trainer.eval_episodes", t.eval_episodes),
        ] {
            if v == 0 {
                return Err(bad(key, "must be positive"));
            }
        }
        if t.total_stages == 0 {
            return Err(bad("trainer.total_stages", "must be positive"));
        }
        if t.eval_every == 0 {
            return Err(bad("trainer.eval_every", "must be positive"));
        }
        if t.bc_episodes > 0 {
            if t.bc_learning_rate <= 0.0 {
                return Err(bad("trainer.bc_learning_rate", "must be positive"));
            }
            if !(0.0..=1.0).contains(&t.bc_noise) {
                return Err(bad("trainer.bc_noise", "must be in [0, 1]"));
            }
        }
        if t.stability_variance_threshold <= 0.0 {
            return Err(bad("trainer.stability_variance_threshold", "must be positive"));
        }
        Ok(())
    }

    /// Stable hash of the fully resolved config, recorded in manifests and
    /// checkpoints.
    pub fn hash(&self) -> u64 {
        let text = toml::to_string(self).expect("config serializes");
        StableHasher::new().str(&text).finish()
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}

impl ObjectiveConfig {
    fn clip_uses_eps(&self) -> bool {
        self.variant.clip_style() != ClipStyle::Sapo
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("unknown variant \"{got}\"; valid variants: {valid}")]
    UnknownVariant { got: String, valid: String },
    #[error("invalid value for {key}: {reason}")]
    BadValue { key: String, reason: String },
    #[error("invalid override \"{key}\": {reason}")]
    BadOverride { key: String, reason: String },
}

/// Recursively merges `user` over `base`. Tables merge key by key; any other
/// value (including arrays) replaces the default wholesale.
fn deep_merge(base: toml::Value, user: toml::Value) -> toml::Value {
    match (base, user) {
        (toml::Value::Table(mut b), toml::Value::Table(u)) => {
            for (k, uv) in u {
                let merged = match b.remove(&k) {
                    Some(bv) => deep_merge(bv, uv),
                    None => uv,
                };
                b.insert(k, merged);
            }
            toml::Value::Table(b)
        }
        (_, user) => user,
    }
}

/// Sets `root[path] = raw` where `path` is dotted (`objective.eps_low`).
/// The raw text is parsed as a TOML literal when possible and kept as a
/// string otherwise, so `--set objective.eps_low=0.1` and
/// `--set objective.variant=SAMPO` both do what they look like.
pub fn set_path(root: &mut toml::Value, path: &str, raw: &str) -> Result<(), ConfigError> {
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(ConfigError::BadOverride { key: path.into(), reason: "empty path segment".into() });
    }
    let mut node = root;
    for part in &parts[..parts.len() - 1] {
        let table = node.as_table_mut().ok_or_else(|| ConfigError::BadOverride {
            key: path.into(),
            reason: format!("{part} is not a table"),
        })?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    let leaf = parts[parts.len() - 1];
    let table = node.as_table_mut().ok_or_else(|| ConfigError::BadOverride {
        key: path.into(),
        reason: format!("{leaf}'s parent is not a table"),
    })?;
    table.insert(leaf.to_string(), parse_literal(raw));
    Ok(())
}

fn parse_literal(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Value>() {
        Ok(toml::Value::Table(mut t)) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        _ => toml::Value::String(raw.into()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_inherits_variant_defaults() {
        let cfg = RunConfig::from_toml_str("[objective]\nvariant = \"GSPO\"\n", &[]).unwrap();
        assert_eq!(cfg.objective.variant, Variant::Gspo);
        assert_eq!(cfg.objective.eps_low, 3e-3);
        assert_eq!(cfg.objective.eps_high, 4e-3);
        assert_eq!(cfg.objective.aggregation, Aggregation::SeqMeanTokenMean);
        assert!(!cfg.objective.dynamic_filter);
        // Inherited normalizer resolves to the response cap.
        assert_eq!(cfg.objective.t_max, cfg.policy.max_response_len);
    }

    #[test]
    fn sampo_preset_filters_and_clips_sequences() {
        let cfg = RunConfig::from_toml_str("[objective]\nvariant = \"SAMPO\"\n", &[]).unwrap();
        assert!(cfg.objective.dynamic_filter);
        assert_eq!(cfg.objective.variant.ratio_level(), RatioLevel::Sequence);
        assert_eq!(cfg.objective.variant.advantage_kind(), AdvantageKind::Gigpo);
    }

    #[test]
    fn explicit_keys_survive_the_merge() {
        let text = "[objective]\nvariant = \"GSPO\"\neps_high = 0.5\n[trainer]\nseed = 9\n";
        let cfg = RunConfig::from_toml_str(text, &[]).unwrap();
        assert_eq!(cfg.objective.eps_high, 0.5);
        assert_eq!(cfg.objective.eps_low, 3e-3);
        assert_eq!(cfg.trainer.seed, 9);
    }

    #[test]
    fn eps_convenience_key_sets_both_bounds() {
        let cfg = RunConfig::from_toml_str("", &[("objective.eps".into(), "0.1".into())]).unwrap();
        assert_eq!(cfg.objective.eps_low, 0.1);
        assert_eq!(cfg.objective.eps_high, 0.1);
    }

    #[test]
    fn overrides_parse_literals_and_strings() {
        let overrides = vec![
            ("objective.variant".to_string(), "SAMPO".to_string()),
            ("trainer.total_stages".to_string(), "7".to_string()),
            ("objective.aggregation".to_string(), "\"seq-mean-token-sum\"".to_string()),
        ];
        let cfg = RunConfig::from_toml_str("", &overrides).unwrap();
        assert_eq!(cfg.objective.variant, Variant::Sampo);
        assert_eq!(cfg.trainer.total_stages, 7);
        assert_eq!(cfg.objective.aggregation, Aggregation::SeqMeanTokenSum);
    }

    #[test]
    fn unknown_variant_lists_valid_names() {
        let err = RunConfig::from_toml_str("[objective]\nvariant = \"PPO\"\n", &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("PPO"), "{msg}");
        assert!(msg.contains("SAMPO") && msg.contains("GRPO_ST"), "{msg}");
    }

    #[test]
    fn unknown_key_is_named_in_the_error() {
        let err = RunConfig::from_toml_str("[trainer]\nlerning_rate = 0.1\n", &[]).unwrap_err();
        assert!(err.to_string().contains("lerning_rate"), "{err}");
    }

    #[test]
    fn grpo_sm_forces_the_mask_flag() {
        let cfg = RunConfig::from_toml_str(
            "[objective]\nvariant = \"GRPO_SM\"\nsequence_mask = false\n",
            &[],
        )
        .unwrap();
        assert!(cfg.objective.masks_sequences());
    }

    #[test]
    fn validation_rejects_zero_group() {
        let err = RunConfig::from_toml_str("[trainer]\ngroup_size = 1\n", &[]).unwrap_err();
        assert!(err.to_string().contains("group_size"), "{err}");
    }

    #[test]
    fn config_hash_tracks_content() {
        let a = RunConfig::from_toml_str("", &[]).unwrap();
        let b = RunConfig::from_toml_str("[trainer]\nseed = 1\n", &[]).unwrap();
        assert_eq!(a.hash(), RunConfig::from_toml_str("", &[]).unwrap().hash());
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn f_norm_accepts_both_shapes() {
        let cfg = RunConfig::from_toml_str("[objective]\nf_norm = { constant = 2.0 }\n", &[]).unwrap();
        assert_eq!(cfg.objective.f_norm, FNorm::Constant(2.0));
        let cfg = RunConfig::from_toml_str("[objective]\nf_norm = \"std\"\n", &[]).unwrap();
        assert_eq!(cfg.objective.f_norm, FNorm::Std);
    }
}
