//! The policy-optimization loss family: importance ratios, four clipping
//! styles, sequence masking, four aggregation estimators, a nonnegative KL
//! penalty, dynamic group filtering, and the composed sequence-level
//! variant.
//!
//! Every objective returns its exact analytic gradient over the policy
//! weights. The chain rule runs through per-token gradient coefficients:
//! each token contributes `coeff * grad log pi(token)`, where the
//! coefficient encodes the active branch of the surrogate (clip plateaus
//! contribute zero, detached weights contribute only through log pi, and
//! sequence ratios spread their gradient uniformly over their tokens).

use ndarray::Array2;
use thiserror::Error;

use crate::config::{Aggregation, ClipStyle, ObjectiveConfig, RatioLevel};
use crate::policy::{
    accumulate_grad_log_prob, entropy, featurize, token_distribution, PolicyError, PolicyParams,
};
use crate::types::{RolloutGroup, TurnSample};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("empty batch: nothing to optimize")]
    EmptyBatch,
    #[error("sample {index} has no advantage record")]
    MissingAdvantage { index: usize },
    #[error("non-finite {what} in sample {index}")]
    NonFinite { what: &'static str, index: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Per-token importance ratios from a sample's recorded log-probs:
/// `w_t = exp(logp_current - logp_behavior)`.
pub fn token_ratios(sample: &TurnSample) -> Result<Vec<f64>, ObjectiveError> {
    sample
        .logp_current
        .iter()
        .zip(&sample.logp_behavior)
        .map(|(c, b)| {
            let w = (c - b).exp();
            if w.is_finite() {
                Ok(w)
            } else {
                Err(ObjectiveError::NonFinite { what: "importance ratio", index: 0 })
            }
        })
        .collect()
}

/// Sequence-level ratio: the geometric mean of the token ratios, computed
/// as `exp(mean log-ratio)`.
pub fn sequence_ratio(log_ratios: &[f64]) -> f64 {
    assert!(!log_ratios.is_empty(), "sequence ratio needs at least one token");
    (log_ratios.iter().sum::<f64>() / log_ratios.len() as f64).exp()
}

/// Pessimistic clipped surrogate: `min(w*A, clip(w, 1-eps_low, 1+eps_high)*A)`.
pub fn clip_surrogate(w: f64, a: f64, eps_low: f64, eps_high: f64) -> f64 {
    let clipped = w.clamp(1.0 - eps_low, 1.0 + eps_high);
    (w * a).min(clipped * a)
}

/// Detached clipped coefficient: the ratio clamped into the trust region.
/// The caller multiplies by `A * log pi`; no gradient flows through the
/// coefficient itself.
pub fn cispo_weight(w: f64, eps_low: f64, eps_high: f64) -> f64 {
    w.clamp(1.0 - eps_low, 1.0 + eps_high)
}

fn sigmoid(z: f64) -> f64 {
    // Evaluate through the non-overflowing branch on both sides.
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn sapo_tau(advantage: f64, tau_pos: f64, tau_neg: f64) -> f64 {
    if advantage < 0.0 {
        tau_neg
    } else {
        tau_pos
    }
}

/// Smooth soft gate replacing the hard clip: `sigma(tau*(w-1)) * 4/tau`,
/// with the temperature chosen by advantage sign. At w=1 the gate value is
/// `2/tau` and its slope is exactly 1, matching the unclipped surrogate.
pub fn sapo_gate(w: f64, advantage: f64, tau_pos: f64, tau_neg: f64) -> f64 {
    let tau = sapo_tau(advantage, tau_pos, tau_neg);
    sigmoid(tau * (w - 1.0)) * 4.0 / tau
}

/// Derivative of [`sapo_gate`] in `w`: `4 * sigma' (tau*(w-1))`.
pub fn sapo_gate_slope(w: f64, advantage: f64, tau_pos: f64, tau_neg: f64) -> f64 {
    let tau = sapo_tau(advantage, tau_pos, tau_neg);
    let s = sigmoid(tau * (w - 1.0));
    4.0 * s * (1.0 - s)
}

/// Sequence keep/mask decision: keep when the advantage is nonnegative or
/// the sequence has not drifted beyond the threshold. `mean_log_behind` is
/// the per-sequence mean of `log(pi_behavior) - log(pi_current)`.
pub fn sequence_mask(advantage: f64, mean_log_behind: f64, delta_mask: f64) -> bool {
    advantage >= 0.0 || mean_log_behind <= delta_mask
}

/// Nonnegative KL estimator for one token: `delta - 1 - ln delta` with
/// `delta = exp(logp_reference - logp_current)`, evaluated as
/// `expm1(x) - x`. That form is nonnegative in floating point for every
/// finite input (both series terms of `e^x - 1` at or above `x`), so no
/// clamping is needed.
pub fn kl_k3(logp_current: f64, logp_reference: f64) -> f64 {
    let x = logp_reference - logp_current;
    x.exp_m1() - x
}

/// One of the four loss-normalization estimators over per-sequence,
/// per-token values. `t_max` is only read by the fixed-length variant.
pub fn aggregate(values: &[Vec<f64>], mode: Aggregation, t_max: usize) -> f64 {
    assert!(!values.is_empty(), "aggregation over an empty batch");
    let n = values.len() as f64;
    match mode {
        Aggregation::TokenMean => {
            let total: f64 = values.iter().flatten().sum();
            let tokens: usize = values.iter().map(Vec::len).sum();
            total / tokens as f64
        }
        Aggregation::SeqMeanTokenMean => {
            values.iter().map(|v| v.iter().sum::<f64>() / v.len() as f64).sum::<f64>() / n
        }
        Aggregation::SeqMeanTokenSum => values.iter().map(|v| v.iter().sum::<f64>()).sum::<f64>() / n,
        Aggregation::SeqMeanTokenSumNorm => {
            assert!(t_max > 0, "fixed-length normalization needs t_max");
            values.iter().map(|v| v.iter().sum::<f64>()).sum::<f64>() / (n * t_max as f64)
        }
    }
}

/// Per-sequence weight such that the aggregated value equals
/// `sum_i weight_i * sum_t v_{i,t}` for the given mode.
fn sequence_weight(mode: Aggregation, len: usize, n_seqs: usize, total_tokens: usize, t_max: usize) -> f64 {
    match mode {
        Aggregation::TokenMean => 1.0 / total_tokens as f64,
        Aggregation::SeqMeanTokenMean => 1.0 / (n_seqs as f64 * len as f64),
        Aggregation::SeqMeanTokenSum => 1.0 / n_seqs as f64,
        Aggregation::SeqMeanTokenSumNorm => 1.0 / (n_seqs as f64 * t_max as f64),
    }
}

/// Outcome of dropping uniform-outcome groups and refilling via resampling.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FilterStats {
    /// Groups dropped for having all-success or all-failure members,
    /// including drops among resampled groups.
    pub dropped_uniform: u64,
    /// Resampling rounds actually invoked.
    pub resample_rounds: u32,
    /// Group count the filter tried to reach (the incoming batch size).
    pub requested: usize,
    /// Groups that survived.
    pub kept: usize,
}

fn uniform_outcome(group: &RolloutGroup) -> bool {
    let successes = group.success_count();
    successes == 0 || successes == group.members.len()
}

/// Drops groups whose members all succeeded or all failed (their
/// group-normalized advantages would be identically zero), then asks the
/// resampler for replacements, up to `max_try` rounds. A resampler may
/// return fewer groups than requested or none at all; the filter then
/// proceeds with a partial batch.
pub fn dynamic_filter(
    groups: Vec<RolloutGroup>,
    mut resampler: impl FnMut(usize) -> Vec<RolloutGroup>,
    max_try: u32,
) -> (Vec<RolloutGroup>, FilterStats) {
    assert!(max_try >= 1, "at least one resampling round must be allowed");
    let mut stats = FilterStats { requested: groups.len(), ..FilterStats::default() };
    let mut kept: Vec<RolloutGroup> = Vec::with_capacity(groups.len());
    for g in groups {
        if uniform_outcome(&g) {
            stats.dropped_uniform += 1;
        } else {
            kept.push(g);
        }
    }
    while kept.len() < stats.requested && stats.resample_rounds < max_try {
        stats.resample_rounds += 1;
        let fresh = resampler(stats.requested - kept.len());
        if fresh.is_empty() {
            break;
        }
        for g in fresh {
            if uniform_outcome(&g) {
                stats.dropped_uniform += 1;
            } else if kept.len() < stats.requested {
                kept.push(g);
            }
        }
    }
    stats.kept = kept.len();
    (kept, stats)
}

/// Everything the loss evaluation learned about one sample under the live
/// policy. Retained so diagnostics can attribute divergence without
/// re-running the policy.
#[derive(Clone, Debug)]
pub struct SampleRatios {
    /// Per-token `log pi_current - log pi_behavior` under the live policy.
    pub log_ratios: Vec<f64>,
    /// Per-token importance ratios, `exp` of the log-ratios.
    pub ratios: Vec<f64>,
    /// Geometric-mean sequence ratio.
    pub seq_ratio: f64,
    /// Per-sequence mean of `log pi_behavior - log pi_current`.
    pub mean_log_behind: f64,
    /// Advantage the loss used for this sample.
    pub advantage: f64,
    /// True when the sequence mask excluded this sample from the loss.
    pub masked: bool,
    /// Per-token KL estimate against the reference policy.
    pub k3_reference: Vec<f64>,
    /// Per-token KL estimate against the behavior snapshot.
    pub k3_behavior: Vec<f64>,
    /// Mean live-policy token entropy over the sequence, in nats.
    pub mean_entropy: f64,
}

/// Live-policy evaluation of a whole batch.
#[derive(Clone, Debug, Default)]
pub struct RatioBatch {
    pub samples: Vec<SampleRatios>,
}

impl RatioBatch {
    pub fn total_tokens(&self) -> usize {
        self.samples.iter().map(|s| s.ratios.len()).sum()
    }
}

/// Loss, gradient, and the evaluated ratios that produced them.
#[derive(Debug)]
pub struct LossOutput {
    /// The minimization objective: negated surrogate plus the KL penalty.
    pub loss: f64,
    /// Aggregated maximization surrogate (before negation).
    pub surrogate: f64,
    /// Token-mean reference KL (the penalty term, before scaling by beta).
    pub kl_penalty: f64,
    pub grad: Array2<f64>,
    pub ratios: RatioBatch,
}

/// Evaluates the configured objective over a decomposed batch and returns
/// the scalar loss, its exact gradient over the policy weights, and the
/// per-sample ratio data.
///
/// Current-policy log-probs are recomputed under `policy`; the samples'
/// stored behavior and reference log-probs are frozen snapshots.
pub fn compute_loss(
    policy: &PolicyParams,
    samples: &[TurnSample],
    cfg: &ObjectiveConfig,
    temperature: f64,
) -> Result<LossOutput, ObjectiveError> {
    compute_loss_inner(policy, None, samples, cfg, temperature)
}

/// Same objective with the stop-gradient quantity held at `anchor`: the
/// detached clip coefficient is evaluated under `anchor` instead of
/// `policy`. With `anchor == policy` the result coincides with
/// [`compute_loss`]; for every variant without a detached coefficient the
/// two functions agree identically.
///
/// This is the function to differentiate numerically: central differences
/// of its loss in `policy` around `anchor` converge to the analytic
/// gradient [`compute_loss`] reports at `anchor`, because the coefficient
/// that carries no gradient stays constant under the perturbation.
pub fn compute_loss_frozen(
    policy: &PolicyParams,
    anchor: &PolicyParams,
    samples: &[TurnSample],
    cfg: &ObjectiveConfig,
    temperature: f64,
) -> Result<LossOutput, ObjectiveError> {
    compute_loss_inner(policy, Some(anchor), samples, cfg, temperature)
}

fn compute_loss_inner(
    policy: &PolicyParams,
    anchor: Option<&PolicyParams>,
    samples: &[TurnSample],
    cfg: &ObjectiveConfig,
    temperature: f64,
) -> Result<LossOutput, ObjectiveError> {
    if samples.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    let n_seqs = samples.len();
    let total_tokens: usize = samples.iter().map(|s| s.response.len()).sum();
    let masking = cfg.masks_sequences();

    let mut ratio_batch = RatioBatch { samples: Vec::with_capacity(n_seqs) };
    // Cached per-token distributions and feature vectors for the gradient
    // pass, flat across the batch.
    let mut token_cache = Vec::with_capacity(total_tokens);

    for (index, sample) in samples.iter().enumerate() {
        let advantage = sample
            .advantage
            .as_ref()
            .ok_or(ObjectiveError::MissingAdvantage { index })?
            .combined;
        if !advantage.is_finite() {
            return Err(ObjectiveError::NonFinite { what: "advantage", index });
        }
        let len = sample.response.len();
        let mut log_ratios = Vec::with_capacity(len);
        let mut ratios = Vec::with_capacity(len);
        let mut k3_reference = Vec::with_capacity(len);
        let mut k3_behavior = Vec::with_capacity(len);
        let mut entropy_sum = 0.0;
        for (t, &tok) in sample.response.tokens.iter().enumerate() {
            let phi = featurize(&sample.context, &sample.response.tokens[..t], policy.dim());
            let dist = token_distribution(policy, &phi, temperature)?;
            let logp = dist[usize::from(tok)].ln();
            if !logp.is_finite() {
                return Err(ObjectiveError::NonFinite { what: "current log-prob", index });
            }
            let rho = logp - sample.logp_behavior[t];
            let w = rho.exp();
            if !w.is_finite() {
                return Err(ObjectiveError::NonFinite { what: "importance ratio", index });
            }
            log_ratios.push(rho);
            ratios.push(w);
            k3_reference.push(kl_k3(logp, sample.logp_reference[t]));
            k3_behavior.push(kl_k3(logp, sample.logp_behavior[t]));
            entropy_sum += entropy(&dist);
            // Ratio feeding the detached coefficient: pinned to the anchor
            // policy when one is given, the live ratio otherwise.
            let w_detached = match (anchor, cfg.variant.clip_style()) {
                (Some(base), ClipStyle::Cispo) => {
                    let dist_b = token_distribution(base, &phi, temperature)?;
                    (dist_b[usize::from(tok)].ln() - sample.logp_behavior[t]).exp()
                }
                _ => w,
            };
            token_cache.push((phi, dist, logp, usize::from(tok), w_detached));
        }
        let mean_log_ratio = log_ratios.iter().sum::<f64>() / len as f64;
        let seq_ratio = mean_log_ratio.exp();
        let mean_log_behind = -mean_log_ratio;
        let masked = masking && !sequence_mask(advantage, mean_log_behind, cfg.delta_mask);
        ratio_batch.samples.push(SampleRatios {
            log_ratios,
            ratios,
            seq_ratio,
            mean_log_behind,
            advantage,
            masked,
            k3_reference,
            k3_behavior,
            mean_entropy: entropy_sum / len as f64,
        });
    }

    // Per-token surrogate values and gradient coefficients; masked
    // sequences zero their numerator terms while every denominator keeps
    // counting them.
    let mut surrogate = 0.0;
    let mut kl_penalty = 0.0;
    let mut grad = Array2::zeros((policy.vocab(), policy.dim()));
    let mut cache_ix = 0usize;
    for (sample, eval) in samples.iter().zip(&ratio_batch.samples) {
        let len = sample.response.len();
        let seq_w = sequence_weight(cfg.aggregation, len, n_seqs, total_tokens, cfg.t_max);
        let a = eval.advantage;
        for t in 0..len {
            let (phi, dist, logp, tok, w_detached) = &token_cache[cache_ix];
            cache_ix += 1;
            if eval.masked {
                continue;
            }
            let w = eval.ratios[t];
            // (value, coefficient on grad log pi) for this token.
            let (value, coeff) = match cfg.variant.ratio_level() {
                RatioLevel::Sequence => {
                    let s = eval.seq_ratio;
                    let unclipped = s * a;
                    let clipped = s.clamp(1.0 - cfg.eps_low, 1.0 + cfg.eps_high) * a;
                    if unclipped <= clipped {
                        (unclipped, s * a)
                    } else {
                        (clipped, 0.0)
                    }
                }
                RatioLevel::Token => match cfg.variant.clip_style() {
                    ClipStyle::Hard => {
                        let unclipped = w * a;
                        let clipped = w.clamp(1.0 - cfg.eps_low, 1.0 + cfg.eps_high) * a;
                        if unclipped <= clipped {
                            (unclipped, w * a)
                        } else {
                            (clipped, 0.0)
                        }
                    }
                    ClipStyle::Cispo => {
                        let c = cispo_weight(*w_detached, cfg.eps_low, cfg.eps_high);
                        (c * a * logp, c * a)
                    }
                    ClipStyle::Sapo => {
                        let gate = sapo_gate(w, a, cfg.tau_pos, cfg.tau_neg);
                        let slope = sapo_gate_slope(w, a, cfg.tau_pos, cfg.tau_neg);
                        (gate * a, slope * w * a)
                    }
                },
            };
            surrogate += seq_w * value;
            let k3 = eval.k3_reference[t];
            kl_penalty += k3 / total_tokens as f64;
            // d loss / d logp_t: surrogate contributes -seq_w * coeff, the
            // penalty contributes beta/total * (1 - delta) with
            // delta = exp(logp_ref - logp_cur).
            let mut gcoef = -seq_w * coeff;
            if cfg.beta > 0.0 {
                let delta = (sample.logp_reference[t] - logp).exp();
                gcoef += cfg.beta * (1.0 - delta) / total_tokens as f64;
            }
            if gcoef != 0.0 {
                accumulate_grad_log_prob(&mut grad, gcoef, dist, *tok, phi, temperature);
            }
        }
    }

    let loss = -surrogate + cfg.beta * kl_penalty;
    if !loss.is_finite() {
        return Err(ObjectiveError::NonFinite { what: "loss", index: 0 });
    }
    Ok(LossOutput { loss, surrogate, kl_penalty, grad, ratios: ratio_batch })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{RunConfig, Variant};
    use crate::policy::{grad_log_prob, response_logps, sample_response};
    use crate::types::{AdvantageRecord, PromptContext, TokenSequence, Trajectory, Turn};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    const VOCAB: usize = 6;
    const DIM: usize = 8;

    fn ctx(features: &[u32]) -> PromptContext {
        PromptContext { obs_features: features.to_vec(), turn_index: 1, history: vec![] }
    }

    /// Samples a response from `behavior`, records behavior/reference
    /// log-probs, and attaches the given advantage.
    fn make_sample(
        behavior: &PolicyParams,
        reference: &PolicyParams,
        features: &[u32],
        advantage: f64,
        rng: &mut ChaCha12Rng,
    ) -> TurnSample {
        let c = ctx(features);
        let s = sample_response(behavior, &c, 5, 1.0, 0, rng).unwrap();
        let logp_reference = response_logps(reference, &c, &s.response, 1.0).unwrap();
        TurnSample {
            group_id: 0,
            trajectory_id: 0,
            turn_index: 1,
            success: advantage > 0.0,
            context: c,
            response: s.response,
            logp_current: s.logps.clone(),
            logp_behavior: s.logps,
            logp_reference,
            entropies: s.entropies,
            advantage: Some(AdvantageRecord::episode_only(advantage)),
        }
    }

    fn random_batch(
        seed: u64,
        behavior_scale: f64,
    ) -> (PolicyParams, PolicyParams, PolicyParams, Vec<TurnSample>) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let behavior = PolicyParams::random(VOCAB, DIM, behavior_scale, &mut rng);
        let current = PolicyParams::random(VOCAB, DIM, behavior_scale, &mut rng);
        let reference = PolicyParams::random(VOCAB, DIM, behavior_scale, &mut rng);
        let advantages = [1.0, -1.0, 0.5, -0.5];
        let samples = advantages
            .iter()
            .enumerate()
            .map(|(i, &a)| make_sample(&behavior, &reference, &[i as u32, 9], a, &mut rng))
            .collect();
        (behavior, current, reference, samples)
    }

    #[test]
    fn token_ratio_worked_examples() {
        let mut s = make_sample(
            &PolicyParams::zeros(VOCAB, DIM),
            &PolicyParams::zeros(VOCAB, DIM),
            &[1],
            1.0,
            &mut ChaCha12Rng::seed_from_u64(0),
        );
        // Identical policies: every ratio is one.
        for w in token_ratios(&s).unwrap() {
            assert_eq!(w, 1.0);
        }
        // A ln 2 gap at one token doubles that ratio.
        s.logp_current[0] = s.logp_behavior[0] + std::f64::consts::LN_2;
        let w = token_ratios(&s).unwrap();
        assert!((w[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn token_ratios_match_probability_ratios() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let behavior = PolicyParams::random(VOCAB, DIM, 1.0, &mut rng);
        let current = PolicyParams::random(VOCAB, DIM, 1.0, &mut rng);
        for case in 0..20 {
            let c = ctx(&[case, 3]);
            let s = sample_response(&behavior, &c, 5, 1.0, 0, &mut rng).unwrap();
            let cur_logps = response_logps(&current, &c, &s.response, 1.0).unwrap();
            let sample = TurnSample {
                group_id: 0,
                trajectory_id: 0,
                turn_index: 1,
                success: false,
                context: c.clone(),
                response: s.response.clone(),
                logp_current: cur_logps,
                logp_behavior: s.logps.clone(),
                logp_reference: s.logps.clone(),
                entropies: s.entropies.clone(),
                advantage: None,
            };
            let ws = token_ratios(&sample).unwrap();
            for (t, &w) in ws.iter().enumerate() {
                let phi = featurize(&c, &s.response.tokens[..t], DIM);
                let p = token_distribution(&current, &phi, 1.0).unwrap()
                    [usize::from(s.response.tokens[t])];
                let q = token_distribution(&behavior, &phi, 1.0).unwrap()
                    [usize::from(s.response.tokens[t])];
                assert!((w - p / q).abs() < 1e-12, "{w} vs {}", p / q);
            }
        }
    }

    #[test]
    fn sequence_ratio_worked_examples() {
        let two = std::f64::consts::LN_2;
        assert!((sequence_ratio(&[two, two, two]) - 2.0).abs() < 1e-12);
        assert!((sequence_ratio(&[4f64.ln(), 0.0]) - 2.0).abs() < 1e-12);
        assert!((sequence_ratio(&[0.37]) - 0.37f64.exp()).abs() < 1e-15);
    }

    #[test]
    fn clip_surrogate_worked_examples() {
        assert!((clip_surrogate(1.5, 1.0, 0.2, 0.2) - 1.2).abs() < 1e-15);
        assert!((clip_surrogate(0.5, -1.0, 0.2, 0.2) + 0.8).abs() < 1e-15);
        assert_eq!(clip_surrogate(1.0, 2.0, 0.2, 0.2), 2.0);
    }

    #[test]
    fn cispo_weight_worked_examples() {
        assert!((cispo_weight(3.0, 1.0, 0.2) - 1.2).abs() < 1e-15);
        assert_eq!(cispo_weight(1.0, 1.0, 0.2), 1.0);
        // Lower bound of zero lets small ratios through untouched.
        assert_eq!(cispo_weight(0.001, 1.0, 0.2), 0.001);
    }

    #[test]
    fn sapo_gate_worked_examples() {
        assert!((sapo_gate(1.0, 1.0, 1.0, 1.05) - 2.0).abs() < 1e-15);
        // Negative advantage selects the other temperature: value 2/tau.
        assert!((sapo_gate(1.0, -1.0, 1.0, 1.05) - 2.0 / 1.05).abs() < 1e-15);
        // Unit slope at w=1 regardless of temperature.
        for tau in [0.3, 1.0, 1.05, 2.7] {
            assert!((sapo_gate_slope(1.0, 1.0, tau, tau) - 1.0).abs() < 1e-15, "tau {tau}");
        }
        // Saturation for large ratios.
        assert!((sapo_gate(1000.0, 1.0, 1.0, 1.05) - 4.0).abs() < 1e-9);
    }

    #[test]
    fn sequence_mask_worked_examples() {
        assert!(sequence_mask(0.5, 10.0, 0.1));
        assert!(sequence_mask(-1.0, 0.05, 0.1));
        assert!(!sequence_mask(-1.0, 0.5, 0.1));
    }

    #[test]
    fn k3_worked_examples() {
        assert_eq!(kl_k3(-1.0, -1.0), 0.0);
        // delta = 2: value is 1 - ln 2.
        let got = kl_k3(-(2f64.ln()), 0.0);
        assert!((got - 0.3068528194400547).abs() < 1e-15, "{got}");
    }

    #[test]
    fn k3_expectation_equals_kl_divergence() {
        // Exact enumeration over 3-outcome distributions: the expectation
        // of the estimator under p must be KL(p || q).
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        for _ in 0..200 {
            let draw = |rng: &mut ChaCha12Rng| {
                let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.05..1.0)).collect();
                let z: f64 = raw.iter().sum();
                raw.into_iter().map(|x| x / z).collect::<Vec<f64>>()
            };
            let p = draw(&mut rng);
            let q = draw(&mut rng);
            let estimate: f64 =
                p.iter().zip(&q).map(|(pi, qi)| pi * kl_k3(pi.ln(), qi.ln())).sum();
            let kl: f64 = p.iter().zip(&q).map(|(pi, qi)| pi * (pi / qi).ln()).sum();
            assert!((estimate - kl).abs() < 1e-12, "{estimate} vs {kl}");
        }
    }

    #[test]
    fn aggregate_worked_examples() {
        let values = vec![vec![3.0], vec![1.0, 1.0, 1.0]];
        assert_eq!(aggregate(&values, Aggregation::TokenMean, 4), 1.5);
        assert_eq!(aggregate(&values, Aggregation::SeqMeanTokenMean, 4), 2.0);
        assert_eq!(aggregate(&values, Aggregation::SeqMeanTokenSum, 4), 3.0);
        assert_eq!(aggregate(&values, Aggregation::SeqMeanTokenSumNorm, 4), 0.75);
        // All-singleton batches collapse the distinction (up to t_max).
        let singles = vec![vec![2.0], vec![4.0]];
        assert_eq!(aggregate(&singles, Aggregation::TokenMean, 1), 3.0);
        assert_eq!(aggregate(&singles, Aggregation::SeqMeanTokenMean, 1), 3.0);
        assert_eq!(aggregate(&singles, Aggregation::SeqMeanTokenSum, 1), 3.0);
        assert_eq!(aggregate(&singles, Aggregation::SeqMeanTokenSumNorm, 1), 3.0);
    }

    fn traj(successes: bool, turns: usize) -> Trajectory {
        let reward = if successes { 1.0 } else { 0.0 };
        let turn = Turn {
            context: ctx(&[1]),
            response: TokenSequence { tokens: vec![1, 2, 3, 5, 4, 0] },
            logp_current: vec![-0.5; 6],
            logp_behavior: vec![-0.5; 6],
            logp_reference: vec![-0.5; 6],
            entropies: vec![0.5; 6],
            action: Some(5),
            reward: 0.0,
            state_fingerprint: 1,
        };
        let mut turns: Vec<Turn> = (0..turns).map(|_| turn.clone()).collect();
        for (ix, t) in turns.iter_mut().enumerate() {
            t.context.turn_index = ix as u32 + 1;
        }
        turns.last_mut().unwrap().reward = reward;
        Trajectory { turns, total_reward: reward, success: successes }
    }

    fn group_of(successes: &[bool]) -> RolloutGroup {
        RolloutGroup {
            group_id: 0,
            prompt_seed: 0,
            members: successes.iter().map(|&s| traj(s, 2)).collect(),
        }
    }

    #[test]
    fn filter_drops_uniform_groups_and_refills() {
        let groups = vec![
            group_of(&[true, true, true, true]),
            group_of(&[true, false, false, true]),
            group_of(&[false, false, false, false]),
        ];
        let mut served = 0;
        let (kept, stats) = dynamic_filter(
            groups,
            |need| {
                served += 1;
                // First round serves one mixed group, later rounds nothing.
                if served == 1 {
                    (0..need.min(1)).map(|_| group_of(&[true, false])).collect()
                } else {
                    vec![]
                }
            },
            3,
        );
        assert_eq!(kept.len(), 2);
        assert_eq!(stats.dropped_uniform, 2);
        assert!(stats.resample_rounds >= 1);
        assert_eq!(stats.requested, 3);
    }

    #[test]
    fn filter_exhaustion_yields_empty_set() {
        let groups = vec![group_of(&[true, true]), group_of(&[false, false])];
        let mut rounds = 0;
        let (kept, stats) = dynamic_filter(
            groups,
            |_| {
                rounds += 1;
                vec![group_of(&[true, true])]
            },
            3,
        );
        assert!(kept.is_empty());
        assert_eq!(rounds, 3);
        assert_eq!(stats.resample_rounds, 3);
        assert_eq!(stats.dropped_uniform, 5);
        assert_eq!(stats.kept, 0);
    }

    fn objective_cfg(variant: Variant) -> crate::config::ObjectiveConfig {
        RunConfig::defaults_for(variant).objective
    }

    #[test]
    fn on_policy_grpo_gradient_is_weighted_score_sum() {
        let (behavior, _, _, samples) = random_batch(11, 1.0);
        let mut cfg = objective_cfg(Variant::Grpo);
        cfg.beta = 0.0;
        let out = compute_loss(&behavior, &samples, &cfg, 1.0).unwrap();
        // On-policy: all ratios one, nothing clips; the gradient reduces to
        // -(1/total_tokens) * sum_i A_i * sum_t grad log pi.
        let total_tokens: usize = samples.iter().map(|s| s.response.len()).sum();
        let mut want: Array2<f64> = Array2::zeros((VOCAB, DIM));
        for s in &samples {
            let a = s.advantage.as_ref().unwrap().combined;
            for t in 0..s.response.len() {
                let phi = featurize(&s.context, &s.response.tokens[..t], DIM);
                let g = grad_log_prob(&behavior, &phi, s.response.tokens[t]).unwrap();
                want = want + g * (-a / total_tokens as f64);
            }
        }
        for (got, want) in out.grad.iter().zip(want.iter()) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        for s in &out.ratios.samples {
            for &w in &s.ratios {
                assert!((w - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gspo_equals_grpo_on_single_token_sequences() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        let behavior = PolicyParams::random(VOCAB, DIM, 1.0, &mut rng);
        let current = PolicyParams::random(VOCAB, DIM, 0.7, &mut rng);
        // Hand-built single-token responses (the end marker alone).
        let samples: Vec<TurnSample> = (0u32..4)
            .map(|i| {
                let c = ctx(&[i, 5]);
                let response = TokenSequence { tokens: vec![0] };
                let behavior_lp = response_logps(&behavior, &c, &response, 1.0).unwrap();
                TurnSample {
                    group_id: 0,
                    trajectory_id: u64::from(i),
                    turn_index: 1,
                    success: i % 2 == 0,
                    context: c,
                    response,
                    logp_current: behavior_lp.clone(),
                    logp_behavior: behavior_lp.clone(),
                    logp_reference: behavior_lp,
                    entropies: vec![1.0],
                    advantage: Some(AdvantageRecord::episode_only(if i % 2 == 0 { 0.8 } else { -0.8 })),
                }
            })
            .collect();
        let mut grpo = objective_cfg(Variant::Grpo);
        let mut gspo = objective_cfg(Variant::Gspo);
        // Same bounds and same aggregation isolate the ratio level.
        gspo.eps_low = grpo.eps_low;
        gspo.eps_high = grpo.eps_high;
        gspo.aggregation = grpo.aggregation;
        grpo.beta = 0.0;
        gspo.beta = 0.0;
        let a = compute_loss(&current, &samples, &grpo, 1.0).unwrap();
        let b = compute_loss(&current, &samples, &gspo, 1.0).unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.grad, b.grad);
    }

    #[test]
    fn sampo_with_gspo_records_matches_gspo() {
        // With omega = 0 the composed advantage equals the episode
        // advantage, and the remaining machinery is identical.
        let (_, current, _, samples) = random_batch(23, 0.8);
        let mut sampo = objective_cfg(Variant::Sampo);
        let mut gspo = objective_cfg(Variant::Gspo);
        sampo.beta = 0.1;
        gspo.beta = 0.1;
        let a = compute_loss(&current, &samples, &sampo, 1.0).unwrap();
        let b = compute_loss(&current, &samples, &gspo, 1.0).unwrap();
        assert_eq!(a.loss, b.loss);
        assert_eq!(a.grad, b.grad);
    }

    #[test]
    fn clip_plateau_gradient_is_exactly_zero() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let behavior = PolicyParams::random(VOCAB, DIM, 1.0, &mut rng);
        let mut sample = make_sample(&behavior, &behavior, &[2, 7], 1.0, &mut rng);
        // Push every behavior log-prob far below the live values: ratios
        // blow past the upper bound with positive advantage everywhere.
        for lp in sample.logp_behavior.iter_mut() {
            *lp -= 3.0;
        }
        let mut cfg = objective_cfg(Variant::Grpo);
        cfg.beta = 0.0;
        let out = compute_loss(&behavior, &[sample], &cfg, 1.0).unwrap();
        assert!(out.grad.iter().all(|&g| g == 0.0), "plateau must not leak gradient");
        assert!(out.loss.is_finite());
    }

    #[test]
    fn cispo_gradient_is_detached_coefficient_times_score() {
        let (_, current, _, samples) = random_batch(41, 0.9);
        let mut cfg = objective_cfg(Variant::Cispo);
        cfg.beta = 0.0;
        cfg.aggregation = Aggregation::TokenMean;
        let out = compute_loss(&current, &samples, &cfg, 1.0).unwrap();
        let total_tokens: usize = samples.iter().map(|s| s.response.len()).sum();
        let mut want: Array2<f64> = Array2::zeros((VOCAB, DIM));
        for (s, eval) in samples.iter().zip(&out.ratios.samples) {
            let a = s.advantage.as_ref().unwrap().combined;
            for (t, &w) in eval.ratios.iter().enumerate() {
                let coef = cispo_weight(w, cfg.eps_low, cfg.eps_high);
                let phi = featurize(&s.context, &s.response.tokens[..t], DIM);
                let g = grad_log_prob(&current, &phi, s.response.tokens[t]).unwrap();
                want = want + g * (-coef * a / total_tokens as f64);
            }
        }
        for (got, want) in out.grad.iter().zip(want.iter()) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn masked_sequences_contribute_nothing() {
        let (_, current, _, mut samples) = random_batch(53, 1.2);
        // Make sample 1 negative-advantage and far off-policy so the mask
        // drops it; leave denominators to count it.
        for lp in samples[1].logp_behavior.iter_mut() {
            *lp += 2.0;
        }
        samples[1].advantage = Some(AdvantageRecord::episode_only(-1.0));
        let mut cfg = objective_cfg(Variant::GrpoSm);
        cfg.beta = 0.3;
        let out = compute_loss(&current, &samples, &cfg, 1.0).unwrap();
        assert!(out.ratios.samples[1].masked);

        // Manual recomputation: evaluate the same batch unmasked, then zero
        // every masked sample's numerators while keeping the original
        // denominators (token-mean weights rescale by token counts, so each
        // singleton's contribution subtracts off exactly).
        let mut unmasked = cfg.clone();
        unmasked.sequence_mask = false;
        unmasked.variant = Variant::Grpo;
        let full = compute_loss(&current, &samples, &unmasked, 1.0).unwrap();
        let total_tokens: usize = samples.iter().map(|s| s.response.len()).sum();
        let mut want_surrogate = full.surrogate;
        let mut want_penalty = full.kl_penalty;
        for (sample, eval) in samples.iter().zip(&out.ratios.samples) {
            if !eval.masked {
                continue;
            }
            let one = vec![sample.clone()];
            let solo = compute_loss(&current, &one, &unmasked, 1.0).unwrap();
            let scale = sample.response.len() as f64 / total_tokens as f64;
            want_surrogate -= solo.surrogate * scale;
            want_penalty -= solo.kl_penalty * scale;
        }
        assert!((out.surrogate - want_surrogate).abs() < 1e-12);
        assert!((out.kl_penalty - want_penalty).abs() < 1e-12);
        let want_loss = -want_surrogate + cfg.beta * want_penalty;
        assert!((out.loss - want_loss).abs() < 1e-12);
    }

    #[test]
    fn missing_advantage_is_reported_with_its_index() {
        let (_, current, _, mut samples) = random_batch(61, 1.0);
        samples[2].advantage = None;
        let cfg = objective_cfg(Variant::Grpo);
        match compute_loss(&current, &samples, &cfg, 1.0) {
            Err(ObjectiveError::MissingAdvantage { index }) => assert_eq!(index, 2),
            other => panic!("expected missing-advantage error, got {other:?}"),
        }
        let empty: Vec<TurnSample> = vec![];
        assert!(matches!(
            compute_loss(&current, &empty, &cfg, 1.0),
            Err(ObjectiveError::EmptyBatch)
        ));
    }

    /// Central finite differences of the scalar loss over every weight,
    /// with detached quantities pinned at `policy` so the numerical and
    /// analytic derivatives describe the same function.
    fn fd_grad(
        policy: &PolicyParams,
        samples: &[TurnSample],
        cfg: &crate::config::ObjectiveConfig,
    ) -> Array2<f64> {
        let h = 1e-5;
        let mut out = Array2::zeros((policy.vocab(), policy.dim()));
        for v in 0..policy.vocab() {
            for d in 0..policy.dim() {
                let mut plus = policy.clone();
                plus.theta_mut()[[v, d]] += h;
                let mut minus = policy.clone();
                minus.theta_mut()[[v, d]] -= h;
                let lp = compute_loss_frozen(&plus, policy, samples, cfg, 1.0).unwrap().loss;
                let lm = compute_loss_frozen(&minus, policy, samples, cfg, 1.0).unwrap().loss;
                out[[v, d]] = (lp - lm) / (2.0 * h);
            }
        }
        out
    }

    #[test]
    fn analytic_gradients_match_finite_differences_smoke() {
        // Full 11-variant, 100-instance sweep lives in the acceptance
        // suite; this keeps a fast canary on the main paths.
        for (seed, variant) in [
            (71, Variant::Grpo),
            (72, Variant::Cispo),
            (73, Variant::Sapo),
            (74, Variant::Gspo),
            (75, Variant::Empg),
            (76, Variant::GrpoSm),
        ] {
            let (_, current, _, samples) = random_batch(seed, 0.8);
            let mut cfg = objective_cfg(variant);
            cfg.beta = 0.02;
            cfg.t_max = 5;
            let out = compute_loss(&current, &samples, &cfg, 1.0).unwrap();
            // Pinning at the evaluation point must not change the value.
            let pinned = compute_loss_frozen(&current, &current, &samples, &cfg, 1.0).unwrap();
            assert_eq!(out.loss, pinned.loss, "{variant}: pinned value drifted");
            let fd = fd_grad(&current, &samples, &cfg);
            let mut worst = 0.0f64;
            for (a, f) in out.grad.iter().zip(fd.iter()) {
                let err = (a - f).abs() / a.abs().max(f.abs()).max(1e-3);
                worst = worst.max(err);
            }
            assert!(worst < 1e-4, "{variant}: max rel err {worst}");
        }
    }

    proptest! {
        /// The realized hard-clip value never exceeds the unclipped
        /// surrogate and never falls below the clipped one.
        #[test]
        fn clip_is_pessimistic(
            w in 0.0f64..3.0,
            a in -2.0f64..2.0,
            eps_low in 0.01f64..0.9,
            eps_high in 0.01f64..0.9,
        ) {
            let v = clip_surrogate(w, a, eps_low, eps_high);
            let clipped = w.clamp(1.0 - eps_low, 1.0 + eps_high) * a;
            prop_assert!(v <= w * a + 1e-15);
            prop_assert!(v <= clipped + 1e-15);
            prop_assert!(v >= (w * a).min(clipped) - 1e-15);
        }

        /// The soft gate is monotone increasing in the ratio.
        #[test]
        fn sapo_gate_is_monotone(
            w1 in 0.0f64..4.0,
            bump in 0.001f64..2.0,
            a in prop_oneof![Just(1.0f64), Just(-1.0f64)],
        ) {
            let lo = sapo_gate(w1, a, 1.0, 1.05);
            let hi = sapo_gate(w1 + bump, a, 1.0, 1.05);
            prop_assert!(hi > lo);
        }

        /// The estimator is nonnegative for every finite input and zero
        /// only at coincident log-probs.
        #[test]
        fn k3_is_nonnegative(x in -30.0f64..30.0) {
            let v = kl_k3(0.0, x);
            prop_assert!(v >= 0.0, "k3({x}) = {v}");
            if x != 0.0 {
                prop_assert!(v > 0.0, "k3 must be strictly positive off the diagonal");
            }
        }

        /// Ratios reconstruct from log-ratios within 1e-12 (the stored
        /// invariant of the evaluated batch).
        #[test]
        fn ratio_exponential_consistency(seed in 0u64..50) {
            let (_, current, _, samples) = random_batch(seed, 0.9);
            let cfg = objective_cfg(Variant::Grpo);
            let out = compute_loss(&current, &samples, &cfg, 1.0).unwrap();
            for s in &out.ratios.samples {
                for (w, r) in s.ratios.iter().zip(&s.log_ratios) {
                    prop_assert!((w - r.exp()).abs() < 1e-12);
                }
                prop_assert!((s.seq_ratio - sequence_ratio(&s.log_ratios)).abs() < 1e-12);
            }
        }
    }
}
