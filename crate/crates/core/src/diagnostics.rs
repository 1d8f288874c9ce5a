//! Collapse forensics: out-of-bounds token decomposition, eight-group KL
//! attribution, per-update metric assembly, and action-transition flow
//! export. Everything here is pure aggregation over evaluated batches or
//! stored records; nothing touches the policy.

use std::collections::BTreeMap;
use std::io::Write;

use crate::config::EnvId;
use crate::envs::{action_index, action_name, admissible_tokens, parse_action};
use crate::objective::{kl_k3, LossOutput, RatioBatch, SampleRatios};
use crate::types::{StepMetrics, Trajectory, TurnSample};

/// Clip bounds used for the out-of-bounds fractions recorded in
/// [`StepMetrics`]. Fixed rather than per-variant so the fractions are
/// comparable across objectives with different trust regions.
pub const REFERENCE_EPS: (f64, f64) = (0.2, 0.2);

/// Out-of-bounds token fractions over one evaluated batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct OobStats {
    /// Fraction of tokens with w outside [1 - eps_low, 1 + eps_high].
    pub total: f64,
    /// Fraction below the lower bound carrying a negative advantage, the
    /// leakage mode the sequence mask targets.
    pub lower_neg: f64,
    /// Fraction above the upper bound carrying a positive advantage.
    pub upper_pos: f64,
}

/// Counts importance ratios escaping the trust region, split by the
/// advantage sign that makes each escape direction harmful.
pub fn oob_token_stats(batch: &RatioBatch, eps_low: f64, eps_high: f64) -> OobStats {
    assert!(eps_low > 0.0 && eps_high > 0.0, "bounds must be positive");
    let lo = 1.0 - eps_low;
    let hi = 1.0 + eps_high;
    let mut tokens = 0usize;
    let mut out = 0usize;
    let mut lower_neg = 0usize;
    let mut upper_pos = 0usize;
    for s in &batch.samples {
        for &w in &s.ratios {
            tokens += 1;
            if w < lo || w > hi {
                out += 1;
            }
            if w < lo && s.advantage < 0.0 {
                lower_neg += 1;
            }
            if w > hi && s.advantage > 0.0 {
                upper_pos += 1;
            }
        }
    }
    if tokens == 0 {
        return OobStats::default();
    }
    let n = tokens as f64;
    OobStats {
        total: out as f64 / n,
        lower_neg: lower_neg as f64 / n,
        upper_pos: upper_pos as f64 / n,
    }
}

/// Eight-cell KL attribution over the sequences of a batch.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct KlAttribution {
    /// Shares summing to 1, indexed by 4*(A >= 0) + 2*(s >= 1) + (H >= t):
    /// cell 0 is (A<0, s<1, low entropy), cell 7 is (A>=0, s>=1, high
    /// entropy).
    pub shares: [f64; 8],
    /// True when every sequence had zero reference KL, in which case the
    /// shares are all zero rather than normalized.
    pub zero_total: bool,
}

fn attribution_cell(s: &SampleRatios, entropy_threshold: f64) -> usize {
    let a = usize::from(s.advantage >= 0.0);
    let r = usize::from(s.seq_ratio >= 1.0);
    let h = usize::from(s.mean_entropy >= entropy_threshold);
    4 * a + 2 * r + h
}

/// Assigns every sequence to one of eight cells (advantage sign, sequence
/// ratio side, entropy side) and reports each cell's share of the total
/// sequence-mean reference KL.
pub fn group_kl_attribution(batch: &RatioBatch, entropy_threshold: f64) -> KlAttribution {
    let mut sums = [0.0f64; 8];
    for s in &batch.samples {
        let mean_kl = s.k3_reference.iter().sum::<f64>() / s.k3_reference.len() as f64;
        sums[attribution_cell(s, entropy_threshold)] += mean_kl;
    }
    let total: f64 = sums.iter().sum();
    if total <= 0.0 {
        return KlAttribution { shares: [0.0; 8], zero_total: true };
    }
    let mut shares = [0.0f64; 8];
    for (share, sum) in shares.iter_mut().zip(&sums) {
        *share = sum / total;
    }
    KlAttribution { shares, zero_total: false }
}

/// Median of the per-sequence mean entropies, the default threshold for
/// the eight-group split (it guarantees both entropy cells are populated).
pub fn median_entropy(batch: &RatioBatch) -> f64 {
    let mut means: Vec<f64> = batch.samples.iter().map(|s| s.mean_entropy).collect();
    if means.is_empty() {
        return 0.0;
    }
    means.sort_by(|a, b| a.partial_cmp(b).expect("entropies are finite"));
    let n = means.len();
    if n % 2 == 1 {
        means[n / 2]
    } else {
        0.5 * (means[n / 2 - 1] + means[n / 2])
    }
}

/// Stage-level context the per-update metrics inherit.
#[derive(Clone, Copy, Debug)]
pub struct StageContext {
    pub stage: u64,
    pub update: u64,
    /// Valid parses / turns over the stage's rollouts.
    pub valid_format_ratio: f64,
    /// Successful trajectories / trajectories over the stage's rollouts.
    pub rollout_success: f64,
    /// Groups dropped by dynamic filtering this stage.
    pub filtered_groups: u64,
}

/// Assembles the per-update metrics row from an evaluated loss: L2
/// gradient norm, token-mean off-policy and reference KL over all tokens
/// (mask-free, purely observational), out-of-bounds fractions against the
/// fixed reference bounds, and the eight-group KL shares at the batch
/// median entropy.
pub fn collect_step_metrics(out: &LossOutput, ctx: &StageContext) -> StepMetrics {
    let grad_norm = out.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
    let mut tokens = 0usize;
    let mut off_policy = 0.0;
    let mut reference = 0.0;
    for s in &out.ratios.samples {
        tokens += s.ratios.len();
        off_policy += s.k3_behavior.iter().sum::<f64>();
        reference += s.k3_reference.iter().sum::<f64>();
    }
    let n = tokens.max(1) as f64;
    let oob = oob_token_stats(&out.ratios, REFERENCE_EPS.0, REFERENCE_EPS.1);
    let attribution = group_kl_attribution(&out.ratios, median_entropy(&out.ratios));
    StepMetrics {
        stage: ctx.stage,
        update: ctx.update,
        loss: out.loss,
        grad_norm,
        off_policy_kl: off_policy / n,
        reference_kl: reference / n,
        valid_format_ratio: ctx.valid_format_ratio,
        rollout_success: ctx.rollout_success,
        oob_total: oob.total,
        oob_lower_neg: oob.lower_neg,
        oob_upper_pos: oob.upper_pos,
        kl_shares: attribution.shares,
        filtered_groups: ctx.filtered_groups,
        skipped: false,
    }
}

/// Metrics row for an update that did not happen (empty filtered batch or
/// gradient overflow). Numeric fields are zero; the flag carries the fact.
pub fn skipped_metrics(ctx: &StageContext) -> StepMetrics {
    StepMetrics {
        stage: ctx.stage,
        update: ctx.update,
        loss: 0.0,
        grad_norm: 0.0,
        off_policy_kl: 0.0,
        reference_kl: 0.0,
        valid_format_ratio: ctx.valid_format_ratio,
        rollout_success: ctx.rollout_success,
        oob_total: 0.0,
        oob_lower_neg: 0.0,
        oob_upper_pos: 0.0,
        kl_shares: [0.0; 8],
        filtered_groups: ctx.filtered_groups,
        skipped: true,
    }
}

/// Rebuilds the evaluated-ratio view from stored turn records, using the
/// persisted current-policy log-probs instead of a live policy. Used by
/// offline diagnosis of logged batches; entropies are the collection-time
/// sampling entropies.
pub fn ratios_from_records(samples: &[TurnSample]) -> RatioBatch {
    let evaluated = samples
        .iter()
        .map(|s| {
            let log_ratios: Vec<f64> = s
                .logp_current
                .iter()
                .zip(&s.logp_behavior)
                .map(|(c, b)| c - b)
                .collect();
            let ratios: Vec<f64> = log_ratios.iter().map(|r| r.exp()).collect();
            let mean_log_ratio = log_ratios.iter().sum::<f64>() / log_ratios.len() as f64;
            let k3_reference = s
                .logp_current
                .iter()
                .zip(&s.logp_reference)
                .map(|(c, r)| kl_k3(*c, *r))
                .collect();
            let k3_behavior = s
                .logp_current
                .iter()
                .zip(&s.logp_behavior)
                .map(|(c, b)| kl_k3(*c, *b))
                .collect();
            let mean_entropy = s.entropies.iter().sum::<f64>() / s.entropies.len() as f64;
            SampleRatios {
                ratios,
                seq_ratio: mean_log_ratio.exp(),
                mean_log_behind: -mean_log_ratio,
                log_ratios,
                advantage: s.advantage.map(|a| a.combined).unwrap_or(0.0),
                masked: false,
                k3_reference,
                k3_behavior,
                mean_entropy,
            }
        })
        .collect();
    RatioBatch { samples: evaluated }
}

/// One aggregated action transition: at `step`, `count` trajectories with
/// the given outcome moved from one action to the next.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FlowEntry {
    /// 0-based step index of the `from` action.
    pub step: u32,
    pub from: &'static str,
    pub to: &'static str,
    pub count: u64,
    /// True when the source trajectory succeeded.
    pub success: bool,
}

/// Label for a turn's action in the flow tables. Format violations execute
/// a no-op and are shown as such.
fn action_label(id: EnvId, action: Option<usize>) -> &'static str {
    match action {
        Some(ix) => action_name(id, ix),
        None => "noop",
    }
}

fn flow_from_actions(id: EnvId, episodes: &[(Vec<Option<usize>>, bool)]) -> Vec<FlowEntry> {
    let mut counts: BTreeMap<(u32, bool, &'static str, &'static str), u64> = BTreeMap::new();
    for (actions, success) in episodes {
        for (step, pair) in actions.windows(2).enumerate() {
            let key =
                (step as u32, *success, action_label(id, pair[0]), action_label(id, pair[1]));
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    counts
        .into_iter()
        .map(|((step, success, from, to), count)| FlowEntry { step, from, to, count, success })
        .collect()
}

/// Aggregates step-wise action transitions over trajectories, split by
/// outcome. The result is ordered by (step, outcome, from, to) and is the
/// data behind external Sankey-style plots.
pub fn transition_flow(id: EnvId, trajectories: &[Trajectory]) -> Vec<FlowEntry> {
    let episodes: Vec<(Vec<Option<usize>>, bool)> = trajectories
        .iter()
        .map(|t| {
            let actions =
                t.turns.iter().map(|turn| turn.action.and_then(action_index)).collect();
            (actions, t.success)
        })
        .collect();
    flow_from_actions(id, &episodes)
}

/// Transition flows reconstructed from stored turn records. Samples are
/// regrouped by trajectory id in record order; actions are re-parsed from
/// the stored responses.
pub fn flow_from_samples(id: EnvId, samples: &[TurnSample]) -> Vec<FlowEntry> {
    let admissible = admissible_tokens(id);
    let mut episodes: Vec<(Vec<Option<usize>>, bool)> = Vec::new();
    let mut last_id: Option<u64> = None;
    for s in samples {
        if last_id != Some(s.trajectory_id) {
            episodes.push((Vec::new(), s.success));
            last_id = Some(s.trajectory_id);
        }
        let action = parse_action(&s.response, &admissible).action().and_then(action_index);
        episodes.last_mut().expect("just pushed").0.push(action);
    }
    flow_from_actions(id, &episodes)
}

pub const FLOW_CSV_HEADER: &str = "step,from,to,count,outcome";

/// Writes flow entries as comma-separated rows under [`FLOW_CSV_HEADER`].
pub fn write_flow_csv(w: &mut impl Write, flows: &[FlowEntry]) -> std::io::Result<()> {
    writeln!(w, "{FLOW_CSV_HEADER}")?;
    for f in flows {
        let outcome = if f.success { "success" } else { "failure" };
        writeln!(w, "{},{},{},{},{}", f.step, f.from, f.to, f.count, outcome)?;
    }
    Ok(())
}
