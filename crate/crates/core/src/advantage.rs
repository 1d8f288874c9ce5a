//! Advantage estimators: group-normalized episode advantage, anchor-state
//! step advantage, and entropy-modulated reshaping.
//!
//! All estimators are pure functions over collected rollout groups. They run
//! after dynamic filtering and before turn decomposition, so every surviving
//! turn carries its advantage record into the objective.

use std::collections::HashMap;

use crate::config::{AdvantageKind, FNorm, ObjectiveConfig};
use crate::types::{AdvantageRecord, RolloutGroup, TokenId};

/// Guard added to standard deviations before dividing, so degenerate groups
/// normalize to zero instead of NaN.
pub const NORM_EPS: f64 = 1e-8;

/// Normalization denominator: population standard deviation plus the guard,
/// or a fixed constant.
fn norm_factor(values: &[f64], f_norm: &FNorm) -> f64 {
    match f_norm {
        FNorm::Std => {
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / values.len() as f64;
            var.sqrt() + NORM_EPS
        }
        FNorm::Constant(c) => *c,
    }
}

/// Group-relative episode advantage: mean-centered rewards divided by the
/// normalization factor. All-equal rewards come out as zeros.
pub fn episode_advantage(rewards: &[f64], f_norm: &FNorm) -> Vec<f64> {
    assert!(rewards.len() >= 2, "group normalization needs at least two members");
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    let denom = norm_factor(rewards, f_norm);
    rewards.iter().map(|r| (r - mean) / denom).collect()
}

/// Discounted return from turn `k` (1-indexed) to the end of the episode.
pub fn discounted_step_return(rewards: &[f64], k: usize, gamma: f64) -> f64 {
    assert!(gamma > 0.0 && gamma <= 1.0, "discount must be in (0, 1]");
    assert!(k >= 1 && k <= rewards.len(), "turn index {k} outside 1..={}", rewards.len());
    let mut total = 0.0;
    let mut discount = 1.0;
    for &r in &rewards[k - 1..] {
        total += discount * r;
        discount *= gamma;
    }
    total
}

/// Discounted return at every turn of one trajectory.
pub fn discounted_step_returns(rewards: &[f64], gamma: f64) -> Vec<f64> {
    (1..=rewards.len()).map(|k| discounted_step_return(rewards, k, gamma)).collect()
}

/// All turns of the batch that started from the same environment state.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGroup {
    pub fingerprint: u64,
    pub members: Vec<AnchorMember>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorMember {
    /// Position of the source trajectory in batch iteration order
    /// (groups in order, members in order).
    pub trajectory_ordinal: usize,
    /// 1-based turn number within that trajectory.
    pub turn_index: u32,
    pub action: Option<TokenId>,
    pub discounted_return: f64,
}

/// Groups every turn in the batch by its starting-state fingerprint.
/// Ordering is deterministic: groups sort by fingerprint, members keep
/// batch iteration order (trajectory ordinal, then turn index).
pub fn build_anchor_groups(groups: &[RolloutGroup], gamma: f64) -> Vec<AnchorGroup> {
    let mut by_state: HashMap<u64, Vec<AnchorMember>> = HashMap::new();
    let mut ordinal = 0usize;
    for g in groups {
        for traj in &g.members {
            let returns = discounted_step_returns(&traj.turn_rewards(), gamma);
            for (t, turn) in traj.turns.iter().enumerate() {
                by_state.entry(turn.state_fingerprint).or_default().push(AnchorMember {
                    trajectory_ordinal: ordinal,
                    turn_index: turn.context.turn_index,
                    action: turn.action,
                    discounted_return: returns[t],
                });
            }
            ordinal += 1;
        }
    }
    let mut anchors: Vec<AnchorGroup> = by_state
        .into_iter()
        .map(|(fingerprint, members)| AnchorGroup { fingerprint, members })
        .collect();
    anchors.sort_by_key(|a| a.fingerprint);
    anchors
}

/// Hierarchical advantage: episode advantage within each rollout group plus
/// `omega` times the within-anchor normalized discounted return. Singleton
/// anchors contribute zero step advantage, so their turns keep A' = A_i.
///
/// Output is indexed `[group][member][turn]`, aligned with the input.
pub fn gigpo_advantage(
    groups: &[RolloutGroup],
    gamma: f64,
    omega: f64,
    f_norm: &FNorm,
) -> Vec<Vec<Vec<AdvantageRecord>>> {
    // Step advantages per (trajectory ordinal, turn index).
    let mut step: HashMap<(usize, u32), f64> = HashMap::new();
    for anchor in build_anchor_groups(groups, gamma) {
        let returns: Vec<f64> = anchor.members.iter().map(|m| m.discounted_return).collect();
        let advs: Vec<f64> = if returns.len() >= 2 {
            episode_advantage(&returns, f_norm)
        } else {
            vec![0.0]
        };
        for (m, a) in anchor.members.iter().zip(advs) {
            step.insert((m.trajectory_ordinal, m.turn_index), a);
        }
    }

    let mut out = Vec::with_capacity(groups.len());
    let mut ordinal = 0usize;
    for g in groups {
        let rewards: Vec<f64> = g.members.iter().map(|t| t.total_reward).collect();
        let episode = episode_advantage(&rewards, f_norm);
        let mut group_records = Vec::with_capacity(g.members.len());
        for (traj, &a_i) in g.members.iter().zip(&episode) {
            let records = traj
                .turns
                .iter()
                .map(|turn| {
                    let a_step = step[&(ordinal, turn.context.turn_index)];
                    AdvantageRecord {
                        episode: a_i,
                        step: Some(a_step),
                        combined: a_i + omega * a_step,
                        modulation: None,
                        bonus: None,
                    }
                })
                .collect();
            group_records.push(records);
            ordinal += 1;
        }
        out.push(group_records);
    }
    out
}

/// Mean token entropy of one turn, in nats.
pub fn mean_entropy(entropies: &[f64]) -> f64 {
    assert!(!entropies.is_empty(), "a turn always has at least one token");
    entropies.iter().sum::<f64>() / entropies.len() as f64
}

/// Mean token entropy of a decomposed turn sample.
pub fn step_entropy(sample: &crate::types::TurnSample) -> f64 {
    mean_entropy(&sample.entropies)
}

/// Entropy-modulated advantages. Per turn: `g(H̃)·A + ζ·f(H̃_next)`, where
/// H̃ is the batch z-scored step entropy, `g` is exp(−k·H̃) scaled so its
/// batch mean is one, and `f` is exp(−k′·H̃) of the following turn (the last
/// turn reuses its own entropy). The result is zero-mean normalized across
/// the batch; `unit_variance` additionally divides by the batch deviation.
///
/// `advantages` and `entropies` are per trajectory, per turn, and must be
/// shape-aligned. Output preserves the shape.
pub fn empg_modulate(
    advantages: &[Vec<f64>],
    entropies: &[Vec<f64>],
    k: f64,
    k_prime: f64,
    zeta: f64,
    unit_variance: bool,
) -> Vec<Vec<AdvantageRecord>> {
    assert!(k > 0.0 && k_prime > 0.0, "entropy temperatures must be positive");
    assert_eq!(advantages.len(), entropies.len(), "trajectory counts differ");
    let total: usize = entropies.iter().map(Vec::len).sum();
    if total == 0 {
        return advantages.iter().map(|_| Vec::new()).collect();
    }
    for (a, h) in advantages.iter().zip(entropies) {
        assert_eq!(a.len(), h.len(), "turn counts differ");
    }

    // Batch z-score of the step entropies (guarded like every other
    // normalization here).
    let flat: Vec<f64> = entropies.iter().flatten().copied().collect();
    let mean_h = flat.iter().sum::<f64>() / total as f64;
    let var_h = flat.iter().map(|h| (h - mean_h) * (h - mean_h)).sum::<f64>() / total as f64;
    let denom_h = var_h.sqrt() + NORM_EPS;
    let z: Vec<Vec<f64>> =
        entropies.iter().map(|hs| hs.iter().map(|h| (h - mean_h) / denom_h).collect()).collect();

    let mean_g_raw =
        z.iter().flatten().map(|&zh| (-k * zh).exp()).sum::<f64>() / total as f64;

    let mut records: Vec<Vec<AdvantageRecord>> = Vec::with_capacity(advantages.len());
    for (a_traj, z_traj) in advantages.iter().zip(&z) {
        let mut traj_records = Vec::with_capacity(a_traj.len());
        for (t, (&a, &zh)) in a_traj.iter().zip(z_traj).enumerate() {
            let g = (-k * zh).exp() / mean_g_raw;
            let z_next = *z_traj.get(t + 1).unwrap_or(&zh);
            let f = (-k_prime * z_next).exp();
            traj_records.push(AdvantageRecord {
                episode: a,
                step: None,
                combined: g * a + zeta * f,
                modulation: Some(g),
                bonus: Some(f),
            });
        }
        records.push(traj_records);
    }

    // Final batch normalization over the combined values.
    let combined: Vec<f64> = records.iter().flatten().map(|r| r.combined).collect();
    let mean_c = combined.iter().sum::<f64>() / total as f64;
    let scale = if unit_variance {
        let var_c = combined.iter().map(|c| (c - mean_c) * (c - mean_c)).sum::<f64>() / total as f64;
        var_c.sqrt() + NORM_EPS
    } else {
        1.0
    };
    for r in records.iter_mut().flatten() {
        r.combined = (r.combined - mean_c) / scale;
    }
    records
}

/// Computes per-turn advantage records for a whole batch according to the
/// configured estimator family. Output is indexed `[group][member][turn]`.
pub fn compute_for_groups(groups: &[RolloutGroup], cfg: &ObjectiveConfig) -> Vec<Vec<Vec<AdvantageRecord>>> {
    match cfg.variant.advantage_kind() {
        AdvantageKind::Episode => groups
            .iter()
            .map(|g| {
                let rewards: Vec<f64> = g.members.iter().map(|t| t.total_reward).collect();
                let advs = episode_advantage(&rewards, &cfg.f_norm);
                g.members
                    .iter()
                    .zip(advs)
                    .map(|(traj, a)| vec![AdvantageRecord::episode_only(a); traj.turns.len()])
                    .collect()
            })
            .collect(),
        AdvantageKind::Gigpo => gigpo_advantage(groups, cfg.gamma, cfg.omega, &cfg.f_norm),
        AdvantageKind::Empg => {
            // Episode advantage within each group, broadcast per turn, then
            // entropy modulation across the whole batch.
            let mut advantages: Vec<Vec<f64>> = Vec::new();
            let mut entropies: Vec<Vec<f64>> = Vec::new();
            let mut shape: Vec<usize> = Vec::new();
            for g in groups {
                let rewards: Vec<f64> = g.members.iter().map(|t| t.total_reward).collect();
                let advs = episode_advantage(&rewards, &cfg.f_norm);
                shape.push(g.members.len());
                for (traj, a) in g.members.iter().zip(advs) {
                    advantages.push(vec![a; traj.turns.len()]);
                    entropies.push(traj.turns.iter().map(|t| mean_entropy(&t.entropies)).collect());
                }
            }
            let flat = empg_modulate(
                &advantages,
                &entropies,
                cfg.k,
                cfg.k_prime,
                cfg.zeta,
                cfg.empg_unit_variance,
            );
            let mut it = flat.into_iter();
            shape.iter().map(|&n| (0..n).map(|_| it.next().expect("shape matches")).collect()).collect()
        }
    }
}
