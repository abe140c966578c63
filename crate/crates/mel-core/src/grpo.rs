//! Group-relative policy optimization over verifiable rewards.
//!
//! For each query a group of `G` trajectories is sampled from the frozen
//! step-start snapshot and scored by the exact verifier. Advantages are the
//! group-standardized rewards, broadcast to every token of their
//! trajectory. The update objective is the clipped importance-ratio
//! surrogate, token-averaged per trajectory, averaged over the group and
//! over groups.

use serde::{Deserialize, Serialize};

use crate::error::{MelError, Result};
use crate::policy::{DecodingConfig, GradMap, PolicyParams, PolicySnapshot};
use crate::rng;
use crate::taskenv::{self, Query, TokenId, Trajectory, Vocabulary};

/// Guard for the advantage denominator. Binary-reward groups that are not
/// degenerate have population std >= sqrt(G-1)/G, so the guard only binds
/// when standardization would otherwise divide by zero.
pub const EPS_STD: f64 = 1e-6;

/// All trajectories sampled for one query in one step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RolloutGroup {
    pub query_id: String,
    pub prompt_tokens: Vec<TokenId>,
    pub trajectories: Vec<Trajectory>,
    pub rewards: Vec<u8>,
}

impl RolloutGroup {
    /// Indices of reward-1 trajectories.
    pub fn positives(&self) -> Vec<usize> {
        (0..self.rewards.len()).filter(|&i| self.rewards[i] == 1).collect()
    }

    /// Indices of reward-0 trajectories.
    pub fn negatives(&self) -> Vec<usize> {
        (0..self.rewards.len()).filter(|&i| self.rewards[i] == 0).collect()
    }

    pub fn mean_reward(&self) -> f64 {
        if self.rewards.is_empty() {
            return 0.0;
        }
        self.rewards.iter().map(|&r| r as f64).sum::<f64>() / self.rewards.len() as f64
    }

    /// All rewards equal (including single-trajectory groups).
    pub fn is_degenerate(&self) -> bool {
        self.rewards.windows(2).all(|w| w[0] == w[1])
    }
}

/// Group-standardized advantages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageSet {
    pub values: Vec<f64>,
    /// True when every reward in the group was equal; all advantages are
    /// exactly zero in that case and the group carries no learning signal.
    pub degenerate: bool,
}

/// Standardize rewards within a group: `(r_i - mean) / max(std, EPS_STD)`
/// with the population (not sample) standard deviation. Total for every
/// group size >= 1; all-equal groups short-circuit to zeros.
pub fn normalize_advantages(rewards: &[u8]) -> AdvantageSet {
    let n = rewards.len();
    if n == 0 || rewards.windows(2).all(|w| w[0] == w[1]) {
        return AdvantageSet { values: vec![0.0; n], degenerate: true };
    }
    let mean = rewards.iter().map(|&r| r as f64).sum::<f64>() / n as f64;
    let var = rewards
        .iter()
        .map(|&r| {
            let d = r as f64 - mean;
            d * d
        })
        .sum::<f64>()
        / n as f64;
    let denom = var.sqrt().max(EPS_STD);
    AdvantageSet {
        values: rewards.iter().map(|&r| (r as f64 - mean) / denom).collect(),
        degenerate: false,
    }
}

/// Sample and score a group of `group_size` trajectories from the snapshot.
/// Sample `i` uses the stream seeded by `derive_seed(cfg.seed, [i])`, so a
/// (snapshot, query, config) triple fully determines the group.
pub fn rollout_group(
    vocab: &Vocabulary,
    snapshot: &PolicySnapshot,
    query: &Query,
    group_size: usize,
    cfg: &DecodingConfig,
) -> RolloutGroup {
    assert!(group_size >= 1, "group size must be at least 1");
    let mut trajectories = Vec::with_capacity(group_size);
    let mut rewards = Vec::with_capacity(group_size);
    for i in 0..group_size {
        let sample_cfg = DecodingConfig {
            seed: rng::derive_seed(cfg.seed, &[i as u64]),
            ..*cfg
        };
        let traj = crate::policy::sample(vocab, snapshot.params(), &query.prompt_tokens, &sample_cfg);
        rewards.push(taskenv::verify(&traj, query.ground_truth).reward);
        trajectories.push(traj);
    }
    RolloutGroup {
        query_id: query.id.clone(),
        prompt_tokens: query.prompt_tokens.clone(),
        trajectories,
        rewards,
    }
}

/// Token-level importance ratios `pi_new / pi_old` for a trajectory, both
/// sides recomputed from the given parameter sets at temperature 1.
pub fn importance_ratios(
    params: &PolicyParams,
    snapshot: &PolicySnapshot,
    prompt: &[TokenId],
    trajectory: &Trajectory,
) -> Vec<f64> {
    let new_lp = params.sequence_log_prob(prompt, &trajectory.tokens);
    let old_lp = snapshot.params().sequence_log_prob(prompt, &trajectory.tokens);
    new_lp
        .iter()
        .zip(&old_lp)
        .map(|(n, o)| (n - o).exp())
        .collect()
}

/// Outcome of the clipped surrogate on one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateResult {
    /// Token mean of `min(rho * A, clip(rho) * A)`.
    pub value: f64,
    /// Per-token gradient weight: `A * rho` where the unclipped branch is
    /// active (`rho * A <= clip(rho) * A`), else exactly 0.
    pub grad_weights: Vec<f64>,
    /// Tokens where the clipped branch was strictly smaller.
    pub clipped_tokens: usize,
}

/// Per-token clipped surrogate. `ratios` and `advantages` must have equal
/// length; the advantage of a trajectory is broadcast by the caller.
pub fn clipped_surrogate(
    ratios: &[f64],
    advantages: &[f64],
    epsilon: f64,
) -> Result<SurrogateResult> {
    if ratios.len() != advantages.len() {
        return Err(MelError::Contract(format!(
            "ratio/advantage length mismatch: {} vs {}",
            ratios.len(),
            advantages.len()
        )));
    }
    let mut sum = 0.0;
    let mut grad_weights = Vec::with_capacity(ratios.len());
    let mut clipped_tokens = 0usize;
    for (&rho, &a) in ratios.iter().zip(advantages) {
        let unclipped = rho * a;
        let clipped = rho.clamp(1.0 - epsilon, 1.0 + epsilon) * a;
        if unclipped > clipped {
            clipped_tokens += 1;
            grad_weights.push(0.0);
            sum += clipped;
        } else {
            grad_weights.push(a * rho);
            sum += unclipped;
        }
    }
    let value = if ratios.is_empty() { 0.0 } else { sum / ratios.len() as f64 };
    Ok(SurrogateResult { value, grad_weights, clipped_tokens })
}

/// Aggregate statistics from one gradient computation.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct GrpoStats {
    /// Mean clipped-surrogate objective (token mean per trajectory, mean
    /// over the group, mean over groups).
    pub objective: f64,
    pub clipped_tokens: usize,
    pub total_tokens: usize,
    pub degenerate_groups: usize,
    pub groups: usize,
}

/// Gradient of the clipped surrogate over a batch of groups with respect to
/// the live parameters. Degenerate groups contribute exactly zero but stay
/// in the averaging denominator.
pub fn grpo_gradient(
    params: &PolicyParams,
    snapshot: &PolicySnapshot,
    groups: &[RolloutGroup],
    epsilon: f64,
) -> Result<(GradMap, GrpoStats)> {
    let mut grad = GradMap::new(params.vocab_size());
    let mut stats = GrpoStats { groups: groups.len(), ..GrpoStats::default() };
    if groups.is_empty() {
        return Ok((grad, stats));
    }
    let group_scale = 1.0 / groups.len() as f64;
    for group in groups {
        let adv = normalize_advantages(&group.rewards);
        if adv.degenerate {
            stats.degenerate_groups += 1;
            continue;
        }
        let g = group.trajectories.len() as f64;
        for (i, traj) in group.trajectories.iter().enumerate() {
            stats.total_tokens += traj.tokens.len();
            if traj.tokens.is_empty() {
                continue;
            }
            let ratios = importance_ratios(params, snapshot, &group.prompt_tokens, traj);
            let advantages = vec![adv.values[i]; traj.tokens.len()];
            let sur = clipped_surrogate(&ratios, &advantages, epsilon)?;
            stats.objective += sur.value * group_scale / g;
            stats.clipped_tokens += sur.clipped_tokens;
            let scale = group_scale / (g * traj.tokens.len() as f64);
            let mut ctx = group.prompt_tokens.clone();
            for (t, &tok) in traj.tokens.iter().enumerate() {
                let w = sur.grad_weights[t];
                if w != 0.0 {
                    let dist = params.token_distribution(&ctx);
                    for f in params.active_features(&ctx) {
                        let row = grad.row_mut(f);
                        for (r, p) in row.iter_mut().zip(&dist) {
                            *r -= w * scale * p;
                        }
                        row[tok as usize] += w * scale;
                    }
                }
                ctx.push(tok);
            }
        }
    }
    Ok((grad, stats))
}
