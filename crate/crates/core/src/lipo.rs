//! Group advantages: the GRPO baseline and the length-informed variant.
//!
//! The length-informed pipeline sorts a rollout group by response length,
//! boosts the shorter member of each adjacent pair whose rewards are close
//! (the trigger), anchors an optimal length at `max(2·L_min, median)`, weights
//! each response by its proximity to that anchor, and normalizes the adjusted
//! rewards with the weighted mean and (biased) weighted standard deviation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Schedule};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub id: String,
    /// Length in tokens.
    pub length: usize,
    pub reward: f64,
}

impl ResponseRecord {
    pub fn new(id: impl Into<String>, length: usize, reward: f64) -> Self {
        Self {
            id: id.into(),
            length,
            reward,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LipoConfig {
    /// Reward closeness threshold for the trigger.
    pub eta: f64,
    /// Base enhancement factor.
    pub alpha: f64,
    /// Length above which the boost decays.
    pub length_threshold: usize,
    pub min_length: usize,
    /// Proximity weight scale.
    pub phi: f64,
    pub eps: f64,
}

impl Default for LipoConfig {
    fn default() -> Self {
        Self {
            eta: 0.2,
            alpha: 0.1,
            length_threshold: 120,
            min_length: 16,
            phi: 0.01,
            eps: 1e-6,
        }
    }
}

impl LipoConfig {
    /// `alpha = 0` and `phi = 0` are accepted; together they reduce the
    /// pipeline to plain GRPO.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad(format!("eta must be positive, got {}", self.eta));
        }
        if !(0.0..=0.2).contains(&self.alpha) {
            return bad(format!("alpha must lie in [0, 0.2], got {}", self.alpha));
        }
        if self.length_threshold == 0 || self.min_length == 0 {
            return bad("length_threshold and min_length must be positive".into());
        }
        if !(self.phi >= 0.0 && self.phi.is_finite()) {
            return bad(format!("phi must be non-negative, got {}", self.phi));
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseAdvantage {
    pub id: String,
    pub length: usize,
    pub raw_reward: f64,
    pub adjusted_reward: f64,
    pub weight: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupStats {
    /// Absent for plain GRPO.
    pub l_opt: Option<f64>,
    pub mu: f64,
    pub sigma: f64,
    pub pairs_triggered: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdvantageReport {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group_id: Option<String>,
    /// In the caller's original order.
    pub responses: Vec<ResponseAdvantage>,
    pub stats: GroupStats,
}

impl AdvantageReport {
    pub fn advantages(&self) -> Vec<f64> {
        self.responses.iter().map(|r| r.advantage).collect()
    }
}

/// `(R_i − mean) / (std + eps)` with the population standard deviation.
pub fn grpo_advantages(rewards: &[f64], eps: f64) -> Result<Vec<f64>> {
    if rewards.is_empty() {
        return Err(Error::EmptyGroup);
    }
    let (mu, sigma) = weighted_moments(rewards, None);
    Ok(rewards.iter().map(|r| (r - mu) / (sigma + eps)).collect())
}

/// Weighted mean and biased weighted standard deviation.
fn weighted_moments(values: &[f64], weights: Option<&[f64]>) -> (f64, f64) {
    let w = |i: usize| weights.map_or(1.0, |w| w[i]);
    let total: f64 = (0..values.len()).map(w).sum();
    let mu = values
        .iter()
        .enumerate()
        .map(|(i, v)| w(i) * v)
        .sum::<f64>()
        / total;
    let var = values
        .iter()
        .enumerate()
        .map(|(i, v)| w(i) * (v - mu).powi(2))
        .sum::<f64>()
        / total;
    (mu, var.max(0.0).sqrt())
}

/// Stable ascending sort by length.
pub fn sort_group(group: &[ResponseRecord]) -> Vec<ResponseRecord> {
    let mut out = group.to_vec();
    out.sort_by_key(|r| r.length);
    out
}

/// Whether the adjacent pair (`short`, `long`) qualifies for a boost: close
/// rewards, strictly longer partner, and the short response not below
/// `min_length`.
pub fn trigger(short: &ResponseRecord, long: &ResponseRecord, cfg: &LipoConfig) -> bool {
    (long.reward - short.reward).abs() < cfg.eta
        && long.length > short.length
        && short.length >= cfg.min_length
}

/// Boost decay for a short response at or over the length threshold.
pub fn decay_omega(l_short: usize, l_long: usize, cfg: &LipoConfig) -> f64 {
    let lt = cfg.length_threshold as f64;
    let ratio = (l_short as f64 - lt) / (l_long as f64 - lt + cfg.eps);
    (1.0 - ratio).clamp(0.0, 1.0)
}

fn check_sorted(sorted: &[ResponseRecord]) -> Result<()> {
    if let Some(w) = sorted.windows(2).find(|w| w[0].length > w[1].length) {
        return Err(Error::Contract(format!(
            "group not sorted by length: `{}` ({}) precedes `{}` ({})",
            w[0].id, w[0].length, w[1].id, w[1].length
        )));
    }
    Ok(())
}

/// Adjusted rewards for a length-sorted group, plus the number of triggered
/// pairs. Each response can only be boosted as the shorter member of its
/// own pair, and the trigger always sees raw rewards.
fn adjust(sorted: &[ResponseRecord], cfg: &LipoConfig) -> Result<(Vec<f64>, usize)> {
    check_sorted(sorted)?;
    let mut out: Vec<f64> = sorted.iter().map(|r| r.reward).collect();
    let mut triggered = 0;
    for (i, pair) in sorted.windows(2).enumerate() {
        let (short, long) = (&pair[0], &pair[1]);
        if !trigger(short, long, cfg) {
            continue;
        }
        triggered += 1;
        let boost = if short.length < cfg.length_threshold {
            cfg.alpha
        } else {
            cfg.alpha * decay_omega(short.length, long.length, cfg)
        };
        out[i] = short.reward * (1.0 + boost);
    }
    Ok((out, triggered))
}

pub fn adjust_rewards(sorted: &[ResponseRecord], cfg: &LipoConfig) -> Result<Vec<f64>> {
    adjust(sorted, cfg).map(|(r, _)| r)
}

/// `max(2·L_min, median length)`; even-sized groups average the two middle
/// lengths.
pub fn optimal_length(sorted: &[ResponseRecord], cfg: &LipoConfig) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::EmptyGroup);
    }
    check_sorted(sorted)?;
    let k = sorted.len();
    let median = if k % 2 == 1 {
        sorted[k / 2].length as f64
    } else {
        (sorted[k / 2 - 1].length as f64 + sorted[k / 2].length as f64) / 2.0
    };
    Ok(median.max(2.0 * cfg.min_length as f64))
}

/// `exp(−φ·|L − L_opt|)` per response.
pub fn length_weights(sorted: &[ResponseRecord], l_opt: f64, cfg: &LipoConfig) -> Vec<f64> {
    sorted
        .iter()
        .map(|r| (-cfg.phi * (r.length as f64 - l_opt).abs()).exp())
        .collect()
}

fn check_rewards(group: &[ResponseRecord]) -> Result<()> {
    if let Some(r) = group
        .iter()
        .find(|r| !(r.reward >= 0.0 && r.reward.is_finite()))
    {
        return Err(Error::Contract(format!(
            "reward of `{}` must be finite and non-negative, got {}",
            r.id, r.reward
        )));
    }
    Ok(())
}

/// Full length-informed advantage pipeline for one group.
pub fn lipo_advantages(group: &[ResponseRecord], cfg: &LipoConfig) -> Result<AdvantageReport> {
    if group.is_empty() {
        return Err(Error::EmptyGroup);
    }
    cfg.validate()?;
    check_rewards(group)?;

    let mut order: Vec<usize> = (0..group.len()).collect();
    order.sort_by_key(|&i| group[i].length);
    let sorted: Vec<ResponseRecord> = order.iter().map(|&i| group[i].clone()).collect();

    let (adjusted, pairs_triggered) = adjust(&sorted, cfg)?;
    let l_opt = optimal_length(&sorted, cfg)?;
    let weights = length_weights(&sorted, l_opt, cfg);
    let (mu, sigma) = weighted_moments(&adjusted, Some(&weights));

    let mut responses: Vec<Option<ResponseAdvantage>> = vec![None; group.len()];
    for (pos, &orig) in order.iter().enumerate() {
        let r = &sorted[pos];
        responses[orig] = Some(ResponseAdvantage {
            id: r.id.clone(),
            length: r.length,
            raw_reward: r.reward,
            adjusted_reward: adjusted[pos],
            weight: weights[pos],
            advantage: (adjusted[pos] - mu) / (sigma + cfg.eps),
        });
    }
    Ok(AdvantageReport {
        group_id: None,
        responses: responses.into_iter().map(Option::unwrap).collect(),
        stats: GroupStats {
            l_opt: Some(l_opt),
            mu,
            sigma,
            pairs_triggered,
        },
    })
}

/// GRPO advantages in report form: unit weights, no adjustment.
pub fn grpo_report(group: &[ResponseRecord], eps: f64) -> Result<AdvantageReport> {
    let rewards: Vec<f64> = group.iter().map(|r| r.reward).collect();
    let adv = grpo_advantages(&rewards, eps)?;
    let (mu, sigma) = weighted_moments(&rewards, None);
    Ok(AdvantageReport {
        group_id: None,
        responses: group
            .iter()
            .zip(adv)
            .map(|(r, a)| ResponseAdvantage {
                id: r.id.clone(),
                length: r.length,
                raw_reward: r.reward,
                adjusted_reward: r.reward,
                weight: 1.0,
                advantage: a,
            })
            .collect(),
        stats: GroupStats {
            l_opt: None,
            mu,
            sigma,
            pairs_triggered: 0,
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AdvantageMethod {
    Grpo,
    Lipo,
}

/// One rollout group as read from JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub id: String,
    pub responses: Vec<ResponseRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupsFile {
    pub groups: Vec<Group>,
}

/// Advantages for many independent groups; output order follows input.
pub fn batch_advantages(
    groups: &[Group],
    method: AdvantageMethod,
    cfg: &LipoConfig,
    schedule: Schedule,
) -> Result<Vec<AdvantageReport>> {
    par::try_map(groups, schedule, |g| {
        let mut report = match method {
            AdvantageMethod::Grpo => grpo_report(&g.responses, cfg.eps),
            AdvantageMethod::Lipo => lipo_advantages(&g.responses, cfg),
        }?;
        report.group_id = Some(g.id.clone());
        Ok(report)
    })
}
