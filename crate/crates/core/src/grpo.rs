//! Group-relative advantages with over-turn completion masking, and the
//! clipped surrogate objective they feed.
//!
//! Values only: no gradients are computed here.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSample {
    pub reward: f64,
    pub turn_count: u32,
    pub context_tokens: u64,
    /// Per-token `pi_theta / pi_theta_old`.
    #[serde(default)]
    pub token_ratios: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupAdvantage {
    pub raw: Vec<f64>,
    pub mask: Vec<u8>,
    pub masked: Vec<f64>,
    pub active_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LimitsConfig {
    pub c_context: u64,
    pub c_turn: u32,
    pub epsilon_low: f64,
    pub epsilon_high: f64,
    pub group_size: usize,
    pub std_epsilon: f64,
}

impl Default for LimitsConfig {
    fn default() -> Self {
        LimitsConfig { c_context: 32768, c_turn: 6, epsilon_low: 0.20, epsilon_high: 0.20, group_size: 16, std_epsilon: 1e-6 }
    }
}

impl LimitsConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        if self.group_size < 2 {
            return Err(GrpoError::InvalidConfig("group_size must be >= 2".into()));
        }
        if !(self.epsilon_low >= 0.0 && self.epsilon_high >= 0.0) {
            return Err(GrpoError::InvalidConfig("clip epsilons must be >= 0".into()));
        }
        if self.std_epsilon.is_nan() || self.std_epsilon <= 0.0 {
            return Err(GrpoError::InvalidConfig("std_epsilon must be positive".into()));
        }
        Ok(())
    }

    /// Completion mask: within both the context and the turn limit.
    pub fn completes(&self, sample: &GroupSample) -> bool {
        sample.context_tokens <= self.c_context && sample.turn_count <= self.c_turn
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GrpoError {
    #[error("group has {0} samples; at least 2 are required")]
    GroupTooSmall(usize),
    #[error("every sample in the group is masked")]
    AllMasked,
    #[error("group advantage has {advantages} entries but {samples} samples were given")]
    LengthMismatch { advantages: usize, samples: usize },
    #[error("sample {index} has a non-positive or non-finite token ratio")]
    BadRatio { index: usize },
    #[error("sample {index} has no token ratios")]
    NoTokens { index: usize },
    #[error("invalid limits config: {0}")]
    InvalidConfig(String),
}

/// Population mean and standard deviation, two-pass.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn group_advantages(samples: &[GroupSample], cfg: &LimitsConfig) -> Result<GroupAdvantage, GrpoError> {
    if samples.len() < 2 {
        return Err(GrpoError::GroupTooSmall(samples.len()));
    }
    let rewards: Vec<f64> = samples.iter().map(|s| s.reward).collect();
    let (mean, std) = mean_std(&rewards);
    let all_equal = rewards.iter().all(|r| *r == rewards[0]);
    let raw: Vec<f64> = if all_equal {
        vec![0.0; rewards.len()]
    } else {
        let denom = std.max(cfg.std_epsilon);
        rewards.iter().map(|r| (r - mean) / denom).collect()
    };
    let mask: Vec<u8> = samples.iter().map(|s| u8::from(cfg.completes(s))).collect();
    let masked = raw.iter().zip(&mask).map(|(a, m)| if *m == 1 { *a } else { 0.0 }).collect();
    let active_count = mask.iter().map(|m| *m as usize).sum();
    Ok(GroupAdvantage { raw, mask, masked, active_count })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveLevel {
    #[default]
    Sequence,
    Token,
}

fn clipped_term(ratio: f64, advantage: f64, cfg: &LimitsConfig) -> f64 {
    let clipped = ratio.clamp(1.0 - cfg.epsilon_low, 1.0 + cfg.epsilon_high);
    (ratio * advantage).min(clipped * advantage)
}

/// Masked mean over the group of `min(rho * A', clip(rho) * A')`.
///
/// Sequence level uses the product of token ratios as `rho`; token level
/// averages the per-token terms within each sample first.
pub fn surrogate_objective(
    adv: &GroupAdvantage,
    samples: &[GroupSample],
    cfg: &LimitsConfig,
    level: ObjectiveLevel,
) -> Result<f64, GrpoError> {
    if adv.masked.len() != samples.len() || adv.mask.len() != samples.len() {
        return Err(GrpoError::LengthMismatch { advantages: adv.masked.len(), samples: samples.len() });
    }
    if adv.active_count == 0 {
        return Err(GrpoError::AllMasked);
    }
    let mut sum = 0.0;
    for (index, sample) in samples.iter().enumerate() {
        if adv.mask[index] == 0 {
            continue;
        }
        if sample.token_ratios.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(GrpoError::BadRatio { index });
        }
        let a = adv.masked[index];
        sum += match level {
            ObjectiveLevel::Sequence => clipped_term(sample.token_ratios.iter().product(), a, cfg),
            ObjectiveLevel::Token => {
                if sample.token_ratios.is_empty() {
                    return Err(GrpoError::NoTokens { index });
                }
                sample.token_ratios.iter().map(|r| clipped_term(*r, a, cfg)).sum::<f64>() / sample.token_ratios.len() as f64
            }
        };
    }
    Ok(sum / adv.active_count as f64)
}

/// Indices of groups whose rewards are not all identical.
pub fn dynamic_sampling_filter(groups: &[Vec<f64>]) -> Vec<usize> {
    groups
        .iter()
        .enumerate()
        .filter(|(_, rewards)| rewards.first().is_some_and(|first| rewards.iter().any(|r| r != first)))
        .map(|(i, _)| i)
        .collect()
}
