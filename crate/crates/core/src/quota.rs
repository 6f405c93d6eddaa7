//! Dynamic visual-token quota arithmetic and the visual-context budget ledger.
//!
//! A crop of `[t_s, t_e]` at granularity `q` is sampled at the configured fps
//! and the granularity's token quota is spread across the frames:
//! `tokens_per_frame = q / ((t_e - t_s) * fps)`, made integral by taking the
//! ceiling of the frame count and the floor of the per-frame share.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{CropDirective, SamplingStrategy};
use crate::time::{Seconds, TimeInterval};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuotaConfig {
    pub overview_quota: u64,
    pub coarse: u64,
    pub medium: u64,
    pub fine: u64,
    pub max_visual_budget: u64,
    pub fps: f64,
    pub frame_limit: u64,
    pub min_tokens_per_frame: u64,
}

impl Default for QuotaConfig {
    fn default() -> Self {
        QuotaConfig {
            overview_quota: 16384,
            coarse: 2048,
            medium: 4096,
            fine: 6144,
            max_visual_budget: 32768,
            fps: 2.0,
            frame_limit: 768,
            min_tokens_per_frame: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum QuotaError {
    #[error("interval is empty after clamping to the video duration")]
    ZeroLengthInterval,
    #[error("invalid quota config: {0}")]
    InvalidConfig(String),
}

impl QuotaConfig {
    pub fn validate(&self) -> Result<(), QuotaError> {
        let bad = |m: &str| Err(QuotaError::InvalidConfig(m.to_string()));
        if !(self.coarse < self.medium && self.medium < self.fine) {
            return bad("need coarse < medium < fine");
        }
        if self.fine > self.overview_quota {
            return bad("need fine <= overview_quota");
        }
        if self.overview_quota >= self.max_visual_budget {
            return bad("need overview_quota < max_visual_budget");
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return bad("fps must be positive");
        }
        if self.frame_limit == 0 {
            return bad("frame_limit must be positive");
        }
        if self.min_tokens_per_frame == 0 || self.min_tokens_per_frame > self.coarse {
            return bad("need 0 < min_tokens_per_frame <= coarse");
        }
        Ok(())
    }

    pub fn quota_for(&self, strategy: SamplingStrategy) -> u64 {
        match strategy {
            SamplingStrategy::Coarse => self.coarse,
            SamplingStrategy::Medium => self.medium,
            SamplingStrategy::Fine => self.fine,
        }
    }

    /// Frames needed to cover `len` at the configured fps, before any clamp.
    pub fn raw_frame_count(&self, len: Seconds) -> u64 {
        (len.millis() as f64 * self.fps / 1000.0).ceil().max(0.0) as u64
    }

    /// Overview of the whole video at the overview quota.
    pub fn overview_plan(&self, duration: Seconds) -> Result<OverviewPlan, QuotaError> {
        if duration <= Seconds::ZERO {
            return Err(QuotaError::ZeroLengthInterval);
        }
        let (frame_count, tokens_per_frame) = self.split(duration, self.overview_quota);
        Ok(OverviewPlan { frame_count, tokens_per_frame, total_tokens: frame_count * tokens_per_frame })
    }

    fn split(&self, len: Seconds, quota: u64) -> (u64, u64) {
        let by_budget = (quota / self.min_tokens_per_frame).max(1);
        let frames = self.raw_frame_count(len).clamp(1, self.frame_limit).min(by_budget);
        let per_frame = (quota / frames).clamp(self.min_tokens_per_frame.min(quota), quota);
        (frames, per_frame)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverviewPlan {
    pub frame_count: u64,
    pub tokens_per_frame: u64,
    pub total_tokens: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub directive: CropDirective,
    pub frame_count: u64,
    pub tokens_per_frame: u64,
    pub total_tokens: u64,
}

impl SamplingPlan {
    /// Evenly spaced frame timestamps across the directive's window.
    pub fn frame_times(&self) -> Vec<Seconds> {
        let iv = self.directive.temporal_segment;
        let len = iv.length().millis();
        (0..self.frame_count)
            .map(|i| Seconds::from_millis(iv.start.millis() + (len * i as i64) / self.frame_count as i64))
            .collect()
    }
}

/// Turns a directive into a frame count and per-frame token density.
///
/// The frame count is capped by `frame_limit` and by `q / min_tokens_per_frame`
/// so that `frame_count * tokens_per_frame <= q` always holds.
pub fn compute_sampling_plan(
    d: &CropDirective,
    cfg: &QuotaConfig,
    video_duration: Seconds,
) -> Result<SamplingPlan, QuotaError> {
    let segment = d.temporal_segment.clamp_to(video_duration).ok_or(QuotaError::ZeroLengthInterval)?;
    let quota = cfg.quota_for(d.sampling_strategy);
    let (frame_count, tokens_per_frame) = cfg.split(segment.length(), quota);
    Ok(SamplingPlan {
        directive: CropDirective::new(segment, d.sampling_strategy),
        frame_count,
        tokens_per_frame,
        total_tokens: frame_count * tokens_per_frame,
    })
}

/// Same as [`compute_sampling_plan`] for raw window bounds, which may be empty.
pub fn plan_for_window(
    start: Seconds,
    end: Seconds,
    strategy: SamplingStrategy,
    cfg: &QuotaConfig,
    video_duration: Seconds,
) -> Result<SamplingPlan, QuotaError> {
    let segment = TimeInterval::new(start, end).map_err(|_| QuotaError::ZeroLengthInterval)?;
    compute_sampling_plan(&CropDirective::new(segment, strategy), cfg, video_duration)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub turn: u32,
    pub tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BudgetLedger {
    spent: u64,
    cap: u64,
    entries: Vec<LedgerEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ChargeOutcome {
    Charged,
    Refused { remaining: u64 },
}

impl BudgetLedger {
    pub fn new(cap: u64) -> Self {
        BudgetLedger { spent: 0, cap, entries: Vec::new() }
    }

    /// A ledger that already carries the overview charge as turn 0.
    pub fn with_overview(cfg: &QuotaConfig) -> Self {
        let mut ledger = BudgetLedger::new(cfg.max_visual_budget);
        let outcome = ledger.charge_tokens(0, cfg.overview_quota);
        debug_assert_eq!(outcome, ChargeOutcome::Charged);
        ledger
    }

    pub fn spent(&self) -> u64 {
        self.spent
    }

    pub fn cap(&self) -> u64 {
        self.cap
    }

    pub fn remaining(&self) -> u64 {
        self.cap - self.spent
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn charge_tokens(&mut self, turn: u32, tokens: u64) -> ChargeOutcome {
        match self.spent.checked_add(tokens) {
            Some(next) if next <= self.cap => {
                self.spent = next;
                self.entries.push(LedgerEntry { turn, tokens });
                ChargeOutcome::Charged
            }
            _ => ChargeOutcome::Refused { remaining: self.remaining() },
        }
    }

    pub fn charge(&mut self, turn: u32, plan: &SamplingPlan) -> ChargeOutcome {
        self.charge_tokens(turn, plan.total_tokens)
    }

    /// `spent` equals the entry sum and stays within the cap.
    pub fn is_consistent(&self) -> bool {
        self.entries.iter().map(|e| e.tokens).sum::<u64>() == self.spent && self.spent <= self.cap
    }
}
