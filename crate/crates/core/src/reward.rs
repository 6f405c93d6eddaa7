//! Verifiable trajectory-guided reward.
//!
//! ```text
//! R      = r_a * (1 + beta) + r_f
//! beta   = (b0 + w_g * S_clue) * gamma
//! S_clue = C_free                           if tag = free
//!          (2 * IoU + IoP + IoG) / 4        if tag = trajectory_guided
//! gamma  = max(floor, 1 - lambda * (k_t - k_ref))   if k_t > k_ref, else 1
//! ```

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::manifest::{Sample, Tag};
use crate::protocol::Trajectory;
use crate::time::TimeInterval;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClueAggregation {
    /// Score the union of all executed crops once per trajectory.
    #[default]
    Union,
    /// Average the per-call clue score over executed crops.
    PerCallMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardConfig {
    pub b0: f64,
    pub w_g: f64,
    pub c_free: f64,
    pub lambda_decay: f64,
    pub gamma_floor: f64,
    pub clue_aggregation: ClueAggregation,
}

impl Default for RewardConfig {
    fn default() -> Self {
        RewardConfig { b0: 0.5, w_g: 0.5, c_free: 0.5, lambda_decay: 0.05, gamma_floor: 0.0, clue_aggregation: ClueAggregation::Union }
    }
}

impl RewardConfig {
    pub fn validate(&self) -> Result<(), RewardError> {
        let fields = [self.b0, self.w_g, self.c_free, self.lambda_decay, self.gamma_floor];
        if fields.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(RewardError::InvalidConfig("reward parameters must be finite and >= 0".into()));
        }
        if self.gamma_floor > 1.0 {
            return Err(RewardError::InvalidConfig("gamma_floor must be <= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RewardError {
    #[error("sample {0} is trajectory_guided but has no clue intervals")]
    MissingGroundTruth(String),
    #[error("trajectory refers to {trajectory} but sample is {sample}")]
    SampleMismatch { trajectory: String, sample: String },
    #[error("invalid reward config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct IntervalScore {
    pub iou: f64,
    pub iop: f64,
    pub iog: f64,
}

/// Merges overlapping or touching intervals into sorted disjoint millisecond spans.
pub fn union_spans(intervals: &[TimeInterval]) -> Vec<(i64, i64)> {
    let mut spans: Vec<(i64, i64)> = intervals.iter().map(|iv| (iv.start.millis(), iv.end.millis())).collect();
    spans.sort_unstable();
    let mut merged: Vec<(i64, i64)> = Vec::with_capacity(spans.len());
    for (s, e) in spans {
        match merged.last_mut() {
            Some((_, last_end)) if s <= *last_end => *last_end = (*last_end).max(e),
            _ => merged.push((s, e)),
        }
    }
    merged
}

fn measure(spans: &[(i64, i64)]) -> i64 {
    spans.iter().map(|(s, e)| e - s).sum()
}

fn intersection_measure(a: &[(i64, i64)], b: &[(i64, i64)]) -> i64 {
    let (mut i, mut j, mut total) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        let lo = a[i].0.max(b[j].0);
        let hi = a[i].1.min(b[j].1);
        total += (hi - lo).max(0);
        if a[i].1 < b[j].1 {
            i += 1;
        } else {
            j += 1;
        }
    }
    total
}

/// Exact millisecond measures behind an [`IntervalScore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct IntervalMeasures {
    pub intersection: i64,
    pub union: i64,
    pub prediction: i64,
    pub ground_truth: i64,
}

impl IntervalMeasures {
    pub fn of(pred: &[TimeInterval], gt: &[TimeInterval]) -> Self {
        let p = union_spans(pred);
        let g = union_spans(gt);
        let prediction = measure(&p);
        let ground_truth = measure(&g);
        let intersection = intersection_measure(&p, &g);
        IntervalMeasures { intersection, union: prediction + ground_truth - intersection, prediction, ground_truth }
    }

    pub fn score(&self) -> IntervalScore {
        let ratio = |num: i64, den: i64| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        IntervalScore {
            iou: ratio(self.intersection, self.union),
            iop: ratio(self.intersection, self.prediction),
            iog: ratio(self.intersection, self.ground_truth),
        }
    }
}

/// IoU / IoP / IoG on the union measure of each interval set.
pub fn interval_scores(pred: &[TimeInterval], gt: &[TimeInterval]) -> IntervalScore {
    IntervalMeasures::of(pred, gt).score()
}

pub fn hybrid_clue_score(tag: Tag, s: &IntervalScore, cfg: &RewardConfig) -> f64 {
    match tag {
        Tag::Free => cfg.c_free,
        Tag::TrajectoryGuided => (2.0 * s.iou + s.iop + s.iog) / 4.0,
    }
}

pub fn turn_decay(k_t: u32, k_ref: u32, cfg: &RewardConfig) -> f64 {
    if k_t <= k_ref {
        1.0
    } else {
        (1.0 - cfg.lambda_decay * f64::from(k_t - k_ref)).max(cfg.gamma_floor)
    }
}

/// Decides whether a final answer is correct.
pub trait AnswerMatcher: Send + Sync {
    fn is_correct(&self, answer: &str, sample: &Sample) -> bool;
}

/// Case-insensitive exact match on the option letter (or on the whole
/// answer for open-ended samples).
#[derive(Debug, Clone, Copy, Default)]
pub struct OptionLetterMatcher;

impl OptionLetterMatcher {
    fn option_letter(answer: &str) -> Option<char> {
        let trimmed = answer.trim().trim_start_matches(['(', '[']);
        let mut chars = trimmed.chars();
        let first = chars.next()?;
        if !first.is_ascii_alphabetic() {
            return None;
        }
        match chars.next() {
            None => Some(first.to_ascii_uppercase()),
            Some('.' | ')' | ']' | ':' | ' ') => Some(first.to_ascii_uppercase()),
            _ => None,
        }
    }
}

impl AnswerMatcher for OptionLetterMatcher {
    fn is_correct(&self, answer: &str, sample: &Sample) -> bool {
        if sample.options.is_some() {
            match (Self::option_letter(answer), Self::option_letter(&sample.answer_key)) {
                (Some(a), Some(k)) => a == k,
                _ => answer.trim().eq_ignore_ascii_case(sample.answer_key.trim()),
            }
        } else {
            answer.trim().eq_ignore_ascii_case(sample.answer_key.trim())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardComponents {
    pub iou: f64,
    pub iop: f64,
    pub iog: f64,
    pub k_t: u32,
    pub k_ref: u32,
    pub tag: Tag,
    pub turns: u32,
    pub valid_turns: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub sample_ref: String,
    pub r_a: u8,
    pub r_f: f64,
    pub s_clue: f64,
    pub gamma: f64,
    pub beta: f64,
    pub total: f64,
    pub components: RewardComponents,
}

/// Combines the parts exactly as `r_a * (1 + beta) + r_f`.
pub fn compose(r_a: u8, r_f: f64, s_clue: f64, gamma: f64, cfg: &RewardConfig) -> (f64, f64) {
    let beta = (cfg.b0 + cfg.w_g * s_clue) * gamma;
    (beta, f64::from(r_a) * (1.0 + beta) + r_f)
}

pub fn score_trajectory(
    t: &Trajectory,
    sample: &Sample,
    cfg: &RewardConfig,
    matcher: &dyn AnswerMatcher,
) -> Result<RewardBreakdown, RewardError> {
    if t.sample_ref != sample.id {
        return Err(RewardError::SampleMismatch { trajectory: t.sample_ref.clone(), sample: sample.id.clone() });
    }
    if sample.tag == Tag::TrajectoryGuided && sample.clue_intervals.is_empty() {
        return Err(RewardError::MissingGroundTruth(sample.id.clone()));
    }
    let r_a = u8::from(t.final_answer().is_some_and(|a| matcher.is_correct(a, sample)));
    let turns = t.turns.len() as u32;
    let valid_turns = t.turns.iter().filter(|turn| turn.format_valid).count() as u32;
    let r_f = if turns == 0 { 0.0 } else { f64::from(valid_turns) / f64::from(turns) };

    let segments = t.executed_segments();
    let scores = interval_scores(&segments, &sample.clue_intervals);
    let s_clue = match (sample.tag, cfg.clue_aggregation) {
        (Tag::TrajectoryGuided, ClueAggregation::PerCallMean) if !segments.is_empty() => {
            segments
                .iter()
                .map(|seg| hybrid_clue_score(sample.tag, &interval_scores(std::slice::from_ref(seg), &sample.clue_intervals), cfg))
                .sum::<f64>()
                / segments.len() as f64
        }
        _ => hybrid_clue_score(sample.tag, &scores, cfg),
    };
    let gamma = turn_decay(t.tool_call_count, sample.k_ref, cfg);
    let (beta, total) = compose(r_a, r_f, s_clue, gamma, cfg);
    Ok(RewardBreakdown {
        sample_ref: sample.id.clone(),
        r_a,
        r_f,
        s_clue,
        gamma,
        beta,
        total,
        components: RewardComponents {
            iou: scores.iou,
            iop: scores.iop,
            iog: scores.iog,
            k_t: t.tool_call_count,
            k_ref: sample.k_ref,
            tag: sample.tag,
            turns,
            valid_turns,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::TaskType;

    fn iv(s: f64, e: f64) -> TimeInterval {
        TimeInterval::from_secs(s, e).unwrap()
    }

    #[test]
    fn interval_score_examples() {
        let s = interval_scores(&[iv(4.0, 8.0)], &[iv(4.0, 8.0)]);
        assert_eq!((s.iou, s.iop, s.iog), (1.0, 1.0, 1.0));
        let s = interval_scores(&[iv(2.0, 6.0)], &[iv(4.0, 8.0)]);
        assert_eq!((s.iou, s.iop, s.iog), (2.0 / 6.0, 0.5, 0.5));
        assert_eq!(interval_scores(&[iv(0.0, 1.0)], &[iv(5.0, 6.0)]), IntervalScore::default());
        assert_eq!(interval_scores(&[], &[iv(5.0, 6.0)]), IntervalScore::default());
    }

    #[test]
    fn union_measure_merges_overlaps() {
        let m = IntervalMeasures::of(&[iv(0.0, 4.0), iv(2.0, 6.0), iv(10.0, 12.0)], &[iv(3.0, 11.0)]);
        assert_eq!(m.prediction, 8_000);
        assert_eq!(m.ground_truth, 8_000);
        assert_eq!(m.intersection, 4_000);
        assert_eq!(m.union, 12_000);
    }

    #[test]
    fn hybrid_score_examples() {
        let cfg = RewardConfig::default();
        assert_eq!(hybrid_clue_score(Tag::Free, &IntervalScore { iou: 0.9, iop: 0.1, iog: 0.3 }, &cfg), 0.5);
        assert_eq!(hybrid_clue_score(Tag::TrajectoryGuided, &IntervalScore { iou: 1.0, iop: 1.0, iog: 1.0 }, &cfg), 1.0);
        let s = interval_scores(&[iv(2.0, 6.0)], &[iv(4.0, 8.0)]);
        let h = hybrid_clue_score(Tag::TrajectoryGuided, &s, &cfg);
        assert!((h - (2.0 / 3.0 + 0.5 + 0.5) / 4.0).abs() < 1e-15);
        assert!((h - 0.4167).abs() < 1e-4);
    }

    #[test]
    fn turn_decay_examples() {
        let cfg = RewardConfig::default();
        assert_eq!(turn_decay(3, 3, &cfg), 1.0);
        assert!((turn_decay(5, 3, &cfg) - 0.9).abs() < 1e-15);
        assert_eq!(turn_decay(30, 3, &cfg), 0.0);
        let floored = RewardConfig { gamma_floor: 0.2, ..RewardConfig::default() };
        assert_eq!(turn_decay(30, 3, &floored), 0.2);
    }

    #[test]
    fn option_letter_matching() {
        let sample = Sample {
            id: "s".into(),
            manifest_ref: "m".into(),
            question: "q".into(),
            options: Some(vec!["A. x".into(), "B. y".into()]),
            answer_key: "B".into(),
            clue_intervals: vec![],
            tag: Tag::Free,
            k_ref: 0,
            task_type: TaskType::SingleClueDirect,
        };
        let m = OptionLetterMatcher;
        for ok in ["B", "b", " B. y", "(B)", "B) because"] {
            assert!(m.is_correct(ok, &sample), "{ok}");
        }
        for bad in ["A", "Because", "", "BB"] {
            assert!(!m.is_correct(bad, &sample), "{bad}");
        }
        let open = Sample { options: None, answer_key: "Blue car".into(), ..sample };
        assert!(m.is_correct("blue car", &open));
        assert!(!m.is_correct("B", &open));
    }

    #[test]
    fn config_validation() {
        RewardConfig::default().validate().unwrap();
        assert!(RewardConfig { gamma_floor: 1.5, ..Default::default() }.validate().is_err());
        assert!(RewardConfig { w_g: -0.1, ..Default::default() }.validate().is_err());
    }
}
