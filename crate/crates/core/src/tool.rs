//! The simulated VideoCrop tool: plans a crop, charges the budget ledger and
//! reports which event payloads the sampled frames reveal.

use serde::{Deserialize, Serialize};

use crate::manifest::{Event, Saliency, VideoManifest};
use crate::protocol::{CropDirective, FrameObservation, ToolObservation};
use crate::quota::{compute_sampling_plan, BudgetLedger, ChargeOutcome, QuotaConfig, SamplingPlan};
use crate::time::Seconds;

/// Subtle events show up only at this per-frame token density or above.
pub const DEFAULT_SUBTLE_VISIBILITY_TOKENS: u64 = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Visibility {
    pub subtle_min_tokens_per_frame: u64,
}

impl Default for Visibility {
    fn default() -> Self {
        Visibility { subtle_min_tokens_per_frame: DEFAULT_SUBTLE_VISIBILITY_TOKENS }
    }
}

impl Visibility {
    pub fn can_see(&self, saliency: Saliency, tokens_per_frame: u64) -> bool {
        match saliency {
            Saliency::Salient => true,
            Saliency::Subtle => tokens_per_frame >= self.subtle_min_tokens_per_frame,
        }
    }
}

/// Sweeps the ascending frame times against the events by start time,
/// keeping the events that may still contain a later frame. Payloads come
/// out in manifest order.
fn observe_frames(manifest: &VideoManifest, times: &[Seconds], tokens_per_frame: u64, vis: Visibility) -> ToolObservation {
    debug_assert!(times.windows(2).all(|w| w[0] <= w[1]));
    let mut visible: Vec<(usize, &Event)> =
        manifest.events.iter().enumerate().filter(|(_, e)| vis.can_see(e.saliency, tokens_per_frame)).collect();
    visible.sort_by_key(|(_, e)| e.interval.start);
    let mut pending = visible.into_iter().peekable();
    let mut active: Vec<(usize, &Event)> = Vec::new();
    let frames = times
        .iter()
        .map(|t| {
            let before = active.len();
            while let Some(e) = pending.next_if(|(_, e)| e.interval.start <= *t) {
                active.push(e);
            }
            if active.len() > before {
                active.sort_by_key(|(i, _)| *i);
            }
            active.retain(|(_, e)| e.interval.end >= *t);
            FrameObservation {
                timestamp: *t,
                tokens: tokens_per_frame,
                event_payloads: active.iter().map(|(_, e)| e.payload.clone()).collect(),
            }
        })
        .collect();
    ToolObservation::new(frames)
}

/// What the sampled frames of `plan` reveal.
pub fn observe_plan(manifest: &VideoManifest, plan: &SamplingPlan, vis: Visibility) -> ToolObservation {
    observe_frames(manifest, &plan.frame_times(), plan.tokens_per_frame, vis)
}

/// The low-density overview of the whole video given with the question.
pub fn observe_overview(manifest: &VideoManifest, quota: &QuotaConfig, vis: Visibility) -> ToolObservation {
    let plan = quota.overview_plan(manifest.duration_s).expect("manifest duration is positive");
    let len = manifest.duration_s.millis();
    let times: Vec<Seconds> =
        (0..plan.frame_count).map(|i| Seconds::from_millis(len * i as i64 / plan.frame_count as i64)).collect();
    observe_frames(manifest, &times, plan.tokens_per_frame, vis)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CropResult {
    Ok { plan: SamplingPlan, observation: ToolObservation },
    RefusedBudget { remaining: u64 },
    InvalidDirective,
}

/// Plans, charges and observes in one step; the ledger is untouched unless
/// the result is `Ok`.
pub fn execute_crop(
    manifest: &VideoManifest,
    directive: &CropDirective,
    quota: &QuotaConfig,
    vis: Visibility,
    ledger: &mut BudgetLedger,
    turn: u32,
) -> CropResult {
    let Ok(plan) = compute_sampling_plan(directive, quota, manifest.duration_s) else {
        return CropResult::InvalidDirective;
    };
    match ledger.charge(turn, &plan) {
        ChargeOutcome::Charged => CropResult::Ok { plan, observation: observe_plan(manifest, &plan, vis) },
        ChargeOutcome::Refused { remaining } => CropResult::RefusedBudget { remaining },
    }
}
