//! Episode runner: drives a policy through the dialogue state machine against
//! a simulated video, scores the result and aggregates suite metrics.

use std::collections::{BTreeMap, VecDeque};
use std::time::Duration;

use num_bigint::BigInt;
use num_rational::BigRational;
use num_traits::{ToPrimitive, Zero};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::manifest::{Saliency, Sample, Tag, VideoManifest};
use crate::protocol::{
    render_message, Action, CropDirective, DialogueConfig, DialogueState, LimitPolicy, ParsedAction, ProtocolError,
    SamplingStrategy, Termination, TokenCounter, ToolObservation, ToolOutcome, Trajectory, WhitespaceCounter,
};
use crate::quota::{compute_sampling_plan, BudgetLedger, QuotaConfig, QuotaError};
use crate::reward::{score_trajectory, IntervalMeasures, OptionLetterMatcher, RewardBreakdown, RewardConfig, RewardError};
use crate::time::{Seconds, TimeInterval};
use crate::tool::{execute_crop, observe_overview, CropResult, Visibility};

pub const EVAL_TURN_LIMIT: u32 = 8;
pub const TRAIN_TURN_LIMIT: u32 = 6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("script exhausted after {0} steps")]
    ScriptExhausted(usize),
    #[error("remote policy: {0}")]
    Remote(String),
}

#[derive(Debug, Error)]
pub enum RolloutError {
    #[error("sample {sample} references manifest {wanted} but {given} was supplied")]
    ManifestMismatch { sample: String, wanted: String, given: String },
    #[error("unknown manifest {0}")]
    UnknownManifest(String),
    #[error("turn_limit must be >= 1")]
    ZeroTurnLimit,
    #[error("parallelism must be >= 1")]
    ZeroParallelism,
    #[error("{preds} predictions but {gts} ground truths")]
    LengthMismatch { preds: usize, gts: usize },
    #[error(transparent)]
    Quota(#[from] QuotaError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("thread pool: {0}")]
    Pool(String),
}

/// One executed crop as the policy sees it afterwards.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ObservedCrop {
    pub turn: u32,
    pub directive: CropDirective,
    pub observation: ToolObservation,
}

/// Everything a policy is shown before it writes its next message.
#[derive(Debug, Clone, Serialize)]
pub struct TurnView<'a> {
    pub sample_ref: &'a str,
    pub question: &'a str,
    pub options: Option<&'a [String]>,
    pub video_duration: Seconds,
    pub overview: &'a ToolObservation,
    pub observations: &'a [ObservedCrop],
    pub transcript: &'a [String],
    pub remaining_budget: u64,
    pub remaining_turns: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub system_message: Option<&'a str>,
}

pub trait EpisodePolicy: Send {
    fn respond(&mut self, view: &TurnView<'_>) -> Result<String, PolicyError>;
}

pub trait Policy: Send + Sync {
    fn start(&self, sample: &Sample, manifest: &VideoManifest, cfg: &EpisodeConfig, seed: u64) -> Box<dyn EpisodePolicy>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PolicySpec {
    Oracle,
    Random,
    Scripted { steps: Vec<String> },
    Remote { endpoint: String, #[serde(default = "default_timeout_ms")] timeout_ms: u64 },
}

fn default_timeout_ms() -> u64 {
    30_000
}

impl PolicySpec {
    pub fn build(&self) -> Box<dyn Policy> {
        match self {
            PolicySpec::Oracle => Box::new(OraclePolicy),
            PolicySpec::Random => Box::new(RandomPolicy),
            PolicySpec::Scripted { steps } => Box::new(ScriptedPolicy { steps: steps.clone() }),
            PolicySpec::Remote { endpoint, timeout_ms } => {
                Box::new(RemotePolicy { endpoint: endpoint.clone(), timeout: Duration::from_millis(*timeout_ms) })
            }
        }
    }
}

fn answer_message(think: &str, answer: &str) -> String {
    render_message(think, &ParsedAction::Answer(answer.to_string()))
}

fn crop_message(think: &str, d: CropDirective) -> String {
    render_message(think, &ParsedAction::Directive(d))
}

/// Knows the clue intervals and the answer. Crops every clue with the
/// cheapest granularity that makes it visible, then answers.
#[derive(Debug, Clone, Copy, Default)]
pub struct OraclePolicy;

struct OracleEpisode {
    targets: VecDeque<(TimeInterval, bool)>,
    answer: String,
    duration: Seconds,
    quota: QuotaConfig,
    visibility: Visibility,
}

impl Policy for OraclePolicy {
    fn start(&self, sample: &Sample, manifest: &VideoManifest, cfg: &EpisodeConfig, _seed: u64) -> Box<dyn EpisodePolicy> {
        let subtle = |clue: &TimeInterval| {
            manifest.events.iter().any(|e| e.saliency == Saliency::Subtle && e.interval.overlaps(clue))
        };
        let needs_tool = sample.tag == Tag::TrajectoryGuided || sample.clue_intervals.iter().any(subtle);
        let mut clues = sample.clue_intervals.clone();
        clues.sort();
        let targets = if needs_tool { clues.into_iter().map(|c| (c, subtle(&c))).collect() } else { VecDeque::new() };
        Box::new(OracleEpisode {
            targets,
            answer: sample.answer_key.clone(),
            duration: manifest.duration_s,
            quota: cfg.quota.clone(),
            visibility: cfg.visibility,
        })
    }
}

impl OracleEpisode {
    fn cheapest_visible(&self, clue: TimeInterval, subtle: bool, remaining: u64) -> Option<CropDirective> {
        let need = if subtle { self.visibility.subtle_min_tokens_per_frame } else { 1 };
        SamplingStrategy::ALL.iter().find_map(|g| {
            let d = CropDirective::new(clue, *g);
            let plan = compute_sampling_plan(&d, &self.quota, self.duration).ok()?;
            (plan.tokens_per_frame >= need && plan.total_tokens <= remaining).then_some(d)
        })
    }
}

impl EpisodePolicy for OracleEpisode {
    fn respond(&mut self, view: &TurnView<'_>) -> Result<String, PolicyError> {
        if view.system_message.is_none() {
            while let Some((clue, subtle)) = self.targets.pop_front() {
                if let Some(d) = self.cheapest_visible(clue, subtle, view.remaining_budget) {
                    return Ok(crop_message(&format!("look closely at {} to {}", clue.start, clue.end), d));
                }
            }
        }
        Ok(answer_message("the evidence is in view", &self.answer))
    }
}

/// A weak but legal baseline: random windows of 4 to 32 seconds at random
/// granularity, a random stopping point and a random option.
#[derive(Debug, Clone, Copy, Default)]
pub struct RandomPolicy;

struct RandomEpisode {
    rng: ChaCha8Rng,
    duration: i64,
    option_count: usize,
}

impl Policy for RandomPolicy {
    fn start(&self, sample: &Sample, manifest: &VideoManifest, _cfg: &EpisodeConfig, seed: u64) -> Box<dyn EpisodePolicy> {
        Box::new(RandomEpisode {
            rng: ChaCha8Rng::seed_from_u64(seed),
            duration: manifest.duration_s.millis(),
            option_count: sample.options.as_ref().map_or(0, Vec::len),
        })
    }
}

impl RandomEpisode {
    fn random_answer(&mut self) -> String {
        if self.option_count == 0 {
            return "unknown".to_string();
        }
        let k = self.rng.gen_range(0..self.option_count.min(26)) as u8;
        char::from(b'A' + k).to_string()
    }

    fn random_window(&mut self) -> TimeInterval {
        let len = self.rng.gen_range(4_000..=32_000).min(self.duration);
        let start = self.rng.gen_range(0..=self.duration - len);
        TimeInterval::from_millis(start, start + len).expect("window is non-empty")
    }
}

impl EpisodePolicy for RandomEpisode {
    fn respond(&mut self, view: &TurnView<'_>) -> Result<String, PolicyError> {
        if view.system_message.is_some() || self.rng.gen_bool(0.3) {
            let answer = self.random_answer();
            return Ok(answer_message("guessing", &answer));
        }
        if self.rng.gen_bool(0.05) {
            return Ok("```think\nnot sure what to do\n```".to_string());
        }
        let window = self.random_window();
        let g = SamplingStrategy::ALL[self.rng.gen_range(0..3)];
        Ok(crop_message("try somewhere", CropDirective::new(window, g)))
    }
}

/// Replays fixed assistant texts, one per turn, for every sample.
#[derive(Debug, Clone, Default)]
pub struct ScriptedPolicy {
    pub steps: Vec<String>,
}

struct ScriptedEpisode {
    steps: Vec<String>,
    next: usize,
}

impl Policy for ScriptedPolicy {
    fn start(&self, _: &Sample, _: &VideoManifest, _: &EpisodeConfig, _: u64) -> Box<dyn EpisodePolicy> {
        Box::new(ScriptedEpisode { steps: self.steps.clone(), next: 0 })
    }
}

impl EpisodePolicy for ScriptedEpisode {
    fn respond(&mut self, _: &TurnView<'_>) -> Result<String, PolicyError> {
        let step = self.steps.get(self.next).cloned().ok_or(PolicyError::ScriptExhausted(self.steps.len()))?;
        self.next += 1;
        Ok(step)
    }
}

/// Posts the turn view as JSON and expects `{"text": "..."}` back.
#[derive(Debug, Clone)]
pub struct RemotePolicy {
    pub endpoint: String,
    pub timeout: Duration,
}

struct RemoteEpisode {
    endpoint: String,
    client: Result<reqwest::blocking::Client, String>,
}

#[derive(Deserialize)]
struct RemoteReply {
    text: String,
}

impl Policy for RemotePolicy {
    fn start(&self, _: &Sample, _: &VideoManifest, _: &EpisodeConfig, _: u64) -> Box<dyn EpisodePolicy> {
        let client = reqwest::blocking::Client::builder().timeout(self.timeout).build().map_err(|e| e.to_string());
        Box::new(RemoteEpisode { endpoint: self.endpoint.clone(), client })
    }
}

impl EpisodePolicy for RemoteEpisode {
    fn respond(&mut self, view: &TurnView<'_>) -> Result<String, PolicyError> {
        let client = self.client.as_ref().map_err(|e| PolicyError::Remote(e.clone()))?;
        let reply: RemoteReply = client
            .post(&self.endpoint)
            .json(view)
            .send()
            .and_then(|r| r.error_for_status())
            .and_then(|r| r.json())
            .map_err(|e| PolicyError::Remote(e.to_string()))?;
        Ok(reply.text)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeConfig {
    pub turn_limit: u32,
    pub on_limit: LimitPolicy,
    pub quota: QuotaConfig,
    pub reward: RewardConfig,
    pub visibility: Visibility,
    pub seed: u64,
}

impl EpisodeConfig {
    /// Evaluation: 8 tool turns, then a forced answer.
    pub fn eval() -> Self {
        EpisodeConfig {
            turn_limit: EVAL_TURN_LIMIT,
            on_limit: LimitPolicy::ForceAnswer,
            quota: QuotaConfig::default(),
            reward: RewardConfig::default(),
            visibility: Visibility::default(),
            seed: 0,
        }
    }

    /// Training: 6 tool turns, anything beyond is over-turn.
    pub fn train() -> Self {
        EpisodeConfig { turn_limit: TRAIN_TURN_LIMIT, on_limit: LimitPolicy::Terminate, ..Self::eval() }
    }

    pub fn with_seed(self, seed: u64) -> Self {
        EpisodeConfig { seed, ..self }
    }

    pub fn validate(&self) -> Result<(), RolloutError> {
        if self.turn_limit == 0 {
            return Err(RolloutError::ZeroTurnLimit);
        }
        self.quota.validate()?;
        self.reward.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeResult {
    pub trajectory: Trajectory,
    pub reward: RewardBreakdown,
    pub budget_spent: u64,
    pub budget_cap: u64,
    pub budget_consistent: bool,
    /// Visual tokens plus whitespace-counted text tokens.
    pub context_tokens: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub policy_failure: Option<String>,
    /// Grounding pair for trajectory-guided samples.
    #[serde(skip)]
    pub grounding: Option<IntervalMeasures>,
}

impl EpisodeResult {
    pub fn budget_violated(&self) -> bool {
        !self.budget_consistent || self.budget_spent > self.budget_cap
    }
}

/// Per-episode seed derived from the run seed and the sample id.
pub fn episode_seed(seed: u64, sample_id: &str) -> u64 {
    let digest = Sha256::new().chain_update(seed.to_le_bytes()).chain_update(sample_id.as_bytes()).finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"))
}

pub fn run_episode(
    sample: &Sample,
    manifest: &VideoManifest,
    policy: &dyn Policy,
    cfg: &EpisodeConfig,
) -> Result<EpisodeResult, RolloutError> {
    cfg.validate()?;
    if sample.manifest_ref != manifest.id {
        return Err(RolloutError::ManifestMismatch {
            sample: sample.id.clone(),
            wanted: sample.manifest_ref.clone(),
            given: manifest.id.clone(),
        });
    }
    let counter = WhitespaceCounter;
    let mut episode = policy.start(sample, manifest, cfg, episode_seed(cfg.seed, &sample.id));
    let mut state =
        DialogueState::new(sample.id.clone(), DialogueConfig::new(cfg.turn_limit, cfg.on_limit, manifest.duration_s));
    let mut ledger = BudgetLedger::with_overview(&cfg.quota);
    let overview = observe_overview(manifest, &cfg.quota, cfg.visibility);
    let mut observations: Vec<ObservedCrop> = Vec::new();
    let mut transcript: Vec<String> = Vec::new();
    let mut policy_failure = None;

    let mut text_tokens = counter.count(&sample.question)
        + sample.options.iter().flatten().map(|o| counter.count(o)).sum::<u64>();

    while !state.is_terminal() {
        if let Some(d) = state.pending_directive().copied() {
            let turn = state.turns().len() as u32;
            let outcome = match execute_crop(manifest, &d, &cfg.quota, cfg.visibility, &mut ledger, turn) {
                CropResult::Ok { observation, .. } => {
                    observations.push(ObservedCrop { turn, directive: d, observation: observation.clone() });
                    ToolOutcome::Observed(observation)
                }
                CropResult::RefusedBudget { remaining } => ToolOutcome::Refused { remaining },
                CropResult::InvalidDirective => ToolOutcome::Refused { remaining: ledger.remaining() },
            };
            state.supply_observation(outcome)?;
            continue;
        }
        let system_message = state.forced_prompt().map(str::to_owned);
        if let Some(m) = &system_message {
            text_tokens += counter.count(m);
        }
        let view = TurnView {
            sample_ref: &sample.id,
            question: &sample.question,
            options: sample.options.as_deref(),
            video_duration: manifest.duration_s,
            overview: &overview,
            observations: &observations,
            transcript: &transcript,
            remaining_budget: ledger.remaining(),
            remaining_turns: state.remaining_turns(),
            system_message: system_message.as_deref(),
        };
        match episode.respond(&view) {
            Ok(text) => {
                text_tokens += counter.count(&text);
                state.advance(&text)?;
                transcript.push(text);
            }
            Err(e) => {
                policy_failure = Some(e.to_string());
                state.abort(Termination::OverTurn);
            }
        }
    }

    let trajectory = state.into_trajectory()?;
    let reward = score_trajectory(&trajectory, sample, &cfg.reward, &OptionLetterMatcher)?;
    let visual: u64 = overview.total_tokens + observations.iter().map(|o| o.observation.total_tokens).sum::<u64>();
    Ok(EpisodeResult {
        grounding: grounding_measure(&trajectory, sample),
        trajectory,
        reward,
        budget_spent: ledger.spent(),
        budget_cap: ledger.cap(),
        budget_consistent: ledger.is_consistent(),
        context_tokens: visual + text_tokens,
        policy_failure,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroundingMetrics {
    pub r_at: BTreeMap<String, f64>,
    pub miou: f64,
    pub pairs: usize,
    pub empty: bool,
}

/// Thresholds as exact tenths.
const THRESHOLDS: [(i64, &str); 3] = [(3, "0.3"), (5, "0.5"), (7, "0.7")];

fn grounding_from_measures(measures: &[IntervalMeasures]) -> GroundingMetrics {
    if measures.is_empty() {
        let r_at = THRESHOLDS.iter().map(|(_, k)| (k.to_string(), 0.0)).collect();
        return GroundingMetrics { r_at, miou: 0.0, pairs: 0, empty: true };
    }
    let n = measures.len();
    let ratio = |num: usize| num as f64 / n as f64;
    let r_at = THRESHOLDS
        .iter()
        .map(|(tenths, key)| {
            let hits = measures.iter().filter(|m| m.union > 0 && m.intersection * 10 >= tenths * m.union).count();
            (key.to_string(), ratio(hits))
        })
        .collect();
    let mut sum = BigRational::zero();
    for m in measures.iter().filter(|m| m.union > 0) {
        sum += BigRational::new(BigInt::from(m.intersection), BigInt::from(m.union));
    }
    let mean = sum / BigInt::from(n);
    GroundingMetrics { r_at, miou: mean.to_f64().unwrap_or(0.0), pairs: n, empty: false }
}

/// R@0.3/0.5/0.7 and mean IoU over paired intervals, computed exactly.
pub fn grounding_metrics(preds: &[TimeInterval], gts: &[TimeInterval]) -> Result<GroundingMetrics, RolloutError> {
    if preds.len() != gts.len() {
        return Err(RolloutError::LengthMismatch { preds: preds.len(), gts: gts.len() });
    }
    let measures: Vec<IntervalMeasures> =
        preds.iter().zip(gts).map(|(p, g)| IntervalMeasures::of(std::slice::from_ref(p), std::slice::from_ref(g))).collect();
    Ok(grounding_from_measures(&measures))
}

/// Grounding pair for a trajectory-guided episode: hull of the executed crops
/// against hull of the clue intervals. An episode without crops scores zero.
pub fn grounding_measure(trajectory: &Trajectory, sample: &Sample) -> Option<IntervalMeasures> {
    if sample.tag != Tag::TrajectoryGuided {
        return None;
    }
    let gt = TimeInterval::hull(&sample.clue_intervals)?;
    let pred: Vec<TimeInterval> = TimeInterval::hull(&trajectory.executed_segments()).into_iter().collect();
    Some(IntervalMeasures::of(&pred, &[gt]))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub episodes: usize,
    pub failed_episodes: usize,
    pub policy_failures: usize,
    pub accuracy: f64,
    pub r_at: BTreeMap<String, f64>,
    pub miou: f64,
    pub grounding_pairs: usize,
    pub grounding_empty: bool,
    pub mean_reward: f64,
    pub mean_turns: f64,
    pub budget_violations: usize,
    pub terminations: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpisodeFailure {
    pub sample_ref: String,
    pub error: String,
}

#[derive(Debug)]
pub struct SuiteRun {
    pub results: Vec<Result<EpisodeResult, EpisodeFailure>>,
    pub report: MetricsReport,
}

fn termination_name(t: Termination) -> &'static str {
    match t {
        Termination::Answered => "answered",
        Termination::ForcedAnswer => "forced_answer",
        Termination::OverTurn => "over_turn",
        Termination::OverBudget => "over_budget",
    }
}

/// Folds per-episode results in order.
pub fn aggregate(results: &[Result<EpisodeResult, EpisodeFailure>]) -> MetricsReport {
    let ok: Vec<&EpisodeResult> = results.iter().filter_map(|r| r.as_ref().ok()).collect();
    let n = ok.len();
    let mean = |sum: f64| if n == 0 { 0.0 } else { sum / n as f64 };
    let correct: usize = ok.iter().map(|r| usize::from(r.reward.r_a)).sum();
    let turns: usize = ok.iter().map(|r| r.trajectory.turns.len()).sum();
    let reward_sum: f64 = ok.iter().map(|r| r.reward.total).sum();
    let measures: Vec<IntervalMeasures> = ok.iter().filter_map(|r| r.grounding).collect();
    let grounding = grounding_from_measures(&measures);
    let mut terminations = BTreeMap::new();
    for r in &ok {
        *terminations.entry(termination_name(r.trajectory.termination).to_string()).or_insert(0) += 1;
    }
    MetricsReport {
        episodes: n,
        failed_episodes: results.len() - n,
        policy_failures: ok.iter().filter(|r| r.policy_failure.is_some()).count(),
        accuracy: mean(correct as f64),
        r_at: grounding.r_at,
        miou: grounding.miou,
        grounding_pairs: grounding.pairs,
        grounding_empty: grounding.empty,
        mean_reward: mean(reward_sum),
        mean_turns: mean(turns as f64),
        budget_violations: ok.iter().filter(|r| r.budget_violated()).count(),
        terminations,
    }
}

/// Rebuilds an episode result from a recorded trajectory. The budget is
/// reconstructed as the overview charge plus every observation's tokens.
pub fn replay(trajectory: Trajectory, sample: &Sample, cfg: &EpisodeConfig) -> Result<EpisodeResult, RolloutError> {
    let reward = score_trajectory(&trajectory, sample, &cfg.reward, &OptionLetterMatcher)?;
    let observed: u64 = trajectory.turns.iter().filter_map(|t| t.observation.as_ref()).map(|o| o.total_tokens).sum();
    let counter = WhitespaceCounter;
    let text: u64 = counter.count(&sample.question)
        + trajectory
            .turns
            .iter()
            .map(|t| {
                counter.count(&t.think_text)
                    + match &t.action {
                        Action::Answer(a) => counter.count(a),
                        Action::Directive(d) => counter.count(&d.to_block_body()),
                        Action::Malformed { .. } => 0,
                    }
            })
            .sum::<u64>();
    let spent = cfg.quota.overview_quota + observed;
    Ok(EpisodeResult {
        grounding: grounding_measure(&trajectory, sample),
        trajectory,
        reward,
        budget_spent: spent,
        budget_cap: cfg.quota.max_visual_budget,
        budget_consistent: true,
        context_tokens: spent + text,
        policy_failure: None,
    })
}

/// Scores recorded trajectories against their samples, matched by id.
pub fn evaluate(trajectories: Vec<Trajectory>, samples: &[Sample], cfg: &EpisodeConfig) -> SuiteRun {
    let by_id: BTreeMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let results: Vec<Result<EpisodeResult, EpisodeFailure>> = trajectories
        .into_iter()
        .map(|t| {
            let sample_ref = t.sample_ref.clone();
            let fail = |error: String| EpisodeFailure { sample_ref: sample_ref.clone(), error };
            match by_id.get(sample_ref.as_str()) {
                None => Err(fail(format!("unknown sample {sample_ref}"))),
                Some(s) => replay(t, s, cfg).map_err(|e| fail(e.to_string())),
            }
        })
        .collect();
    let report = aggregate(&results);
    SuiteRun { results, report }
}

/// Runs every sample on a pool of `parallelism` threads. Per-episode errors
/// are reported in place and counted, never propagated.
pub fn run_suite(
    samples: &[Sample],
    manifests: &BTreeMap<String, VideoManifest>,
    policy: &dyn Policy,
    cfg: &EpisodeConfig,
    parallelism: usize,
) -> Result<SuiteRun, RolloutError> {
    if parallelism == 0 {
        return Err(RolloutError::ZeroParallelism);
    }
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(parallelism)
        .build()
        .map_err(|e| RolloutError::Pool(e.to_string()))?;
    let results: Vec<Result<EpisodeResult, EpisodeFailure>> = pool.install(|| {
        samples
            .par_iter()
            .map(|sample| {
                let outcome = match manifests.get(&sample.manifest_ref) {
                    Some(m) => run_episode(sample, m, policy, cfg),
                    None => Err(RolloutError::UnknownManifest(sample.manifest_ref.clone())),
                };
                outcome.map_err(|e| EpisodeFailure { sample_ref: sample.id.clone(), error: e.to_string() })
            })
            .collect()
    });
    let report = aggregate(&results);
    Ok(SuiteRun { results, report })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::{generate_synthetic, parse_manifest, TaskType, TaxonomyProfile};
    use crate::protocol::FormatIssue;

    fn iv(s: f64, e: f64) -> TimeInterval {
        TimeInterval::from_secs(s, e).unwrap()
    }

    fn fixture() -> (VideoManifest, Sample) {
        let m = parse_manifest(
            r#"{"id":"v1","duration_s":120,"events":[
            {"id":"e1","interval":{"start":30,"end":34},"label":"badge","saliency":"subtle","payload":"badge reads B"}]}"#,
        )
        .unwrap();
        let s = Sample {
            id: "s1".into(),
            manifest_ref: "v1".into(),
            question: "What does the badge say?".into(),
            options: Some(vec!["A. a".into(), "B. b".into(), "C. c".into(), "D. d".into()]),
            answer_key: "B".into(),
            clue_intervals: vec![iv(30.0, 34.0)],
            tag: Tag::TrajectoryGuided,
            k_ref: 1,
            task_type: TaskType::SingleClueTool,
        };
        (m, s)
    }

    #[test]
    fn oracle_crops_the_clue_and_scores_three() {
        let (m, s) = fixture();
        let r = run_episode(&s, &m, &OraclePolicy, &EpisodeConfig::eval()).unwrap();
        let t = &r.trajectory;
        assert_eq!(t.turns.len(), 2);
        assert_eq!(t.executed_segments(), vec![iv(30.0, 34.0)]);
        assert_eq!(t.turns[0].observation.as_ref().unwrap().payloads(), vec!["badge reads B"]);
        assert_eq!(t.termination, Termination::Answered);
        assert_eq!(r.reward.total, 3.0);
        assert_eq!(r.budget_spent, 16384 + 2048);
    }

    #[test]
    fn scripted_direct_answer() {
        let (m, mut s) = fixture();
        s.tag = Tag::Free;
        s.k_ref = 0;
        let p = ScriptedPolicy { steps: vec![answer_message("easy", "B")] };
        let r = run_episode(&s, &m, &p, &EpisodeConfig::eval()).unwrap();
        assert_eq!(r.trajectory.turns.len(), 1);
        assert_eq!(r.trajectory.tool_call_count, 0);
        assert_eq!(r.reward.s_clue, 0.5);
        assert_eq!(r.reward.total, 2.75);
    }

    #[test]
    fn forced_answer_after_turn_eight() {
        let (m, s) = fixture();
        let crop = crop_message("more", CropDirective::new(iv(0.0, 4.0), SamplingStrategy::Coarse));
        let mut steps = vec![crop; 9];
        steps.push(answer_message("fine", "B"));
        let mut cfg = EpisodeConfig::eval();
        cfg.quota.max_visual_budget = 1 << 20;
        let r = run_episode(&s, &m, &ScriptedPolicy { steps }, &cfg).unwrap();
        let t = &r.trajectory;
        assert_eq!(t.forced_after_turn, Some(8));
        assert_eq!(t.tool_call_count, 8);
        assert_eq!(t.turns.len(), 9);
        assert_eq!(t.termination, Termination::ForcedAnswer);
    }

    #[test]
    fn script_exhaustion_is_over_turn() {
        let (m, s) = fixture();
        let crop = crop_message("more", CropDirective::new(iv(30.0, 34.0), SamplingStrategy::Coarse));
        let r = run_episode(&s, &m, &ScriptedPolicy { steps: vec![crop] }, &EpisodeConfig::eval()).unwrap();
        assert_eq!(r.trajectory.termination, Termination::OverTurn);
        assert_eq!(r.reward.r_a, 0);
        assert!(r.policy_failure.unwrap().contains("exhausted"));
    }

    #[test]
    fn budget_refusal_forces_answer() {
        let (m, s) = fixture();
        let fine = crop_message("all of it", CropDirective::new(iv(0.0, 120.0), SamplingStrategy::Fine));
        let steps = vec![fine.clone(), fine.clone(), fine, answer_message("x", "B")];
        let r = run_episode(&s, &m, &ScriptedPolicy { steps }, &EpisodeConfig::eval()).unwrap();
        assert_eq!(r.trajectory.termination, Termination::ForcedAnswer);
        assert_eq!(r.trajectory.tool_call_count, 2);
        assert!(r.budget_spent <= r.budget_cap);
    }

    #[test]
    fn malformed_turns_are_recorded() {
        let (m, s) = fixture();
        let steps = vec!["no blocks here".to_string(), answer_message("x", "B")];
        let r = run_episode(&s, &m, &ScriptedPolicy { steps }, &EpisodeConfig::eval()).unwrap();
        assert!(matches!(r.trajectory.turns[0].action, Action::Malformed { reason: FormatIssue::NoActionBlock, .. }));
        assert_eq!(r.reward.r_f, 0.5);
    }

    #[test]
    fn grounding_examples() {
        let g = grounding_metrics(&[iv(4.0, 8.0), iv(2.0, 6.0)], &[iv(4.0, 8.0), iv(4.0, 8.0)]).unwrap();
        assert_eq!(g.miou, 2.0 / 3.0);
        assert_eq!(g.r_at["0.3"], 1.0);
        assert_eq!(g.r_at["0.5"], 0.5);
        assert_eq!(g.r_at["0.7"], 0.5);
        let e = grounding_metrics(&[], &[]).unwrap();
        assert!(e.empty);
        assert_eq!(e.miou, 0.0);
        assert!(grounding_metrics(&[iv(0.0, 1.0)], &[]).is_err());
    }

    #[test]
    fn suite_is_parallelism_independent() {
        let (m, samples) = generate_synthetic(3, &TaxonomyProfile::uniform(40));
        let manifests = BTreeMap::from([(m.id.clone(), m)]);
        let cfg = EpisodeConfig::eval().with_seed(11);
        let a = run_suite(&samples, &manifests, &RandomPolicy, &cfg, 1).unwrap();
        let b = run_suite(&samples, &manifests, &RandomPolicy, &cfg, 8).unwrap();
        assert_eq!(a.report, b.report);
        assert_eq!(a.report.budget_violations, 0);
        let ta: Vec<_> = a.results.iter().map(|r| r.as_ref().unwrap().trajectory.clone()).collect();
        let tb: Vec<_> = b.results.iter().map(|r| r.as_ref().unwrap().trajectory.clone()).collect();
        assert_eq!(ta, tb);
    }

    #[test]
    fn missing_manifest_is_counted() {
        let (_, s) = fixture();
        let run = run_suite(&[s], &BTreeMap::new(), &OraclePolicy, &EpisodeConfig::eval(), 2).unwrap();
        assert_eq!(run.report.failed_episodes, 1);
        assert_eq!(run.report.episodes, 0);
    }
}
