//! Multi-turn interaction protocol: message parsing, the dialogue state
//! machine, turn limits, forced answers, and trajectory documents.
//!
//! Assistant messages are made of fenced blocks tagged `think`, `tool_call`
//! or `answer`:
//!
//! ````text
//! ```think
//! The badge is too small in the overview.
//! ```
//! ```tool_call
//! {"temporal_segment": [12.0, 20.0], "sampling_strategy": "fine"}
//! ```
//! ````
//!
//! A message is format-valid iff it holds exactly one `think` block followed
//! by exactly one action block whose content parses and is in range.

use std::fmt;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::{as_pair, Seconds, TimeInterval};

pub const THINK_TAG: &str = "think";
pub const TOOL_CALL_TAG: &str = "tool_call";
pub const ANSWER_TAG: &str = "answer";

pub const DEFAULT_FORCED_ANSWER_PROMPT: &str = "You have used every allowed tool call. Do not request more video. \
Combine everything observed so far and reply with your final answer in an answer block.";
pub const DEFAULT_BUDGET_EXHAUSTED_PROMPT: &str = "The visual token budget is exhausted and the last crop was not \
executed. Combine everything observed so far and reply with your final answer in an answer block.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Phase {
    Tool,
    Answer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    Coarse,
    Medium,
    Fine,
}

impl SamplingStrategy {
    pub const ALL: [SamplingStrategy; 3] = [SamplingStrategy::Coarse, SamplingStrategy::Medium, SamplingStrategy::Fine];

    pub fn as_str(self) -> &'static str {
        match self {
            SamplingStrategy::Coarse => "coarse",
            SamplingStrategy::Medium => "medium",
            SamplingStrategy::Fine => "fine",
        }
    }
}

impl std::str::FromStr for SamplingStrategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "coarse" => Ok(SamplingStrategy::Coarse),
            "medium" => Ok(SamplingStrategy::Medium),
            "fine" => Ok(SamplingStrategy::Fine),
            other => Err(format!("unknown sampling strategy {other:?}")),
        }
    }
}

/// One VideoCrop call: the window to inspect and its token granularity.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropDirective {
    #[serde(with = "as_pair")]
    pub temporal_segment: TimeInterval,
    pub sampling_strategy: SamplingStrategy,
}

impl CropDirective {
    pub fn new(segment: TimeInterval, strategy: SamplingStrategy) -> Self {
        CropDirective { temporal_segment: segment, sampling_strategy: strategy }
    }

    /// Renders the directive as a `tool_call` block body.
    pub fn to_block_body(&self) -> String {
        serde_json::to_string(self).expect("directive serializes")
    }
}

/// Reason codes for format-invalid or malformed assistant messages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FormatIssue {
    NoActionBlock,
    UnterminatedBlock,
    AmbiguousAction,
    DuplicateAction,
    BadDirective,
    InvalidSegment,
    EmptyAnswer,
    MissingThink,
    DuplicateThink,
    ThinkAfterAction,
    OutOfRange,
    NotAnAnswer,
}

impl FormatIssue {
    /// Issues that leave no executable action behind.
    pub fn is_malformed(self) -> bool {
        matches!(
            self,
            FormatIssue::NoActionBlock
                | FormatIssue::UnterminatedBlock
                | FormatIssue::AmbiguousAction
                | FormatIssue::DuplicateAction
                | FormatIssue::BadDirective
                | FormatIssue::InvalidSegment
                | FormatIssue::EmptyAnswer
        )
    }
}

impl fmt::Display for FormatIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParsedAction {
    Directive(CropDirective),
    Answer(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedMessage {
    pub phase: Phase,
    pub think_text: String,
    /// `None` when the message is malformed; `issue` then says why.
    pub action: Option<ParsedAction>,
    pub issue: Option<FormatIssue>,
}

impl ParsedMessage {
    pub fn format_valid(&self) -> bool {
        self.issue.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed assistant message ({reason}), phase {phase:?}")]
pub struct Malformed {
    pub phase: Phase,
    pub reason: FormatIssue,
}

struct Block<'a> {
    tag: &'a str,
    body: String,
}

fn scan_blocks(text: &str) -> (Vec<Block<'_>>, bool) {
    let mut blocks = Vec::new();
    let mut open: Option<(&str, Vec<&str>)> = None;
    for line in text.lines() {
        let trimmed = line.trim();
        match open.take() {
            None => {
                if let Some(rest) = trimmed.strip_prefix("```") {
                    let tag = rest.trim();
                    if !tag.is_empty() && tag.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-') {
                        open = Some((tag, Vec::new()));
                    }
                }
            }
            Some((tag, mut lines)) => {
                if trimmed == "```" {
                    blocks.push(Block { tag, body: lines.join("\n") });
                } else {
                    lines.push(line);
                    open = Some((tag, lines));
                }
            }
        }
    }
    (blocks, open.is_some())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDirective {
    temporal_segment: (Seconds, Seconds),
    sampling_strategy: SamplingStrategy,
}

fn parse_directive(body: &str) -> Result<CropDirective, FormatIssue> {
    let raw: RawDirective = serde_json::from_str(body.trim()).map_err(|_| FormatIssue::BadDirective)?;
    let (start, end) = raw.temporal_segment;
    let segment = TimeInterval::new(start, end).map_err(|_| FormatIssue::InvalidSegment)?;
    Ok(CropDirective { temporal_segment: segment, sampling_strategy: raw.sampling_strategy })
}

/// Classifies one assistant message. Every message gets exactly one phase.
pub fn parse_assistant_message(text: &str) -> ParsedMessage {
    let (blocks, unterminated) = scan_blocks(text);
    let actions: Vec<(usize, &Block)> =
        blocks.iter().enumerate().filter(|(_, b)| b.tag == TOOL_CALL_TAG || b.tag == ANSWER_TAG).collect();
    let thinks: Vec<(usize, &Block)> = blocks.iter().enumerate().filter(|(_, b)| b.tag == THINK_TAG).collect();
    let think_text = thinks.first().map(|(_, b)| b.body.trim().to_string()).unwrap_or_default();
    let any_tool = actions.iter().any(|(_, b)| b.tag == TOOL_CALL_TAG);
    let phase = if any_tool { Phase::Tool } else { Phase::Answer };

    let malformed = |issue| ParsedMessage { phase, think_text: think_text.clone(), action: None, issue: Some(issue) };
    let (action_pos, action_block) = match actions.as_slice() {
        [] if unterminated => return malformed(FormatIssue::UnterminatedBlock),
        [] => return malformed(FormatIssue::NoActionBlock),
        [single] => *single,
        many => {
            let any_answer = many.iter().any(|(_, b)| b.tag == ANSWER_TAG);
            let issue = if any_tool && any_answer { FormatIssue::AmbiguousAction } else { FormatIssue::DuplicateAction };
            return malformed(issue);
        }
    };
    let action = if action_block.tag == TOOL_CALL_TAG {
        match parse_directive(&action_block.body) {
            Ok(d) => ParsedAction::Directive(d),
            Err(issue) => return malformed(issue),
        }
    } else {
        let answer = action_block.body.trim();
        if answer.is_empty() {
            return malformed(FormatIssue::EmptyAnswer);
        }
        ParsedAction::Answer(answer.to_string())
    };
    let issue = match thinks.as_slice() {
        [] => Some(FormatIssue::MissingThink),
        [(pos, _)] if *pos > action_pos => Some(FormatIssue::ThinkAfterAction),
        [_] => None,
        _ => Some(FormatIssue::DuplicateThink),
    };
    ParsedMessage { phase, think_text, action: Some(action), issue }
}

/// Strict variant: errors when no action could be extracted.
pub fn try_parse_assistant_message(text: &str) -> Result<ParsedMessage, Malformed> {
    let parsed = parse_assistant_message(text);
    match (parsed.action.is_some(), parsed.issue) {
        (false, Some(reason)) => Err(Malformed { phase: parsed.phase, reason }),
        _ => Ok(parsed),
    }
}

/// Formats a well-formed assistant message.
pub fn render_message(think: &str, action: &ParsedAction) -> String {
    let (tag, body) = match action {
        ParsedAction::Directive(d) => (TOOL_CALL_TAG, d.to_block_body()),
        ParsedAction::Answer(a) => (ANSWER_TAG, a.clone()),
    };
    format!("```{THINK_TAG}\n{think}\n```\n```{tag}\n{body}\n```\n")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameObservation {
    pub timestamp: Seconds,
    pub tokens: u64,
    pub event_payloads: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolObservation {
    pub frames: Vec<FrameObservation>,
    pub total_tokens: u64,
}

impl ToolObservation {
    pub fn new(frames: Vec<FrameObservation>) -> Self {
        let total_tokens = frames.iter().map(|f| f.tokens).sum();
        ToolObservation { frames, total_tokens }
    }

    /// Distinct payloads in first-seen order.
    pub fn payloads(&self) -> Vec<&str> {
        let mut out: Vec<&str> = Vec::new();
        for p in self.frames.iter().flat_map(|f| f.event_payloads.iter()) {
            if !out.contains(&p.as_str()) {
                out.push(p);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Directive(CropDirective),
    Answer(String),
    /// Nothing executable could be extracted from the message.
    Malformed { phase: Phase, reason: FormatIssue },
}

impl Action {
    pub fn phase(&self) -> Phase {
        match self {
            Action::Directive(_) => Phase::Tool,
            Action::Answer(_) => Phase::Answer,
            Action::Malformed { phase, .. } => *phase,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub index: u32,
    pub think_text: String,
    pub action: Action,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub observation: Option<ToolObservation>,
    pub format_valid: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format_issue: Option<FormatIssue>,
    /// The directive's end was clipped to the video duration.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub clamped: bool,
}

impl Turn {
    pub fn executed_directive(&self) -> Option<&CropDirective> {
        match (&self.action, &self.observation) {
            (Action::Directive(d), Some(_)) => Some(d),
            _ => None,
        }
    }

    pub fn answer(&self) -> Option<&str> {
        match &self.action {
            Action::Answer(a) => Some(a),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Termination {
    Answered,
    ForcedAnswer,
    OverTurn,
    OverBudget,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Trajectory {
    pub sample_ref: String,
    pub turns: Vec<Turn>,
    pub termination: Termination,
    /// Executed tool invocations (k_t).
    pub tool_call_count: u32,
    /// Turn after which the forced-answer prompt was injected, if ever.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub forced_after_turn: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TrajectoryIssue {
    Json,
    InconsistentCount,
    BadTurnIndex,
    AnswerNotTerminal,
    TerminationMismatch,
    ObservationMismatch,
    TokenSumMismatch,
}

impl fmt::Display for TrajectoryIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed trajectory ({reason}): {detail}")]
pub struct TrajectoryError {
    pub reason: TrajectoryIssue,
    pub detail: String,
}

impl TrajectoryError {
    fn new(reason: TrajectoryIssue, detail: impl Into<String>) -> Self {
        TrajectoryError { reason, detail: detail.into() }
    }
}

impl Trajectory {
    pub fn count_tool_calls(turns: &[Turn]) -> u32 {
        turns.iter().filter(|t| t.executed_directive().is_some()).count() as u32
    }

    pub fn final_answer(&self) -> Option<&str> {
        self.turns.last().and_then(Turn::answer)
    }

    pub fn executed_segments(&self) -> Vec<TimeInterval> {
        self.turns.iter().filter_map(|t| t.executed_directive().map(|d| d.temporal_segment)).collect()
    }

    pub fn validate(&self) -> Result<(), TrajectoryError> {
        use TrajectoryIssue::*;
        for (pos, turn) in self.turns.iter().enumerate() {
            if turn.index as usize != pos + 1 {
                return Err(TrajectoryError::new(BadTurnIndex, format!("turn at position {} has index {}", pos + 1, turn.index)));
            }
            if turn.answer().is_some() && pos + 1 != self.turns.len() {
                return Err(TrajectoryError::new(AnswerNotTerminal, format!("answer at turn {} is followed by more turns", turn.index)));
            }
            if turn.observation.is_some() && !matches!(turn.action, Action::Directive(_)) {
                return Err(TrajectoryError::new(ObservationMismatch, format!("turn {} has an observation but no directive", turn.index)));
            }
            if let Some(obs) = &turn.observation {
                let sum: u64 = obs.frames.iter().map(|f| f.tokens).sum();
                if sum != obs.total_tokens {
                    return Err(TrajectoryError::new(TokenSumMismatch, format!("turn {}: frames sum to {sum}, total_tokens {}", turn.index, obs.total_tokens)));
                }
            }
        }
        let counted = Self::count_tool_calls(&self.turns);
        if counted != self.tool_call_count {
            return Err(TrajectoryError::new(InconsistentCount, format!("tool_call_count {} but {counted} executed directives", self.tool_call_count)));
        }
        let ends_with_answer = self.turns.last().is_some_and(|t| t.answer().is_some());
        let consistent = match self.termination {
            Termination::Answered | Termination::ForcedAnswer => ends_with_answer,
            Termination::OverTurn | Termination::OverBudget => !ends_with_answer || self.turns.is_empty(),
        };
        if !consistent {
            return Err(TrajectoryError::new(TerminationMismatch, format!("termination {:?} does not match the final turn", self.termination)));
        }
        Ok(())
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrajectory {
    sample_ref: String,
    turns: Vec<Turn>,
    termination: Termination,
    #[serde(default)]
    tool_call_count: Option<u32>,
    #[serde(default)]
    forced_after_turn: Option<u32>,
}

impl RawTrajectory {
    fn into_trajectory(self) -> Result<Trajectory, TrajectoryError> {
        let tool_call_count = self.tool_call_count.unwrap_or_else(|| Trajectory::count_tool_calls(&self.turns));
        let t = Trajectory {
            sample_ref: self.sample_ref,
            turns: self.turns,
            termination: self.termination,
            tool_call_count,
            forced_after_turn: self.forced_after_turn,
        };
        t.validate()?;
        Ok(t)
    }
}

impl<'de> Deserialize<'de> for Trajectory {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        RawTrajectory::deserialize(deserializer)?.into_trajectory().map_err(serde::de::Error::custom)
    }
}

pub fn serialize_trajectory(t: &Trajectory) -> String {
    serde_json::to_string(t).expect("trajectory serializes")
}

/// Parses one trajectory document. A missing `tool_call_count` is recomputed.
pub fn parse_trajectory(doc: &str) -> Result<Trajectory, TrajectoryError> {
    let raw: RawTrajectory =
        serde_json::from_str(doc).map_err(|e| TrajectoryError::new(TrajectoryIssue::Json, e.to_string()))?;
    raw.into_trajectory()
}

/// Validates a JSON-lines trajectory stream, stopping at the first bad line.
pub fn validate_trajectory_lines(reader: impl BufRead) -> Result<usize, (usize, TrajectoryError)> {
    let mut count = 0;
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| (idx + 1, TrajectoryError::new(TrajectoryIssue::Json, e.to_string())))?;
        if line.trim().is_empty() {
            continue;
        }
        parse_trajectory(&line).map_err(|e| (idx + 1, e))?;
        count += 1;
    }
    Ok(count)
}

/// What happens when the assistant tries to go past the turn limit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LimitPolicy {
    /// Inject the forced-answer prompt and accept only an answer next.
    ForceAnswer,
    /// End the dialogue as `OverTurn`.
    Terminate,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueConfig {
    pub turn_limit: u32,
    pub on_limit: LimitPolicy,
    pub video_duration: Seconds,
    pub forced_answer_prompt: String,
    pub budget_exhausted_prompt: String,
}

impl DialogueConfig {
    pub fn new(turn_limit: u32, on_limit: LimitPolicy, video_duration: Seconds) -> Self {
        DialogueConfig {
            turn_limit,
            on_limit,
            video_duration,
            forced_answer_prompt: DEFAULT_FORCED_ANSWER_PROMPT.to_string(),
            budget_exhausted_prompt: DEFAULT_BUDGET_EXHAUSTED_PROMPT.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForceReason {
    TurnLimit,
    Budget,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DialogueMode {
    AwaitingAssistant,
    AwaitingObservation(CropDirective),
    ForcedAnswer(ForceReason),
    Terminal(Termination),
}

/// Outcome of executing a pending directive.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ToolOutcome {
    Observed(ToolObservation),
    Refused { remaining: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("dialogue already terminated")]
    AdvanceAfterTerminal,
    #[error("a tool observation must be supplied before the next assistant message")]
    ObservationPending,
    #[error("no directive is awaiting an observation")]
    NoPendingDirective,
    #[error("dialogue has not terminated")]
    NotTerminal,
}

/// Single-owner state of one dialogue.
#[derive(Debug, Clone)]
pub struct DialogueState {
    cfg: DialogueConfig,
    sample_ref: String,
    turns: Vec<Turn>,
    mode: DialogueMode,
    forced_after_turn: Option<u32>,
}

impl DialogueState {
    pub fn new(sample_ref: impl Into<String>, cfg: DialogueConfig) -> Self {
        DialogueState {
            cfg,
            sample_ref: sample_ref.into(),
            turns: Vec::new(),
            mode: DialogueMode::AwaitingAssistant,
            forced_after_turn: None,
        }
    }

    pub fn mode(&self) -> &DialogueMode {
        &self.mode
    }

    pub fn turns(&self) -> &[Turn] {
        &self.turns
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.mode, DialogueMode::Terminal(_))
    }

    pub fn pending_directive(&self) -> Option<&CropDirective> {
        match &self.mode {
            DialogueMode::AwaitingObservation(d) => Some(d),
            _ => None,
        }
    }

    /// The system message to inject, while in forced-answer mode.
    pub fn forced_prompt(&self) -> Option<&str> {
        match self.mode {
            DialogueMode::ForcedAnswer(ForceReason::TurnLimit) => Some(&self.cfg.forced_answer_prompt),
            DialogueMode::ForcedAnswer(ForceReason::Budget) => Some(&self.cfg.budget_exhausted_prompt),
            _ => None,
        }
    }

    pub fn remaining_turns(&self) -> u32 {
        match self.mode {
            DialogueMode::Terminal(_) => 0,
            DialogueMode::ForcedAnswer(_) => 1,
            _ => (self.cfg.turn_limit + 1).saturating_sub(self.turns.len() as u32),
        }
    }

    fn push(&mut self, parsed: ParsedMessage, action: Action, issue: Option<FormatIssue>, clamped: bool) {
        let index = self.turns.len() as u32 + 1;
        self.turns.push(Turn {
            index,
            think_text: parsed.think_text,
            action,
            observation: None,
            format_valid: issue.is_none(),
            format_issue: issue,
            clamped,
        });
    }

    /// Feeds one assistant message into the dialogue.
    pub fn advance(&mut self, assistant_text: &str) -> Result<&DialogueMode, ProtocolError> {
        let forced = match self.mode {
            DialogueMode::Terminal(_) => return Err(ProtocolError::AdvanceAfterTerminal),
            DialogueMode::AwaitingObservation(_) => return Err(ProtocolError::ObservationPending),
            DialogueMode::ForcedAnswer(reason) => Some(reason),
            DialogueMode::AwaitingAssistant => None,
        };
        let parsed = parse_assistant_message(assistant_text);
        let index = self.turns.len() as u32 + 1;

        if let Some(reason) = forced {
            let issue = parsed.issue;
            match parsed.action.clone() {
                Some(ParsedAction::Answer(a)) => {
                    self.push(parsed, Action::Answer(a), issue, false);
                    self.mode = DialogueMode::Terminal(Termination::ForcedAnswer);
                }
                other => {
                    let action = match other {
                        Some(ParsedAction::Directive(d)) => Action::Directive(d),
                        _ => Action::Malformed { phase: parsed.phase, reason: issue.unwrap_or(FormatIssue::NotAnAnswer) },
                    };
                    self.push(parsed, action, Some(issue.unwrap_or(FormatIssue::NotAnAnswer)), false);
                    let termination = match reason {
                        ForceReason::TurnLimit => Termination::OverTurn,
                        ForceReason::Budget => Termination::OverBudget,
                    };
                    self.mode = DialogueMode::Terminal(termination);
                }
            }
            return Ok(&self.mode);
        }

        if let Some(ParsedAction::Answer(a)) = &parsed.action {
            let (a, issue) = (a.clone(), parsed.issue);
            self.push(parsed, Action::Answer(a), issue, false);
            self.mode = DialogueMode::Terminal(Termination::Answered);
            return Ok(&self.mode);
        }

        if index > self.cfg.turn_limit {
            // Over-limit attempts are not recorded as turns.
            self.mode = match self.cfg.on_limit {
                LimitPolicy::ForceAnswer => {
                    self.forced_after_turn = Some(index - 1);
                    DialogueMode::ForcedAnswer(ForceReason::TurnLimit)
                }
                LimitPolicy::Terminate => DialogueMode::Terminal(Termination::OverTurn),
            };
            return Ok(&self.mode);
        }

        match parsed.action.clone() {
            Some(ParsedAction::Directive(d)) => match d.temporal_segment.clamp_to(self.cfg.video_duration) {
                Some(segment) => {
                    let clamped = segment != d.temporal_segment;
                    let executed = CropDirective::new(segment, d.sampling_strategy);
                    let issue = parsed.issue;
                    self.push(parsed, Action::Directive(executed), issue, clamped);
                    self.mode = DialogueMode::AwaitingObservation(executed);
                }
                None => {
                    self.push(parsed, Action::Directive(d), Some(FormatIssue::OutOfRange), false);
                }
            },
            _ => {
                let reason = parsed.issue.unwrap_or(FormatIssue::NoActionBlock);
                let phase = parsed.phase;
                self.push(parsed, Action::Malformed { phase, reason }, Some(reason), false);
            }
        }
        Ok(&self.mode)
    }

    /// Completes the pending directive with the tool's outcome.
    pub fn supply_observation(&mut self, outcome: ToolOutcome) -> Result<&DialogueMode, ProtocolError> {
        if !matches!(self.mode, DialogueMode::AwaitingObservation(_)) {
            return Err(ProtocolError::NoPendingDirective);
        }
        match outcome {
            ToolOutcome::Observed(obs) => {
                self.turns.last_mut().expect("pending directive has a turn").observation = Some(obs);
                self.mode = DialogueMode::AwaitingAssistant;
            }
            ToolOutcome::Refused { .. } => {
                self.forced_after_turn = Some(self.turns.len() as u32);
                self.mode = DialogueMode::ForcedAnswer(ForceReason::Budget);
            }
        }
        Ok(&self.mode)
    }

    /// Ends a live dialogue from outside, e.g. when the policy fails.
    pub fn abort(&mut self, termination: Termination) {
        if !self.is_terminal() {
            self.mode = DialogueMode::Terminal(termination);
        }
    }

    pub fn into_trajectory(self) -> Result<Trajectory, ProtocolError> {
        let DialogueMode::Terminal(termination) = self.mode else {
            return Err(ProtocolError::NotTerminal);
        };
        let tool_call_count = Trajectory::count_tool_calls(&self.turns);
        Ok(Trajectory {
            sample_ref: self.sample_ref,
            turns: self.turns,
            termination,
            tool_call_count,
            forced_after_turn: self.forced_after_turn,
        })
    }
}

/// Counts text tokens in assistant and prompt text.
pub trait TokenCounter: Send + Sync {
    fn count(&self, text: &str) -> u64;
}

/// Default counter: whitespace-delimited words.
#[derive(Debug, Clone, Copy, Default)]
pub struct WhitespaceCounter;

impl TokenCounter for WhitespaceCounter {
    fn count(&self, text: &str) -> u64 {
        text.split_whitespace().count() as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tool_text(body: &str) -> String {
        format!("```think\nneed a closer look\n```\n```tool_call\n{body}\n```")
    }

    fn answer_text(a: &str) -> String {
        format!("```think\ndone\n```\n```answer\n{a}\n```")
    }

    fn directive(s: f64, e: f64, g: SamplingStrategy) -> CropDirective {
        CropDirective::new(TimeInterval::from_secs(s, e).unwrap(), g)
    }

    #[test]
    fn parses_tool_call_block() {
        let p = parse_assistant_message(&tool_text(r#"{"temporal_segment":[12.0,20.0],"sampling_strategy":"fine"}"#));
        assert_eq!(p.phase, Phase::Tool);
        assert!(p.format_valid());
        assert_eq!(p.action, Some(ParsedAction::Directive(directive(12.0, 20.0, SamplingStrategy::Fine))));
        assert_eq!(p.think_text, "need a closer look");
    }

    #[test]
    fn parses_answer_block() {
        let p = parse_assistant_message(&answer_text("B"));
        assert_eq!(p.phase, Phase::Answer);
        assert!(p.format_valid());
        assert_eq!(p.action, Some(ParsedAction::Answer("B".into())));
    }

    #[test]
    fn every_block_combination_follows_the_exactly_one_rule() {
        let tool = "```tool_call\n{\"temporal_segment\":[1,2],\"sampling_strategy\":\"coarse\"}\n```\n";
        let ans = "```answer\nA\n```\n";
        // Enumerate 0..=2 tool blocks x 0..=2 answer blocks.
        for n_tool in 0..=2 {
            for n_ans in 0..=2 {
                let text = format!("```think\nx\n```\n{}{}", tool.repeat(n_tool), ans.repeat(n_ans));
                let p = parse_assistant_message(&text);
                let expected = match (n_tool, n_ans) {
                    (0, 0) => Some(FormatIssue::NoActionBlock),
                    (1, 0) | (0, 1) => None,
                    (t, a) if t > 0 && a > 0 => Some(FormatIssue::AmbiguousAction),
                    _ => Some(FormatIssue::DuplicateAction),
                };
                assert_eq!(p.issue, expected, "tool={n_tool} answer={n_ans}");
                assert_eq!(p.phase, if n_tool > 0 { Phase::Tool } else { Phase::Answer });
                assert_eq!(try_parse_assistant_message(&text).is_ok(), expected.is_none());
            }
        }
    }

    #[test]
    fn malformed_directive_bodies() {
        let cases = [
            (r#"{"temporal_segment":[12,20]}"#, FormatIssue::BadDirective),
            (r#"{"temporal_segment":[12,20],"sampling_strategy":"ultra"}"#, FormatIssue::BadDirective),
            (r#"{"temporal_segment":[12,20],"sampling_strategy":"fine","extra":1}"#, FormatIssue::BadDirective),
            ("not json", FormatIssue::BadDirective),
            (r#"{"temporal_segment":[20,12],"sampling_strategy":"fine"}"#, FormatIssue::InvalidSegment),
            (r#"{"temporal_segment":[-1,12],"sampling_strategy":"fine"}"#, FormatIssue::InvalidSegment),
        ];
        for (body, issue) in cases {
            let err = try_parse_assistant_message(&tool_text(body)).unwrap_err();
            assert_eq!(err, Malformed { phase: Phase::Tool, reason: issue }, "{body}");
        }
    }

    #[test]
    fn think_placement_affects_validity_only() {
        let p = parse_assistant_message("```answer\nC\n```");
        assert_eq!(p.issue, Some(FormatIssue::MissingThink));
        assert_eq!(p.action, Some(ParsedAction::Answer("C".into())));
        let p = parse_assistant_message("```answer\nC\n```\n```think\nlate\n```");
        assert_eq!(p.issue, Some(FormatIssue::ThinkAfterAction));
        let p = parse_assistant_message("```think\na\n```\n```think\nb\n```\n```answer\nC\n```");
        assert_eq!(p.issue, Some(FormatIssue::DuplicateThink));
        let p = parse_assistant_message("```think\nnever closed");
        assert_eq!(p.issue, Some(FormatIssue::UnterminatedBlock));
        assert_eq!(parse_assistant_message("plain prose").issue, Some(FormatIssue::NoActionBlock));
    }

    #[test]
    fn render_then_parse_roundtrips() {
        let d = directive(3.5, 9.25, SamplingStrategy::Medium);
        let p = parse_assistant_message(&render_message("look", &ParsedAction::Directive(d)));
        assert!(p.format_valid());
        assert_eq!(p.action, Some(ParsedAction::Directive(d)));
    }

    fn observe(state: &mut DialogueState) {
        state.supply_observation(ToolOutcome::Observed(ToolObservation::new(vec![]))).unwrap();
    }

    fn tool_msg(s: f64, e: f64) -> String {
        render_message("t", &ParsedAction::Directive(directive(s, e, SamplingStrategy::Coarse)))
    }

    #[test]
    fn immediate_answer_terminates() {
        let mut st = DialogueState::new("s", DialogueConfig::new(8, LimitPolicy::ForceAnswer, Seconds::whole(100)));
        assert_eq!(st.advance(&answer_text("A")).unwrap(), &DialogueMode::Terminal(Termination::Answered));
        assert_eq!(st.advance(&answer_text("A")), Err(ProtocolError::AdvanceAfterTerminal));
        let t = st.into_trajectory().unwrap();
        assert_eq!(t.turns.len(), 1);
        assert_eq!(t.tool_call_count, 0);
    }

    #[test]
    fn ninth_tool_attempt_under_limit_eight_forces_an_answer() {
        let mut st = DialogueState::new("s", DialogueConfig::new(8, LimitPolicy::ForceAnswer, Seconds::whole(100)));
        for k in 0..8 {
            st.advance(&tool_msg(k as f64, k as f64 + 4.0)).unwrap();
            observe(&mut st);
        }
        assert_eq!(st.forced_prompt(), None);
        let mode = st.advance(&tool_msg(50.0, 54.0)).unwrap();
        assert_eq!(mode, &DialogueMode::ForcedAnswer(ForceReason::TurnLimit));
        assert_eq!(st.forced_prompt(), Some(DEFAULT_FORCED_ANSWER_PROMPT));
        assert_eq!(st.turns().len(), 8);
        st.advance(&answer_text("D")).unwrap();
        let t = st.into_trajectory().unwrap();
        assert_eq!(t.termination, Termination::ForcedAnswer);
        assert_eq!(t.forced_after_turn, Some(8));
        assert_eq!(t.turns.len(), 9);
        assert_eq!(t.tool_call_count, 8);
    }

    #[test]
    fn non_answer_after_forced_prompt_is_over_turn() {
        let mut st = DialogueState::new("s", DialogueConfig::new(1, LimitPolicy::ForceAnswer, Seconds::whole(100)));
        st.advance(&tool_msg(0.0, 4.0)).unwrap();
        observe(&mut st);
        st.advance(&tool_msg(4.0, 8.0)).unwrap();
        st.advance(&tool_msg(8.0, 12.0)).unwrap();
        let t = st.into_trajectory().unwrap();
        assert_eq!(t.termination, Termination::OverTurn);
        assert_eq!(t.turns.len(), 2);
        assert_eq!(t.tool_call_count, 1);
        assert_eq!(t.turns[1].format_issue, Some(FormatIssue::NotAnAnswer));
        t.validate().unwrap();
    }

    #[test]
    fn seventh_tool_attempt_under_training_limit_is_over_turn() {
        let mut st = DialogueState::new("s", DialogueConfig::new(6, LimitPolicy::Terminate, Seconds::whole(100)));
        for k in 0..6 {
            st.advance(&tool_msg(k as f64, k as f64 + 2.0)).unwrap();
            observe(&mut st);
        }
        assert_eq!(st.advance(&tool_msg(20.0, 22.0)).unwrap(), &DialogueMode::Terminal(Termination::OverTurn));
        let t = st.into_trajectory().unwrap();
        assert_eq!(t.turns.len(), 6);
        assert_eq!(t.tool_call_count, 6);
    }

    #[test]
    fn budget_refusal_forces_an_answer() {
        let mut st = DialogueState::new("s", DialogueConfig::new(8, LimitPolicy::ForceAnswer, Seconds::whole(100)));
        st.advance(&tool_msg(0.0, 4.0)).unwrap();
        st.supply_observation(ToolOutcome::Refused { remaining: 10 }).unwrap();
        assert_eq!(st.forced_prompt(), Some(DEFAULT_BUDGET_EXHAUSTED_PROMPT));
        st.advance(&tool_msg(0.0, 4.0)).unwrap();
        let t = st.into_trajectory().unwrap();
        assert_eq!(t.termination, Termination::OverBudget);
        assert_eq!(t.tool_call_count, 0);
    }

    #[test]
    fn directives_are_clamped_or_rejected_against_duration() {
        let mut st = DialogueState::new("s", DialogueConfig::new(8, LimitPolicy::ForceAnswer, Seconds::whole(100)));
        st.advance(&tool_msg(90.0, 130.0)).unwrap();
        assert_eq!(st.pending_directive().unwrap().temporal_segment, TimeInterval::from_secs(90.0, 100.0).unwrap());
        assert!(st.turns()[0].clamped && st.turns()[0].format_valid);
        observe(&mut st);
        assert_eq!(st.advance(&tool_msg(100.0, 130.0)).unwrap(), &DialogueMode::AwaitingAssistant);
        let t = &st.turns()[1];
        assert!(!t.format_valid);
        assert_eq!(t.format_issue, Some(FormatIssue::OutOfRange));
        assert!(t.observation.is_none());
    }

    #[test]
    fn malformed_turns_are_recorded_and_dialogue_continues() {
        let mut st = DialogueState::new("s", DialogueConfig::new(8, LimitPolicy::ForceAnswer, Seconds::whole(100)));
        st.advance("garbage").unwrap();
        assert_eq!(st.mode(), &DialogueMode::AwaitingAssistant);
        assert_eq!(st.turns()[0].action, Action::Malformed { phase: Phase::Answer, reason: FormatIssue::NoActionBlock });
        assert_eq!(st.supply_observation(ToolOutcome::Refused { remaining: 0 }), Err(ProtocolError::NoPendingDirective));
        st.advance(&tool_msg(1.0, 2.0)).unwrap();
        assert_eq!(st.advance(&answer_text("A")), Err(ProtocolError::ObservationPending));
    }

    fn sample_trajectory() -> Trajectory {
        let mut st = DialogueState::new("s-1", DialogueConfig::new(8, LimitPolicy::ForceAnswer, Seconds::whole(100)));
        st.advance(&tool_msg(10.0, 18.0)).unwrap();
        st.supply_observation(ToolOutcome::Observed(ToolObservation::new(vec![FrameObservation {
            timestamp: Seconds::whole(10),
            tokens: 128,
            event_payloads: vec!["x".into()],
        }])))
        .unwrap();
        st.advance(&answer_text("B")).unwrap();
        st.into_trajectory().unwrap()
    }

    #[test]
    fn trajectory_roundtrip_and_recount() {
        let t = sample_trajectory();
        let doc = serialize_trajectory(&t);
        assert_eq!(parse_trajectory(&doc).unwrap(), t);

        let mut v: serde_json::Value = serde_json::from_str(&doc).unwrap();
        v.as_object_mut().unwrap().remove("tool_call_count");
        assert_eq!(parse_trajectory(&v.to_string()).unwrap().tool_call_count, 1);

        v["tool_call_count"] = serde_json::json!(3);
        assert_eq!(parse_trajectory(&v.to_string()).unwrap_err().reason, TrajectoryIssue::InconsistentCount);
    }

    #[test]
    fn trajectory_invariant_violations() {
        let mut t = sample_trajectory();
        t.termination = Termination::OverTurn;
        assert_eq!(t.validate().unwrap_err().reason, TrajectoryIssue::TerminationMismatch);
        let mut t = sample_trajectory();
        t.turns.swap(0, 1);
        assert_eq!(t.validate().unwrap_err().reason, TrajectoryIssue::BadTurnIndex);
        let mut t = sample_trajectory();
        t.turns[0].observation.as_mut().unwrap().total_tokens = 1;
        assert_eq!(t.validate().unwrap_err().reason, TrajectoryIssue::TokenSumMismatch);
        assert_eq!(parse_trajectory("{").unwrap_err().reason, TrajectoryIssue::Json);
    }

    #[test]
    fn whitespace_counter() {
        assert_eq!(WhitespaceCounter.count("  a b\n c "), 3);
    }
}
