//! Four-stage candidate filtering with pluggable judges and per-stage
//! checkpoints, plus taxonomy classification and dataset statistics.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::manifest::{Saliency, Sample, Tag, TaskType, VideoManifest};
use crate::protocol::{parse_trajectory, Termination, Trajectory};
use crate::reward::{AnswerMatcher, OptionLetterMatcher};
use crate::rollout::{run_episode, EpisodeConfig, OraclePolicy};
use crate::time::TimeInterval;

pub const JUDGE_ERROR_REASON: &str = "judge_error";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PipelineStage {
    ClueLocalization,
    ValidityVerification,
    TrajectoryGeneration,
    LogicalConsistencyCheck,
}

impl PipelineStage {
    pub const ALL: [PipelineStage; 4] = [
        PipelineStage::ClueLocalization,
        PipelineStage::ValidityVerification,
        PipelineStage::TrajectoryGeneration,
        PipelineStage::LogicalConsistencyCheck,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PipelineStage::ClueLocalization => "clue_localization",
            PipelineStage::ValidityVerification => "validity_verification",
            PipelineStage::TrajectoryGeneration => "trajectory_generation",
            PipelineStage::LogicalConsistencyCheck => "logical_consistency_check",
        }
    }
}

impl std::str::FromStr for PipelineStage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        PipelineStage::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| format!("unknown stage {s}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageVerdict {
    pub pass: bool,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub sample: Sample,
    #[serde(default)]
    pub stage_outputs: BTreeMap<PipelineStage, Value>,
    #[serde(default)]
    pub verdicts: BTreeMap<PipelineStage, StageVerdict>,
}

impl CandidateRecord {
    pub fn new(sample: Sample) -> Self {
        CandidateRecord { sample, stage_outputs: BTreeMap::new(), verdicts: BTreeMap::new() }
    }

    pub fn passed(&self, stage: PipelineStage) -> bool {
        self.verdicts.get(&stage).is_some_and(|v| v.pass)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub pass: bool,
    pub reason: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<Value>,
}

impl Verdict {
    pub fn pass(reason: impl Into<String>) -> Self {
        Verdict { pass: true, reason: reason.into(), output: None }
    }

    pub fn fail(reason: impl Into<String>) -> Self {
        Verdict { pass: false, reason: reason.into(), output: None }
    }

    pub fn with_output(self, output: Value) -> Self {
        Verdict { output: Some(output), ..self }
    }
}

/// The document a judge sees.
#[derive(Debug, Clone, Serialize)]
pub struct JudgeRequest<'a> {
    pub stage: PipelineStage,
    pub record: &'a CandidateRecord,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub manifest: Option<&'a VideoManifest>,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum JudgeError {
    /// Worth retrying.
    #[error("transient judge failure: {0}")]
    Transient(String),
    /// Stops the pipeline; completed work stays checkpointed.
    #[error("fatal judge failure: {0}")]
    Fatal(String),
}

pub trait Judge: Send + Sync {
    /// Stable identity, part of the checkpoint address.
    fn id(&self) -> String;
    fn judge(&self, req: &JudgeRequest<'_>) -> Result<Verdict, JudgeError>;
}

/// Deterministic built-in judges.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RuleJudge {
    PassAll,
    FailAll,
    HasClues,
    /// Every clue interval overlaps some manifest event.
    ClueOverlapsEvent,
    /// The answer key names one of the options.
    AnswerInOptions,
    /// Produces a trajectory with the oracle policy; passes if it answers correctly.
    OracleTrajectory,
    /// The generated trajectory reaches the answer key and crops every clue.
    ConsistentTrajectory,
}

impl RuleJudge {
    pub const ALL: [RuleJudge; 7] = [
        RuleJudge::PassAll,
        RuleJudge::FailAll,
        RuleJudge::HasClues,
        RuleJudge::ClueOverlapsEvent,
        RuleJudge::AnswerInOptions,
        RuleJudge::OracleTrajectory,
        RuleJudge::ConsistentTrajectory,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RuleJudge::PassAll => "pass_all",
            RuleJudge::FailAll => "fail_all",
            RuleJudge::HasClues => "has_clues",
            RuleJudge::ClueOverlapsEvent => "clue_overlaps_event",
            RuleJudge::AnswerInOptions => "answer_in_options",
            RuleJudge::OracleTrajectory => "oracle_trajectory",
            RuleJudge::ConsistentTrajectory => "consistent_trajectory",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        RuleJudge::ALL.into_iter().find(|j| j.name() == name)
    }
}

fn covers_every_clue(t: &Trajectory, clues: &[TimeInterval]) -> bool {
    let crops = t.executed_segments();
    clues.iter().all(|c| crops.iter().any(|p| p.overlaps(c)))
}

impl Judge for RuleJudge {
    fn id(&self) -> String {
        format!("rule:{}", self.name())
    }

    fn judge(&self, req: &JudgeRequest<'_>) -> Result<Verdict, JudgeError> {
        let sample = &req.record.sample;
        let verdict = match self {
            RuleJudge::PassAll => Verdict::pass("pass_all"),
            RuleJudge::FailAll => Verdict::fail("fail_all"),
            RuleJudge::HasClues => {
                if sample.clue_intervals.is_empty() {
                    Verdict::fail("no clue intervals")
                } else {
                    Verdict::pass("has clues")
                }
            }
            RuleJudge::ClueOverlapsEvent => {
                let Some(m) = req.manifest else { return Ok(Verdict::fail("manifest not found")) };
                let resolved: Vec<Option<&str>> =
                    sample.clue_intervals.iter().map(|c| m.resolve_clue(c).map(|e| e.id.as_str())).collect();
                let output = json!(resolved);
                match resolved.iter().position(Option::is_none) {
                    Some(k) => Verdict::fail(format!("clue {k} overlaps no event")).with_output(output),
                    None => Verdict::pass("all clues localized").with_output(output),
                }
            }
            RuleJudge::AnswerInOptions => match &sample.options {
                None => Verdict::pass("open-ended"),
                Some(opts) => {
                    if opts.iter().any(|o| OptionLetterMatcher.is_correct(o, sample)) {
                        Verdict::pass("answer key is an option")
                    } else {
                        Verdict::fail("answer key names no option")
                    }
                }
            },
            RuleJudge::OracleTrajectory => {
                let Some(m) = req.manifest else { return Ok(Verdict::fail("manifest not found")) };
                let result = run_episode(sample, m, &OraclePolicy, &EpisodeConfig::eval())
                    .map_err(|e| JudgeError::Fatal(e.to_string()))?;
                let doc = serde_json::to_value(&result.trajectory).expect("trajectory serializes");
                if result.reward.r_a == 1 && result.trajectory.termination == Termination::Answered {
                    Verdict::pass("oracle answers correctly").with_output(doc)
                } else {
                    Verdict::fail("oracle could not answer").with_output(doc)
                }
            }
            RuleJudge::ConsistentTrajectory => {
                let Some(doc) = req.record.stage_outputs.get(&PipelineStage::TrajectoryGeneration) else {
                    return Ok(Verdict::fail("no generated trajectory"));
                };
                match parse_trajectory(&doc.to_string()) {
                    Err(e) => Verdict::fail(format!("invalid trajectory: {e}")),
                    Ok(t) if !t.final_answer().is_some_and(|a| OptionLetterMatcher.is_correct(a, sample)) => {
                        Verdict::fail("final answer disagrees with the key")
                    }
                    Ok(t) if sample.tag == Tag::TrajectoryGuided && !covers_every_clue(&t, &sample.clue_intervals) => {
                        Verdict::fail("trajectory skips a clue")
                    }
                    Ok(_) => Verdict::pass("consistent"),
                }
            }
        };
        Ok(verdict)
    }
}

/// Posts the judge request as JSON and expects a [`Verdict`] back.
/// Connection errors, timeouts and 5xx are transient; other failures are fatal.
#[derive(Debug, Clone)]
pub struct HttpJudge {
    endpoint: String,
    client: reqwest::blocking::Client,
}

impl HttpJudge {
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Result<Self, JudgeError> {
        let client = reqwest::blocking::Client::builder().timeout(timeout).build().map_err(|e| JudgeError::Fatal(e.to_string()))?;
        Ok(HttpJudge { endpoint: endpoint.into(), client })
    }
}

impl Judge for HttpJudge {
    fn id(&self) -> String {
        format!("http:{}", self.endpoint)
    }

    fn judge(&self, req: &JudgeRequest<'_>) -> Result<Verdict, JudgeError> {
        let resp = self.client.post(&self.endpoint).json(req).send().map_err(|e| JudgeError::Transient(e.to_string()))?;
        let status = resp.status();
        if status.is_server_error() {
            return Err(JudgeError::Transient(format!("status {status}")));
        }
        if !status.is_success() {
            return Err(JudgeError::Fatal(format!("status {status}")));
        }
        resp.json().map_err(|e| JudgeError::Fatal(e.to_string()))
    }
}

/// Builds a judge from a rule name or an http(s) URL.
pub fn judge_from_spec(spec: &str) -> Result<Arc<dyn Judge>, PipelineError> {
    if spec.starts_with("http://") || spec.starts_with("https://") {
        let judge = HttpJudge::new(spec, Duration::from_secs(60)).map_err(|e| PipelineError::UnknownJudge(e.to_string()))?;
        return Ok(Arc::new(judge));
    }
    RuleJudge::from_name(spec)
        .map(|j| Arc::new(j) as Arc<dyn Judge>)
        .ok_or_else(|| PipelineError::UnknownJudge(spec.to_string()))
}

pub type StageJudges = BTreeMap<PipelineStage, Arc<dyn Judge>>;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("no judge configured for stage {0}")]
    MissingJudge(&'static str),
    #[error("unknown judge {0}")]
    UnknownJudge(String),
    #[error("stage {stage}, sample {sample}: {error}")]
    JudgeFatal { stage: &'static str, sample: String, error: JudgeError },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("concurrency must be >= 1")]
    ZeroConcurrency,
    #[error("thread pool: {0}")]
    Pool(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineOptions {
    pub checkpoint_dir: Option<PathBuf>,
    /// Reuse completed and partial stage checkpoints instead of starting over.
    pub resume: bool,
    pub concurrency: usize,
    /// Records judged between partial checkpoint flushes.
    pub chunk_size: usize,
    pub max_retries: u32,
    pub backoff: Duration,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        PipelineOptions {
            checkpoint_dir: None,
            resume: false,
            concurrency: 4,
            chunk_size: 16,
            max_retries: 3,
            backoff: Duration::from_millis(50),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: PipelineStage,
    pub judge: String,
    pub inputs: usize,
    pub passed: usize,
    pub failed: usize,
    pub judge_errors: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub inputs: usize,
    pub survivors: usize,
    pub stages: Vec<StageReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineOutcome {
    pub survivors: Vec<CandidateRecord>,
    /// Records dropped at some stage, with the failing verdict attached.
    pub rejected: Vec<CandidateRecord>,
    pub report: PipelineReport,
    /// Stages whose results were read back from a checkpoint, fully or in part.
    pub resumed_stages: Vec<PipelineStage>,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn input_key(records: &[CandidateRecord], manifests: &BTreeMap<String, VideoManifest>) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(serde_json::to_vec(r).expect("record serializes"));
        h.update(b"\n");
    }
    h.update(serde_json::to_vec(manifests).expect("manifests serialize"));
    hex(&h.finalize())
}

fn stage_key(prev: &str, stage: PipelineStage, judge: &dyn Judge) -> String {
    hex(&Sha256::new()
        .chain_update(prev.as_bytes())
        .chain_update(stage.name().as_bytes())
        .chain_update(judge.id().as_bytes())
        .finalize())
}

fn judge_with_retry(
    judge: &dyn Judge,
    req: &JudgeRequest<'_>,
    opts: &PipelineOptions,
) -> Result<Verdict, JudgeError> {
    let mut attempt = 0;
    loop {
        match judge.judge(req) {
            Ok(v) => return Ok(v),
            Err(JudgeError::Transient(e)) if attempt >= opts.max_retries => {
                return Ok(Verdict::fail(JUDGE_ERROR_REASON).with_output(json!({ "error": e, "attempts": attempt + 1 })));
            }
            Err(JudgeError::Transient(_)) => {
                std::thread::sleep(opts.backoff.saturating_mul(1 << attempt.min(16)));
                attempt += 1;
            }
            Err(fatal) => return Err(fatal),
        }
    }
}

fn judge_one(
    stage: PipelineStage,
    record: &CandidateRecord,
    judge: &dyn Judge,
    manifests: &BTreeMap<String, VideoManifest>,
    opts: &PipelineOptions,
) -> Result<CandidateRecord, PipelineError> {
    let req = JudgeRequest { stage, record, manifest: manifests.get(&record.sample.manifest_ref) };
    let verdict = judge_with_retry(judge, &req, opts).map_err(|error| PipelineError::JudgeFatal {
        stage: stage.name(),
        sample: record.sample.id.clone(),
        error,
    })?;
    let mut out = record.clone();
    if let Some(doc) = verdict.output {
        out.stage_outputs.insert(stage, doc);
    }
    out.verdicts.insert(stage, StageVerdict { pass: verdict.pass, reason: verdict.reason });
    Ok(out)
}

struct StageCheckpoint {
    dir: PathBuf,
}

impl StageCheckpoint {
    const DONE: &'static str = "judged.jsonl";
    const PARTIAL: &'static str = "partial.jsonl";

    fn error(&self, e: impl std::fmt::Display) -> PipelineError {
        PipelineError::Checkpoint { path: self.dir.clone(), message: e.to_string() }
    }

    fn read_lines(&self, name: &str, tolerate_torn_tail: bool) -> Result<Option<Vec<CandidateRecord>>, PipelineError> {
        let path = self.dir.join(name);
        let file = match File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(self.error(e)),
        };
        let mut out = Vec::new();
        let mut valid_len = 0u64;
        for line in BufReader::new(file).split(b'\n') {
            let line = line.map_err(|e| self.error(e))?;
            match serde_json::from_slice(&line) {
                Ok(r) => {
                    out.push(r);
                    valid_len += line.len() as u64 + 1;
                }
                Err(_) if tolerate_torn_tail => break,
                Err(e) => return Err(self.error(e)),
            }
        }
        if tolerate_torn_tail {
            let f = OpenOptions::new().write(true).open(&path).map_err(|e| self.error(e))?;
            f.set_len(valid_len).map_err(|e| self.error(e))?;
        }
        Ok(Some(out))
    }

    fn append_partial(&self, records: &[CandidateRecord]) -> Result<(), PipelineError> {
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.dir.join(Self::PARTIAL))
            .map_err(|e| self.error(e))?;
        let mut buf = Vec::new();
        for r in records {
            serde_json::to_writer(&mut buf, r).expect("record serializes");
            buf.push(b'\n');
        }
        f.write_all(&buf).and_then(|_| f.sync_data()).map_err(|e| self.error(e))
    }

    fn finish(&self, records: &[CandidateRecord]) -> Result<(), PipelineError> {
        let tmp = self.dir.join("judged.jsonl.tmp");
        let mut buf = Vec::new();
        for r in records {
            serde_json::to_writer(&mut buf, r).expect("record serializes");
            buf.push(b'\n');
        }
        fs::write(&tmp, &buf).map_err(|e| self.error(e))?;
        fs::rename(&tmp, self.dir.join(Self::DONE)).map_err(|e| self.error(e))?;
        match fs::remove_file(self.dir.join(Self::PARTIAL)) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(self.error(e)),
            _ => Ok(()),
        }
    }
}

fn run_stage(
    stage: PipelineStage,
    inputs: &[CandidateRecord],
    judge: &dyn Judge,
    manifests: &BTreeMap<String, VideoManifest>,
    opts: &PipelineOptions,
    pool: &rayon::ThreadPool,
    checkpoint: Option<&StageCheckpoint>,
) -> Result<(Vec<CandidateRecord>, bool), PipelineError> {
    let mut judged: Vec<CandidateRecord> = Vec::with_capacity(inputs.len());
    let mut resumed = false;
    if let Some(cp) = checkpoint {
        if opts.resume {
            if let Some(done) = cp.read_lines(StageCheckpoint::DONE, false)? {
                return Ok((done, true));
            }
            if let Some(partial) = cp.read_lines(StageCheckpoint::PARTIAL, true)? {
                let prefix_ok = partial.len() <= inputs.len()
                    && partial.iter().zip(inputs).all(|(p, i)| p.sample == i.sample);
                if prefix_ok {
                    resumed = !partial.is_empty();
                    judged = partial;
                } else {
                    fs::remove_file(cp.dir.join(StageCheckpoint::PARTIAL)).map_err(|e| cp.error(e))?;
                }
            }
        } else if cp.dir.exists() {
            fs::remove_dir_all(&cp.dir).map_err(|e| cp.error(e))?;
        }
        fs::create_dir_all(&cp.dir).map_err(|e| cp.error(e))?;
    }

    for chunk in inputs[judged.len()..].chunks(opts.chunk_size.max(1)) {
        let results: Vec<Result<CandidateRecord, PipelineError>> =
            pool.install(|| chunk.par_iter().map(|r| judge_one(stage, r, judge, manifests, opts)).collect());
        let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
        if let Some(cp) = checkpoint {
            cp.append_partial(&results)?;
        }
        judged.extend(results);
    }
    if let Some(cp) = checkpoint {
        cp.finish(&judged)?;
    }
    Ok((judged, resumed))
}

/// Runs the four stages in order. Each stage sees only the previous stage's
/// survivors and is checkpointed before the next one starts.
pub fn run_pipeline(
    records: Vec<CandidateRecord>,
    manifests: &BTreeMap<String, VideoManifest>,
    judges: &StageJudges,
    opts: &PipelineOptions,
) -> Result<PipelineOutcome, PipelineError> {
    for stage in PipelineStage::ALL {
        if !judges.contains_key(&stage) {
            return Err(PipelineError::MissingJudge(stage.name()));
        }
    }
    if opts.concurrency == 0 {
        return Err(PipelineError::ZeroConcurrency);
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(opts.concurrency)
        .build()
        .map_err(|e| PipelineError::Pool(e.to_string()))?;

    let inputs = records.len();
    let mut key = input_key(&records, manifests);
    let mut current = records;
    let mut rejected = Vec::new();
    let mut stages = Vec::new();
    let mut resumed_stages = Vec::new();
    for (idx, stage) in PipelineStage::ALL.into_iter().enumerate() {
        let judge = judges[&stage].as_ref();
        key = stage_key(&key, stage, judge);
        let checkpoint = opts
            .checkpoint_dir
            .as_ref()
            .map(|root| StageCheckpoint { dir: root.join(format!("{}-{}-{}", idx + 1, stage.name(), &key[..16])) });
        let (judged, resumed) = run_stage(stage, &current, judge, manifests, opts, &pool, checkpoint.as_ref())?;
        if resumed {
            resumed_stages.push(stage);
        }
        let judge_errors = judged.iter().filter(|r| r.verdicts[&stage].reason == JUDGE_ERROR_REASON).count();
        let (pass, fail): (Vec<_>, Vec<_>) = judged.into_iter().partition(|r| r.passed(stage));
        stages.push(StageReport {
            stage,
            judge: judge.id(),
            inputs: current.len(),
            passed: pass.len(),
            failed: fail.len(),
            judge_errors,
        });
        rejected.extend(fail);
        current = pass;
    }
    let report = PipelineReport { inputs, survivors: current.len(), stages };
    Ok(PipelineOutcome { survivors: current, rejected, report, resumed_stages })
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TaxonomyError {
    #[error("sample {sample}: clue {index} overlaps no event of manifest {manifest}")]
    UnresolvableClue { sample: String, index: usize, manifest: String },
    #[error("sample {0} has no clue intervals")]
    NoClues(String),
}

/// Quadrant by clue count and saliency; reflection and free-format samples
/// keep their type.
pub fn classify_taxonomy(sample: &Sample, manifest: &VideoManifest) -> Result<TaskType, TaxonomyError> {
    if !sample.task_type.is_core_quadrant() {
        return Ok(sample.task_type);
    }
    if sample.clue_intervals.is_empty() {
        return Err(TaxonomyError::NoClues(sample.id.clone()));
    }
    let mut any_subtle = false;
    for (index, clue) in sample.clue_intervals.iter().enumerate() {
        let event = manifest.resolve_clue(clue).ok_or_else(|| TaxonomyError::UnresolvableClue {
            sample: sample.id.clone(),
            index,
            manifest: manifest.id.clone(),
        })?;
        any_subtle |= event.saliency == Saliency::Subtle;
    }
    Ok(match (sample.clue_intervals.len() == 1, any_subtle) {
        (true, false) => TaskType::SingleClueDirect,
        (true, true) => TaskType::SingleClueTool,
        (false, false) => TaskType::MultiClueDirect,
        (false, true) => TaskType::MultiClueTool,
    })
}

/// Histograms keep a fixed key order; `by_source` is sorted by manifest id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub total: usize,
    pub by_task_type: Vec<(String, usize)>,
    pub by_source: Vec<(String, usize)>,
    pub by_clue_count: Vec<(String, usize)>,
    pub by_duration_bucket: Vec<(String, usize)>,
}

const CLUE_COUNT_KEYS: [&str; 5] = ["0", "1", "2", "3", "4+"];
/// Upper bounds in ms of the clue span buckets; the last bucket is open.
const SPAN_BUCKETS: [(i64, &str); 6] =
    [(2_000, "<2s"), (5_000, "2-5s"), (10_000, "5-10s"), (30_000, "10-30s"), (60_000, "30-60s"), (i64::MAX, ">=60s")];
const NO_SPAN: &str = "none";

fn span_bucket(sample: &Sample) -> &'static str {
    match TimeInterval::hull(&sample.clue_intervals) {
        None => NO_SPAN,
        Some(h) => SPAN_BUCKETS.iter().find(|(hi, _)| h.length().millis() < *hi).map_or(">=60s", |(_, k)| *k),
    }
}

/// Counts by task type, source manifest, number of clues and the length of
/// the span covering all clues.
pub fn dataset_stats(samples: &[Sample]) -> DatasetStats {
    let mut by_type: BTreeMap<TaskType, usize> = TaskType::ALL.iter().map(|t| (*t, 0)).collect();
    let mut by_source: BTreeMap<String, usize> = BTreeMap::new();
    let mut by_clues = [0usize; CLUE_COUNT_KEYS.len()];
    let mut by_span: BTreeMap<&'static str, usize> = BTreeMap::new();
    for s in samples {
        *by_type.get_mut(&s.task_type).expect("all types present") += 1;
        *by_source.entry(s.manifest_ref.clone()).or_insert(0) += 1;
        by_clues[s.clue_intervals.len().min(CLUE_COUNT_KEYS.len() - 1)] += 1;
        *by_span.entry(span_bucket(s)).or_insert(0) += 1;
    }
    let span_keys = std::iter::once(NO_SPAN).chain(SPAN_BUCKETS.iter().map(|(_, k)| *k));
    DatasetStats {
        total: samples.len(),
        by_task_type: TaskType::ALL.iter().map(|t| (t.name().to_string(), by_type[t])).collect(),
        by_source: by_source.into_iter().collect(),
        by_clue_count: CLUE_COUNT_KEYS.iter().zip(by_clues).map(|(k, n)| (k.to_string(), n)).collect(),
        by_duration_bucket: span_keys.map(|k| (k.to_string(), by_span.get(k).copied().unwrap_or(0))).collect(),
    }
}

/// A seeded `percent`% of `records` (rounded up), in their original order.
pub fn sample_for_review(records: &[CandidateRecord], percent: f64, seed: u64) -> Vec<CandidateRecord> {
    let pct = if percent.is_finite() { percent.clamp(0.0, 100.0) } else { 0.0 };
    let k = ((records.len() as f64 * pct / 100.0).ceil() as usize).min(records.len());
    let mut idx: Vec<usize> = (0..records.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut chosen = idx[..k].to_vec();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| records[i].clone()).collect()
}

/// Reads candidate records, accepting bare samples too.
pub fn read_candidates(reader: impl BufRead) -> Result<Vec<CandidateRecord>, crate::jsonl::JsonlError> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Line {
        Record(CandidateRecord),
        Sample(Sample),
    }
    Ok(crate::jsonl::read_jsonl::<Line>(reader)?
        .into_iter()
        .map(|l| match l {
            Line::Record(r) => r,
            Line::Sample(s) => CandidateRecord::new(s),
        })
        .collect())
}
