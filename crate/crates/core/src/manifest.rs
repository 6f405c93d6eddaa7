//! Synthetic videos, clue annotations and dataset samples.
//!
//! A [`VideoManifest`] stands in for a decoded video: a timeline of labeled
//! events, each either `salient` (visible in the low-density overview) or
//! `subtle` (only visible when cropped at a high per-frame token density).

use std::collections::{BTreeMap, HashSet};
use std::io::Read;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::time::{Seconds, TimeInterval};

pub const DEFAULT_FPS: f64 = 2.0;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("malformed document: {0}")]
    Malformed(#[from] serde_json::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("event {event:?} field {field}: {message}")]
    Invariant { event: Option<String>, field: &'static str, message: String },
}

impl ManifestError {
    fn invariant(event: Option<&str>, field: &'static str, message: impl Into<String>) -> Self {
        ManifestError::Invariant { event: event.map(str::to_string), field, message: message.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Saliency {
    Salient,
    Subtle,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    pub id: String,
    pub interval: TimeInterval,
    pub label: String,
    pub saliency: Saliency,
    pub payload: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoManifest {
    pub id: String,
    pub duration_s: Seconds,
    #[serde(default = "default_fps")]
    pub fps: f64,
    pub events: Vec<Event>,
}

fn default_fps() -> f64 {
    DEFAULT_FPS
}

impl VideoManifest {
    /// Sorts events by start time, then checks every invariant.
    pub fn validated(mut self) -> Result<Self, ManifestError> {
        if self.duration_s <= Seconds::ZERO {
            return Err(ManifestError::invariant(None, "duration_s", "duration must be positive"));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(ManifestError::invariant(None, "fps", "fps must be positive"));
        }
        self.events.sort_by_key(|e| (e.interval.start, e.interval.end));
        let mut seen = HashSet::new();
        for ev in &self.events {
            if !seen.insert(ev.id.as_str()) {
                return Err(ManifestError::invariant(Some(&ev.id), "id", "duplicate event id"));
            }
            if ev.interval.end > self.duration_s {
                return Err(ManifestError::invariant(Some(&ev.id), "interval", "event exceeds duration"));
            }
        }
        Ok(self)
    }

    pub fn event(&self, id: &str) -> Option<&Event> {
        self.events.iter().find(|e| e.id == id)
    }

    /// Events whose interval contains `t`.
    pub fn events_at(&self, t: Seconds) -> impl Iterator<Item = &Event> {
        self.events.iter().filter(move |e| e.interval.contains(t))
    }

    /// The event overlapping `clue` the most; ties go to the earliest event.
    pub fn resolve_clue(&self, clue: &TimeInterval) -> Option<&Event> {
        self.events
            .iter()
            .map(|e| (e.interval.overlap_millis(clue), e))
            .filter(|(overlap, _)| *overlap > 0)
            .fold(None, |best: Option<(i64, &Event)>, cand| match best {
                Some(b) if b.0 >= cand.0 => Some(b),
                _ => Some(cand),
            })
            .map(|(_, e)| e)
    }
}

// Deserialization target that keeps raw interval bounds so invariant errors
// can name the offending event.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    id: String,
    duration_s: Seconds,
    #[serde(default = "default_fps")]
    fps: f64,
    events: Vec<RawEvent>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawEvent {
    id: String,
    interval: RawInterval,
    label: String,
    saliency: Saliency,
    payload: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInterval {
    start: Seconds,
    end: Seconds,
}

impl TryFrom<RawManifest> for VideoManifest {
    type Error = ManifestError;

    fn try_from(raw: RawManifest) -> Result<Self, Self::Error> {
        let events = raw
            .events
            .into_iter()
            .map(|ev| {
                let interval = TimeInterval::new(ev.interval.start, ev.interval.end)
                    .map_err(|e| ManifestError::invariant(Some(&ev.id), "interval", e.to_string()))?;
                Ok(Event { id: ev.id, interval, label: ev.label, saliency: ev.saliency, payload: ev.payload })
            })
            .collect::<Result<Vec<_>, ManifestError>>()?;
        VideoManifest { id: raw.id, duration_s: raw.duration_s, fps: raw.fps, events }.validated()
    }
}

pub fn load_manifest(mut source: impl Read) -> Result<VideoManifest, ManifestError> {
    let mut buf = String::new();
    source.read_to_string(&mut buf)?;
    parse_manifest(&buf)
}

pub fn parse_manifest(doc: &str) -> Result<VideoManifest, ManifestError> {
    let raw: RawManifest = serde_json::from_str(doc)?;
    raw.try_into()
}

/// Reads a JSON-lines container of manifests, validating each one.
pub fn load_manifests_jsonl(source: impl std::io::BufRead) -> Result<Vec<VideoManifest>, (usize, ManifestError)> {
    let mut out = Vec::new();
    for (idx, line) in source.lines().enumerate() {
        let line = line.map_err(|e| (idx + 1, e.into()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_manifest(&line).map_err(|e| (idx + 1, e))?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tag {
    Free,
    TrajectoryGuided,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskType {
    SingleClueDirect,
    SingleClueTool,
    MultiClueDirect,
    MultiClueTool,
    SelfReflectionTool,
    FreeFormatTool,
}

impl TaskType {
    pub const ALL: [TaskType; 6] = [
        TaskType::SingleClueDirect,
        TaskType::SingleClueTool,
        TaskType::MultiClueDirect,
        TaskType::MultiClueTool,
        TaskType::SelfReflectionTool,
        TaskType::FreeFormatTool,
    ];

    pub fn is_core_quadrant(self) -> bool {
        !matches!(self, TaskType::SelfReflectionTool | TaskType::FreeFormatTool)
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskType::SingleClueDirect => "SingleClueDirect",
            TaskType::SingleClueTool => "SingleClueTool",
            TaskType::MultiClueDirect => "MultiClueDirect",
            TaskType::MultiClueTool => "MultiClueTool",
            TaskType::SelfReflectionTool => "SelfReflectionTool",
            TaskType::FreeFormatTool => "FreeFormatTool",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub id: String,
    pub manifest_ref: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<String>>,
    pub answer_key: String,
    pub clue_intervals: Vec<TimeInterval>,
    pub tag: Tag,
    pub k_ref: u32,
    pub task_type: TaskType,
}

impl Sample {
    pub fn validate(&self) -> Result<(), ManifestError> {
        if self.tag == Tag::TrajectoryGuided {
            if self.clue_intervals.is_empty() {
                return Err(ManifestError::invariant(
                    Some(&self.id),
                    "clue_intervals",
                    "trajectory_guided sample needs at least one clue interval",
                ));
            }
            if self.k_ref < 1 {
                return Err(ManifestError::invariant(Some(&self.id), "k_ref", "trajectory_guided sample needs k_ref >= 1"));
            }
        }
        Ok(())
    }
}

/// Relative weights of each task type plus the number of samples to draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyProfile {
    pub samples: usize,
    pub weights: BTreeMap<TaskType, f64>,
}

impl TaxonomyProfile {
    pub fn only(task: TaskType, samples: usize) -> Self {
        TaxonomyProfile { samples, weights: BTreeMap::from([(task, 1.0)]) }
    }

    pub fn uniform(samples: usize) -> Self {
        TaxonomyProfile { samples, weights: TaskType::ALL.iter().map(|t| (*t, 1.0)).collect() }
    }

    /// Largest-remainder apportionment of `samples` across the weights.
    pub fn class_counts(&self) -> BTreeMap<TaskType, usize> {
        let weights: Vec<(TaskType, f64)> =
            self.weights.iter().filter(|(_, w)| w.is_finite() && **w > 0.0).map(|(t, w)| (*t, *w)).collect();
        let total: f64 = weights.iter().map(|(_, w)| w).sum();
        let mut counts = BTreeMap::new();
        if weights.is_empty() || total <= 0.0 || self.samples == 0 {
            return counts;
        }
        let mut remainders = Vec::with_capacity(weights.len());
        let mut assigned = 0usize;
        for (task, w) in &weights {
            let exact = self.samples as f64 * w / total;
            let floor = exact.floor() as usize;
            assigned += floor;
            counts.insert(*task, floor);
            remainders.push((exact - floor as f64, *task));
        }
        remainders.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        for (_, task) in remainders.into_iter().cycle().take(self.samples.saturating_sub(assigned)) {
            *counts.get_mut(&task).expect("task present") += 1;
        }
        counts
    }
}

const SLOT_MS: i64 = 60_000;
const CELL_MS: i64 = 10_000;
const OPTION_LETTERS: [&str; 4] = ["A", "B", "C", "D"];

/// Builds one synthetic long video and a sample list drawn from `profile`.
///
/// Each sample owns a 60 s slot of the timeline split into six 10 s cells;
/// clue events and one or two distractors occupy distinct cells, so clues
/// never overlap each other or distractors.
pub fn generate_synthetic(seed: u64, profile: &TaxonomyProfile) -> (VideoManifest, Vec<Sample>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let manifest_id = format!("synth-{seed}");
    let mut tasks: Vec<TaskType> =
        profile.class_counts().into_iter().flat_map(|(t, n)| std::iter::repeat_n(t, n)).collect();
    tasks.shuffle(&mut rng);

    let slots = tasks.len().max(1) as i64;
    let mut events = Vec::new();
    let mut samples = Vec::with_capacity(tasks.len());
    for (idx, task) in tasks.into_iter().enumerate() {
        let sample_id = format!("{manifest_id}-{idx:05}");
        let slot_start = idx as i64 * SLOT_MS;
        let saliencies = clue_saliencies(task, &mut rng);
        let distractors = rng.gen_range(1..=2usize);
        let mut cells: Vec<i64> = (0..SLOT_MS / CELL_MS).collect();
        cells.shuffle(&mut rng);
        let answer = OPTION_LETTERS[rng.gen_range(0..OPTION_LETTERS.len())];

        let mut clue_intervals = Vec::new();
        for (k, saliency) in saliencies.iter().enumerate() {
            let interval = place_in_cell(slot_start + cells[k] * CELL_MS, *saliency, &mut rng);
            clue_intervals.push(interval);
            events.push(Event {
                id: format!("{sample_id}-clue{k}"),
                interval,
                label: format!("clue {k} for {sample_id}"),
                saliency: *saliency,
                payload: format!("{sample_id} clue {k}: the answer is {answer}"),
            });
        }
        for d in 0..distractors {
            let cell = cells[saliencies.len() + d];
            let saliency = if rng.gen_bool(0.5) { Saliency::Salient } else { Saliency::Subtle };
            events.push(Event {
                id: format!("{sample_id}-bg{d}"),
                interval: place_in_cell(slot_start + cell * CELL_MS, saliency, &mut rng),
                label: "background".to_string(),
                saliency,
                payload: format!("{sample_id} background activity {d}"),
            });
        }
        clue_intervals.sort();

        let (tag, k_ref) = match task {
            TaskType::SingleClueDirect | TaskType::MultiClueDirect => (Tag::Free, 0),
            TaskType::SingleClueTool | TaskType::MultiClueTool => (Tag::TrajectoryGuided, saliencies.len() as u32),
            TaskType::SelfReflectionTool => (Tag::TrajectoryGuided, 2),
            TaskType::FreeFormatTool => (Tag::Free, saliencies.len() as u32),
        };
        samples.push(Sample {
            id: sample_id.clone(),
            manifest_ref: manifest_id.clone(),
            question: format!("Which option is confirmed by the clues in {sample_id}?"),
            options: Some(OPTION_LETTERS.iter().map(|l| format!("{l}. option {l}")).collect()),
            answer_key: answer.to_string(),
            clue_intervals,
            tag,
            k_ref,
            task_type: task,
        });
    }

    let manifest = VideoManifest {
        id: manifest_id,
        duration_s: Seconds::from_millis(slots * SLOT_MS),
        fps: DEFAULT_FPS,
        events,
    }
    .validated()
    .expect("generated manifest satisfies its invariants");
    (manifest, samples)
}

fn clue_saliencies(task: TaskType, rng: &mut ChaCha8Rng) -> Vec<Saliency> {
    use Saliency::*;
    match task {
        TaskType::SingleClueDirect => vec![Salient],
        TaskType::SingleClueTool | TaskType::SelfReflectionTool => vec![Subtle],
        TaskType::MultiClueDirect => vec![Salient; rng.gen_range(2..=3)],
        TaskType::MultiClueTool | TaskType::FreeFormatTool => {
            let lo = if task == TaskType::MultiClueTool { 2 } else { 1 };
            let n = rng.gen_range(lo..=3usize);
            let mut v: Vec<Saliency> = (0..n).map(|_| if rng.gen_bool(0.5) { Subtle } else { Salient }).collect();
            let forced = rng.gen_range(0..n);
            v[forced] = Subtle;
            v
        }
    }
}

// Salient events last 4-8 s, subtle ones 1-3 s, both inside a 10 s cell.
fn place_in_cell(cell_start: i64, saliency: Saliency, rng: &mut ChaCha8Rng) -> TimeInterval {
    let len = match saliency {
        Saliency::Salient => rng.gen_range(4..=8) * 1000,
        Saliency::Subtle => rng.gen_range(1..=3) * 1000,
    };
    let offset = rng.gen_range(0..=(CELL_MS - len) / 500) * 500;
    TimeInterval::from_millis(cell_start + offset, cell_start + offset + len).expect("non-empty by construction")
}
