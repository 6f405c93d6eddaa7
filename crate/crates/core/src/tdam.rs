//! Task-decoupled attention masks.
//!
//! Generated tokens are labeled with the phase of the assistant turn they
//! belong to. Tool-phase rows may not attend to local (cropped) visual
//! tokens; answer-phase rows may not attend to global-overview visual tokens.
//! Everything else follows plain causal visibility.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::protocol::Phase;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SegmentKind {
    GlobalVisual,
    LocalVisual,
    Text,
}

/// A run of tokens `[start, end)` of one kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub kind: SegmentKind,
    pub start: usize,
    pub end: usize,
    /// Produced by the assistant (only meaningful for text).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub generated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseSpan {
    pub start: usize,
    pub end: usize,
    pub phase: Phase,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotatedSequence {
    pub length: usize,
    pub segments: Vec<Segment>,
    #[serde(default)]
    pub phase_of: Vec<PhaseSpan>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MaskError {
    #[error("segments must be disjoint and cover [0, {length}); problem at token {at}")]
    BadCoverage { length: usize, at: usize },
    #[error("visual segment [{start}, {end}) cannot be generated")]
    GeneratedVisual { start: usize, end: usize },
    #[error("phase span [{start}, {end}) is empty or leaves the generated tokens")]
    StrayPhase { start: usize, end: usize },
    #[error("generated token {index} has no phase")]
    UnlabeledPhase { index: usize },
    #[error("token {index} has more than one phase")]
    ConflictingPhase { index: usize },
    #[error("blocked pair ({row}, {col}) is not strictly below the diagonal")]
    NonCausalBlock { row: usize, col: usize },
    #[error("bad mask document: {0}")]
    Decode(String),
}

impl AnnotatedSequence {
    /// Per-token kinds and phases after checking every invariant.
    pub fn resolve(&self) -> Result<(Vec<SegmentKind>, Vec<Option<Phase>>), MaskError> {
        let mut segs = self.segments.clone();
        segs.sort_by_key(|s| s.start);
        let mut kinds = Vec::with_capacity(self.length);
        let mut generated = vec![false; self.length];
        for s in &segs {
            if s.start != kinds.len() || s.end <= s.start || s.end > self.length {
                return Err(MaskError::BadCoverage { length: self.length, at: kinds.len() });
            }
            if s.generated && s.kind != SegmentKind::Text {
                return Err(MaskError::GeneratedVisual { start: s.start, end: s.end });
            }
            kinds.extend(std::iter::repeat_n(s.kind, s.end - s.start));
            generated[s.start..s.end].fill(s.generated);
        }
        if kinds.len() != self.length {
            return Err(MaskError::BadCoverage { length: self.length, at: kinds.len() });
        }
        let mut phases = vec![None; self.length];
        for span in &self.phase_of {
            if span.end <= span.start || span.end > self.length || !generated[span.start..span.end].iter().all(|g| *g) {
                return Err(MaskError::StrayPhase { start: span.start, end: span.end });
            }
            for (index, slot) in phases.iter_mut().enumerate().take(span.end).skip(span.start) {
                if slot.replace(span.phase).is_some() {
                    return Err(MaskError::ConflictingPhase { index });
                }
            }
        }
        if let Some(index) = (0..self.length).find(|&i| generated[i] && phases[i].is_none()) {
            return Err(MaskError::UnlabeledPhase { index });
        }
        Ok((kinds, phases))
    }
}

/// Which visual kind a phase may not see.
pub fn blocked_kind(phase: Phase) -> SegmentKind {
    match phase {
        Phase::Tool => SegmentKind::LocalVisual,
        Phase::Answer => SegmentKind::GlobalVisual,
    }
}

/// Causal visibility plus per-row blocked column ranges `[start, end)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub length: usize,
    /// Row index to blocked column ranges; rows blocking nothing are absent.
    pub blocked: BTreeMap<usize, Vec<(usize, usize)>>,
}

impl MaskSpec {
    pub fn empty(length: usize) -> Self {
        MaskSpec { length, blocked: BTreeMap::new() }
    }

    pub fn is_blocked(&self, row: usize, col: usize) -> bool {
        self.blocked.get(&row).is_some_and(|ranges| ranges.iter().any(|(s, e)| *s <= col && col < *e))
    }

    /// Visible under causality and not blocked.
    pub fn is_visible(&self, row: usize, col: usize) -> bool {
        col <= row && !self.is_blocked(row, col)
    }

    pub fn blocked_pairs(&self) -> usize {
        self.blocked.values().flat_map(|r| r.iter()).map(|(s, e)| e - s).sum()
    }

    pub fn validate(&self) -> Result<(), MaskError> {
        for (row, ranges) in &self.blocked {
            for (s, e) in ranges {
                if s >= e || *e > *row || *row >= self.length {
                    return Err(MaskError::NonCausalBlock { row: *row, col: e.saturating_sub(1).max(*s) });
                }
            }
        }
        Ok(())
    }
}

pub fn build_mask(seq: &AnnotatedSequence) -> Result<MaskSpec, MaskError> {
    let (kinds, phases) = seq.resolve()?;
    // Visual runs in token order.
    let mut runs: Vec<(SegmentKind, usize, usize)> = Vec::new();
    for (j, kind) in kinds.iter().enumerate() {
        if *kind == SegmentKind::Text {
            continue;
        }
        match runs.last_mut() {
            Some((k, _, end)) if *k == *kind && *end == j => *end = j + 1,
            _ => runs.push((*kind, j, j + 1)),
        }
    }
    let mut blocked = BTreeMap::new();
    for (row, phase) in phases.iter().enumerate() {
        let Some(phase) = phase else { continue };
        let target = blocked_kind(*phase);
        let ranges: Vec<(usize, usize)> = runs
            .iter()
            .filter(|(k, start, _)| *k == target && *start < row)
            .map(|(_, start, end)| (*start, (*end).min(row)))
            .collect();
        if !ranges.is_empty() {
            blocked.insert(row, ranges);
        }
    }
    Ok(MaskSpec { length: seq.length, blocked })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskFormat {
    Dense01,
    BlockedRanges,
}

#[derive(Serialize, Deserialize)]
struct BlockedRow {
    row: usize,
    ranges: Vec<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct BlockedDoc {
    length: usize,
    rows: Vec<BlockedRow>,
}

/// `dense01`: row-major rows of `0`/`1`, one line per row, `1` = visible.
/// `blocked_ranges`: one JSON document listing blocked ranges per row.
pub fn export_mask(m: &MaskSpec, format: MaskFormat) -> String {
    match format {
        MaskFormat::Dense01 => {
            let mut out = String::with_capacity(m.length * (m.length + 1));
            for i in 0..m.length {
                for j in 0..m.length {
                    out.push(if m.is_visible(i, j) { '1' } else { '0' });
                }
                out.push('\n');
            }
            out
        }
        MaskFormat::BlockedRanges => {
            let doc = BlockedDoc {
                length: m.length,
                rows: m.blocked.iter().map(|(row, ranges)| BlockedRow { row: *row, ranges: ranges.clone() }).collect(),
            };
            let mut out = serde_json::to_string(&doc).expect("mask serializes");
            let _ = writeln!(out);
            out
        }
    }
}

pub fn decode_mask(doc: &str, format: MaskFormat) -> Result<MaskSpec, MaskError> {
    let spec = match format {
        MaskFormat::Dense01 => {
            let rows: Vec<&str> = doc.lines().collect();
            let length = rows.len();
            let mut blocked = BTreeMap::new();
            for (i, line) in rows.iter().enumerate() {
                if line.len() != length {
                    return Err(MaskError::Decode(format!("row {i} has {} columns, expected {length}", line.len())));
                }
                let mut ranges: Vec<(usize, usize)> = Vec::new();
                for (j, c) in line.bytes().enumerate() {
                    match (c, j <= i) {
                        (b'1', true) | (b'0', false) => {}
                        (b'0', true) => match ranges.last_mut() {
                            Some((_, end)) if *end == j => *end = j + 1,
                            _ => ranges.push((j, j + 1)),
                        },
                        (b'1', false) => return Err(MaskError::Decode(format!("row {i} sees future column {j}"))),
                        _ => return Err(MaskError::Decode(format!("row {i} has non-binary character"))),
                    }
                }
                if !ranges.is_empty() {
                    blocked.insert(i, ranges);
                }
            }
            MaskSpec { length, blocked }
        }
        MaskFormat::BlockedRanges => {
            let parsed: BlockedDoc = serde_json::from_str(doc.trim()).map_err(|e| MaskError::Decode(e.to_string()))?;
            let blocked = parsed.rows.into_iter().filter(|r| !r.ranges.is_empty()).map(|r| (r.row, r.ranges)).collect();
            MaskSpec { length: parsed.length, blocked }
        }
    };
    spec.validate()?;
    Ok(spec)
}

/// Stable per-sample Bernoulli(ratio) decision keyed by `(seed, sample_id)`.
pub fn should_apply(sample_id: &str, ratio: f64, seed: u64) -> bool {
    if ratio <= 0.0 {
        return false;
    }
    if ratio >= 1.0 {
        return true;
    }
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(sample_id.as_bytes());
    let digest = hasher.finalize();
    let word = u64::from_le_bytes(digest[..8].try_into().expect("digest has 32 bytes"));
    // 53 high bits give a uniform double in [0, 1).
    ((word >> 11) as f64) * (1.0 / (1u64 << 53) as f64) < ratio
}

/// Default share of tool-use samples that get the decoupled mask.
pub const DEFAULT_APPLY_RATIO: f64 = 0.10;

#[cfg(test)]
mod tests {
    use super::*;

    fn seg(kind: SegmentKind, start: usize, end: usize, generated: bool) -> Segment {
        Segment { kind, start, end, generated }
    }

    pub(crate) fn worked_example() -> AnnotatedSequence {
        AnnotatedSequence {
            length: 14,
            segments: vec![
                seg(SegmentKind::GlobalVisual, 0, 4, false),
                seg(SegmentKind::Text, 4, 6, false),
                seg(SegmentKind::Text, 6, 8, true),
                seg(SegmentKind::LocalVisual, 8, 12, false),
                seg(SegmentKind::Text, 12, 14, true),
            ],
            phase_of: vec![
                PhaseSpan { start: 6, end: 8, phase: Phase::Tool },
                PhaseSpan { start: 12, end: 14, phase: Phase::Answer },
            ],
        }
    }

    #[test]
    fn worked_example_rows() {
        let m = build_mask(&worked_example()).unwrap();
        for row in [6, 7] {
            assert!((0..=row).all(|j| m.is_visible(row, j)), "row {row}");
        }
        for row in [12, 13] {
            assert!((0..4).all(|j| !m.is_visible(row, j)));
            assert!((8..12).all(|j| m.is_visible(row, j)));
            assert!((4..8).all(|j| m.is_visible(row, j)));
        }
        assert_eq!(m.blocked.keys().copied().collect::<Vec<_>>(), vec![12, 13]);
        assert_eq!(m.blocked[&12], vec![(0, 4)]);
    }

    #[test]
    fn pure_text_has_no_blocks() {
        let seq = AnnotatedSequence {
            length: 5,
            segments: vec![seg(SegmentKind::Text, 0, 2, false), seg(SegmentKind::Text, 2, 5, true)],
            phase_of: vec![PhaseSpan { start: 2, end: 5, phase: Phase::Answer }],
        };
        assert!(build_mask(&seq).unwrap().blocked.is_empty());
    }

    #[test]
    fn invariant_violations() {
        let mut s = worked_example();
        s.phase_of.pop();
        assert_eq!(build_mask(&s), Err(MaskError::UnlabeledPhase { index: 12 }));
        let mut s = worked_example();
        s.segments[1].end = 5;
        assert!(matches!(build_mask(&s), Err(MaskError::BadCoverage { .. })));
        let mut s = worked_example();
        s.segments[0].generated = true;
        assert!(matches!(build_mask(&s), Err(MaskError::GeneratedVisual { .. })));
        let mut s = worked_example();
        s.phase_of.push(PhaseSpan { start: 0, end: 1, phase: Phase::Tool });
        assert!(matches!(build_mask(&s), Err(MaskError::StrayPhase { .. })));
    }

    #[test]
    fn dense_export_goldens() {
        let dense = export_mask(&MaskSpec::empty(3), MaskFormat::Dense01);
        assert_eq!(dense, "100\n110\n111\n");
        let m = build_mask(&worked_example()).unwrap();
        let dense = export_mask(&m, MaskFormat::Dense01);
        let rows: Vec<&str> = dense.lines().collect();
        assert_eq!(rows[12], "00001111111110");
        assert_eq!(rows[13], "00001111111111");
        assert_eq!(rows[7], "11111111000000");
        assert_eq!(decode_mask(&dense, MaskFormat::Dense01).unwrap(), m);
    }

    #[test]
    fn blocked_ranges_roundtrip() {
        let m = build_mask(&worked_example()).unwrap();
        let doc = export_mask(&m, MaskFormat::BlockedRanges);
        assert_eq!(doc, "{\"length\":14,\"rows\":[{\"row\":12,\"ranges\":[[0,4]]},{\"row\":13,\"ranges\":[[0,4]]}]}\n");
        assert_eq!(decode_mask(&doc, MaskFormat::BlockedRanges).unwrap(), m);
        assert!(decode_mask("{\"length\":3,\"rows\":[{\"row\":1,\"ranges\":[[0,2]]}]}", MaskFormat::BlockedRanges).is_err());
    }

    #[test]
    fn should_apply_boundaries_and_rate() {
        for i in 0..200 {
            let id = format!("sample-{i}");
            assert!(!should_apply(&id, 0.0, 3));
            assert!(should_apply(&id, 1.0, 3));
        }
        let hits = (0..10_000).filter(|i| should_apply(&format!("id-{i}"), 0.1, 17)).count();
        assert!((900..=1100).contains(&hits), "{hits}");
        assert_eq!(should_apply("abc", 0.5, 9), should_apply("abc", 0.5, 9));
    }
}
