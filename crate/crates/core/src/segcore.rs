//! Segmentation data model.
//!
//! A video labeling has two equivalent forms: one class id per frame
//! ([`FrameLabeling`]) and an ordered list of `(action, duration)` pairs
//! ([`Segmentation`]). [`to_segments`] and [`to_frames`] convert between them.
//! Durations are integer frame counts; callers normalize by `T` where a loss or
//! an inference routine needs relative durations.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Mat;

/// Dense class index, assigned by a [`ClassCatalog`].
pub type ClassId = usize;

/// Default split fraction for Breakfast-style training runs.
pub const DEFAULT_SPLIT_FRACTION: f64 = 0.17;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameLabeling {
    labels: Vec<ClassId>,
}

impl FrameLabeling {
    pub fn new(labels: Vec<ClassId>) -> Result<Self> {
        if labels.is_empty() {
            return invalid("frame labeling must contain at least one frame");
        }
        Ok(Self { labels })
    }

    /// Like [`FrameLabeling::new`], additionally checking every label against
    /// the number of classes.
    pub fn with_classes(labels: Vec<ClassId>, num_classes: usize) -> Result<Self> {
        if let Some(&bad) = labels.iter().find(|&&c| c >= num_classes) {
            return invalid(format!(
                "label {bad} out of range for {num_classes} classes"
            ));
        }
        Self::new(labels)
    }

    pub fn labels(&self) -> &[ClassId] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn into_inner(self) -> Vec<ClassId> {
        self.labels
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Segment {
    pub action: ClassId,
    pub duration: usize,
}

impl Segment {
    pub fn new(action: ClassId, duration: usize) -> Self {
        Self { action, duration }
    }
}

/// Non-empty ordered list of segments with positive durations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segmentation {
    segments: Vec<Segment>,
    total_frames: usize,
}

impl Segmentation {
    pub fn new(segments: Vec<Segment>) -> Result<Self> {
        if segments.is_empty() {
            return invalid("segmentation must contain at least one segment");
        }
        if let Some(i) = segments.iter().position(|s| s.duration == 0) {
            return invalid(format!("segment {i} has zero duration"));
        }
        let total_frames = segments.iter().map(|s| s.duration).sum();
        Ok(Self {
            segments,
            total_frames,
        })
    }

    /// Builds a segmentation from `(action, duration)` pairs.
    pub fn from_pairs(pairs: &[(ClassId, usize)]) -> Result<Self> {
        Self::new(pairs.iter().map(|&(a, d)| Segment::new(a, d)).collect())
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    pub fn total_frames(&self) -> usize {
        self.total_frames
    }

    pub fn durations(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.duration).collect()
    }

    /// The action sequence, without merging repeats.
    pub fn transcript(&self) -> Transcript {
        Transcript {
            actions: self.segments.iter().map(|s| s.action).collect(),
        }
    }

    /// Start frame of each segment followed by `total_frames`.
    pub fn boundaries(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.segments.len() + 1);
        let mut acc = 0;
        out.push(0);
        for s in &self.segments {
            acc += s.duration;
            out.push(acc);
        }
        out
    }

    /// Index of the segment containing each frame.
    pub fn frame_to_segment(&self) -> Vec<usize> {
        self.segments
            .iter()
            .enumerate()
            .flat_map(|(i, s)| std::iter::repeat_n(i, s.duration))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Transcript {
    actions: Vec<ClassId>,
}

impl Transcript {
    pub fn new(actions: Vec<ClassId>) -> Result<Self> {
        if actions.is_empty() {
            return invalid("transcript must contain at least one action");
        }
        Ok(Self { actions })
    }

    /// A transcript that may be empty, e.g. a decoder that emitted EOS first.
    /// Only the metrics accept it.
    pub fn new_unchecked(actions: Vec<ClassId>) -> Self {
        Self { actions }
    }

    pub fn actions(&self) -> &[ClassId] {
        &self.actions
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Collapses adjacent repeats: `(A,B,B,C,A,A,A)` becomes `(A,B,C,A)`.
    pub fn merged(&self) -> Transcript {
        let mut actions = self.actions.clone();
        actions.dedup();
        Transcript { actions }
    }
}

/// Class names indexed by dense id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCatalog {
    names: Vec<String>,
    background_id: Option<ClassId>,
}

impl ClassCatalog {
    pub fn new(names: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        for n in &names {
            if n.is_empty() || n.contains(['\t', '\n', '\r']) {
                return invalid(format!("invalid class name {n:?}"));
            }
            if !seen.insert(n.as_str()) {
                return invalid(format!("duplicate class name {n:?}"));
            }
        }
        if names.is_empty() {
            return invalid("class catalog is empty");
        }
        Ok(Self {
            names,
            background_id: None,
        })
    }

    pub fn with_background(mut self, id: ClassId) -> Result<Self> {
        if id >= self.names.len() {
            return invalid(format!("background id {id} out of range"));
        }
        self.background_id = Some(id);
        Ok(self)
    }

    /// Catalog `c0, c1, ...` for generated data.
    pub fn numbered(num_classes: usize) -> Self {
        Self {
            names: (0..num_classes).map(|i| format!("c{i}")).collect(),
            background_id: None,
        }
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn background_id(&self) -> Option<ClassId> {
        self.background_id
    }

    pub fn name(&self, id: ClassId) -> Option<&str> {
        self.names.get(id).map(String::as_str)
    }

    pub fn id(&self, name: &str) -> Option<ClassId> {
        self.names.iter().position(|n| n == name)
    }
}

/// `T x d` per-frame input features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence(Mat);

impl FeatureSequence {
    pub fn new(values: Mat) -> Result<Self> {
        if values.rows() == 0 || values.cols() == 0 {
            return invalid("feature sequence must have at least one frame and one dimension");
        }
        if !values.is_finite() {
            return invalid("feature sequence contains non-finite values");
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Mat {
        &self.0
    }

    pub fn into_inner(self) -> Mat {
        self.0
    }

    pub fn frames(&self) -> usize {
        self.0.rows()
    }

    pub fn dim(&self) -> usize {
        self.0.cols()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.0.row(t)
    }
}

/// Run-length encodes a frame labeling.
pub fn to_segments(labels: &FrameLabeling) -> Segmentation {
    let mut segments: Vec<Segment> = Vec::new();
    for &c in labels.labels() {
        match segments.last_mut() {
            Some(last) if last.action == c => last.duration += 1,
            _ => segments.push(Segment::new(c, 1)),
        }
    }
    Segmentation {
        total_frames: labels.len(),
        segments,
    }
}

pub fn to_frames(seg: &Segmentation) -> FrameLabeling {
    let labels = seg
        .segments
        .iter()
        .flat_map(|s| std::iter::repeat_n(s.action, s.duration))
        .collect();
    FrameLabeling { labels }
}

/// Splits every segment longer than `ceil(max_fraction * T)` frames into the
/// smallest number of near-equal pieces that fit under that limit.
pub fn split_segments(seg: &Segmentation, max_fraction: f64) -> Result<Segmentation> {
    if max_fraction.is_nan() || max_fraction <= 0.0 {
        return invalid(format!(
            "split fraction must be positive, got {max_fraction}"
        ));
    }
    let limit = split_limit(seg.total_frames, max_fraction);
    let mut segments = Vec::with_capacity(seg.len());
    for s in &seg.segments {
        let pieces = s.duration.div_ceil(limit);
        let base = s.duration / pieces;
        let extra = s.duration % pieces;
        for p in 0..pieces {
            segments.push(Segment::new(s.action, base + usize::from(p < extra)));
        }
    }
    Ok(Segmentation {
        segments,
        total_frames: seg.total_frames,
    })
}

/// Maximum piece length used by [`split_segments`].
pub fn split_limit(total_frames: usize, max_fraction: f64) -> usize {
    // The epsilon keeps 0.17 * 200 from rounding up to 35.
    let raw = (max_fraction * total_frames as f64 - 1e-9).ceil();
    (raw.max(1.0) as usize).min(total_frames.max(1))
}

/// Merges adjacent segments with the same action, summing durations.
pub fn merge_repeats(seg: &Segmentation) -> Segmentation {
    let mut segments: Vec<Segment> = Vec::with_capacity(seg.len());
    for s in &seg.segments {
        match segments.last_mut() {
            Some(last) if last.action == s.action => last.duration += s.duration,
            _ => segments.push(*s),
        }
    }
    Segmentation {
        segments,
        total_frames: seg.total_frames,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: ClassId = 0;
    const B: ClassId = 1;
    const C: ClassId = 2;

    fn seg(pairs: &[(ClassId, usize)]) -> Segmentation {
        Segmentation::from_pairs(pairs).unwrap()
    }

    #[test]
    fn rle_examples() {
        let x = FrameLabeling::new(vec![A, A, B, B, B, A]).unwrap();
        assert_eq!(to_segments(&x), seg(&[(A, 2), (B, 3), (A, 1)]));
        let one = FrameLabeling::new(vec![A]).unwrap();
        assert_eq!(to_segments(&one), seg(&[(A, 1)]));
        assert!(FrameLabeling::new(vec![]).is_err());
    }

    #[test]
    fn expand_examples() {
        assert_eq!(to_frames(&seg(&[(A, 2), (B, 1)])).labels(), &[A, A, B]);
        assert_eq!(to_frames(&seg(&[(A, 1)])).labels(), &[A]);
    }

    #[test]
    fn invalid_segmentations() {
        assert!(Segmentation::new(vec![]).is_err());
        assert!(Segmentation::from_pairs(&[(A, 2), (B, 0)]).is_err());
        assert!(FrameLabeling::with_classes(vec![0, 3], 3).is_err());
    }

    #[test]
    fn split_forced_even() {
        let s = seg(&[(A, 10)]);
        assert_eq!(split_segments(&s, 0.5).unwrap(), seg(&[(A, 5), (A, 5)]));
    }

    #[test]
    fn split_uneven_piece_sizes_differ_by_one() {
        let s = seg(&[(A, 11), (B, 2), (C, 7)]);
        // limit = ceil(0.2 * 20) = 4
        let out = split_segments(&s, 0.2).unwrap();
        assert_eq!(out, seg(&[(A, 4), (A, 4), (A, 3), (B, 2), (C, 4), (C, 3)]));
    }

    #[test]
    fn split_noop_when_short() {
        let s = seg(&[(A, 3), (B, 3), (C, 4)]);
        assert_eq!(split_segments(&s, 0.5).unwrap(), s);
    }

    #[test]
    fn split_rejects_nonpositive() {
        let s = seg(&[(A, 3)]);
        assert!(split_segments(&s, 0.0).is_err());
        assert!(split_segments(&s, -0.1).is_err());
        assert!(split_segments(&s, f64::NAN).is_err());
    }

    #[test]
    fn split_limit_default_fraction() {
        assert_eq!(split_limit(200, DEFAULT_SPLIT_FRACTION), 34);
        assert_eq!(split_limit(100, 0.17), 17);
        assert_eq!(split_limit(5, 0.01), 1);
    }

    #[test]
    fn merge_example() {
        let s = seg(&[(A, 1), (B, 2), (B, 3), (C, 1), (A, 2)]);
        let m = merge_repeats(&s);
        assert_eq!(m, seg(&[(A, 1), (B, 5), (C, 1), (A, 2)]));
        assert_eq!(merge_repeats(&m), m);
    }

    #[test]
    fn transcript_merge() {
        let t = Transcript::new(vec![A, B, B, C, A, A, A]).unwrap();
        assert_eq!(t.merged().actions(), &[A, B, C, A]);
    }

    #[test]
    fn frame_to_segment_and_boundaries() {
        let s = seg(&[(A, 2), (B, 1), (A, 3)]);
        assert_eq!(s.frame_to_segment(), vec![0, 0, 1, 2, 2, 2]);
        assert_eq!(s.boundaries(), vec![0, 2, 3, 6]);
    }

    #[test]
    fn catalog_checks() {
        let c = ClassCatalog::new(vec!["a".into(), "b".into()]).unwrap();
        assert_eq!(c.id("b"), Some(1));
        assert!(ClassCatalog::new(vec!["a".into(), "a".into()]).is_err());
        assert!(c.clone().with_background(2).is_err());
        assert_eq!(c.with_background(1).unwrap().background_id(), Some(1));
    }
}
