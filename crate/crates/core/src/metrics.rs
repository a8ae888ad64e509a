//! Segmental evaluation: frame-wise accuracy, Edit score and F1@k.
//!
//! F1 counts true positives with a maximum one-to-one matching between
//! predicted and ground-truth segments of the same class whose IoU reaches the
//! threshold. The widely used greedy rule (each prediction in order grabs its
//! best unmatched ground-truth segment) is available as
//! [`MatchingRule::Greedy`]; it can undercount when a prediction overlaps two
//! same-class ground-truth segments at a low threshold.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::segcore::{merge_repeats, ClassId, FrameLabeling, Segmentation, Transcript};

/// IoU thresholds reported by default.
pub const F1_THRESHOLDS: [f64; 3] = [0.10, 0.25, 0.50];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum MatchingRule {
    #[default]
    Optimal,
    Greedy,
}

pub fn frame_accuracy(pred: &FrameLabeling, gt: &FrameLabeling) -> Result<f64> {
    if pred.len() != gt.len() {
        return invalid(format!(
            "length mismatch: prediction has {} frames, ground truth {}",
            pred.len(),
            gt.len()
        ));
    }
    let hits = pred
        .labels()
        .iter()
        .zip(gt.labels())
        .filter(|(p, g)| p == g)
        .count();
    Ok(100.0 * hits as f64 / gt.len() as f64)
}

/// Levenshtein distance with unit costs.
pub fn levenshtein(a: &[ClassId], b: &[ClassId]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// `100 * (1 - lev(pred, gt) / max(|pred|, |gt|))`. Transcripts are compared
/// as given; merge them first for segmental Edit.
pub fn edit_score(pred: &Transcript, gt: &Transcript) -> f64 {
    let longest = pred.len().max(gt.len());
    if longest == 0 {
        return 100.0;
    }
    let d = levenshtein(pred.actions(), gt.actions());
    (100.0 * (1.0 - d as f64 / longest as f64)).clamp(0.0, 100.0)
}

/// Edit score between the merged transcripts of two segmentations.
pub fn segmental_edit(pred: &Segmentation, gt: &Segmentation) -> f64 {
    edit_score(&pred.transcript().merged(), &gt.transcript().merged())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct F1Counts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl F1Counts {
    pub fn f1(&self) -> f64 {
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        if precision + recall == 0.0 {
            0.0
        } else {
            100.0 * 2.0 * precision * recall / (precision + recall)
        }
    }

    pub fn add(&mut self, other: F1Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Half-open frame interval of a segment with its class.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Interval {
    pub action: ClassId,
    pub start: usize,
    pub end: usize,
}

/// Intervals of the merged segmentation, optionally dropping one class.
pub fn intervals(seg: &Segmentation, ignore: Option<ClassId>) -> Vec<Interval> {
    let merged = merge_repeats(seg);
    let mut start = 0;
    let mut out = Vec::with_capacity(merged.len());
    for s in merged.segments() {
        if Some(s.action) != ignore {
            out.push(Interval {
                action: s.action,
                start,
                end: start + s.duration,
            });
        }
        start += s.duration;
    }
    out
}

pub fn iou(a: &Interval, b: &Interval) -> f64 {
    let inter = a.end.min(b.end).saturating_sub(a.start.max(b.start));
    let union = a.end.max(b.end) - a.start.min(b.start);
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// True-positive / false-positive / false-negative counts at one IoU threshold.
pub fn f1_counts(
    pred: &[Interval],
    gt: &[Interval],
    threshold: f64,
    rule: MatchingRule,
) -> F1Counts {
    let ok = |p: &Interval, g: &Interval| p.action == g.action && iou(p, g) >= threshold;
    let tp = match rule {
        MatchingRule::Greedy => {
            let mut used = vec![false; gt.len()];
            let mut tp = 0;
            for p in pred {
                let mut best: Option<(usize, f64)> = None;
                for (j, g) in gt.iter().enumerate() {
                    if used[j] || !ok(p, g) {
                        continue;
                    }
                    let v = iou(p, g);
                    if best.is_none_or(|(_, b)| v > b) {
                        best = Some((j, v));
                    }
                }
                if let Some((j, _)) = best {
                    used[j] = true;
                    tp += 1;
                }
            }
            tp
        }
        MatchingRule::Optimal => {
            let adj: Vec<Vec<usize>> = pred
                .iter()
                .map(|p| (0..gt.len()).filter(|&j| ok(p, &gt[j])).collect())
                .collect();
            max_bipartite_matching(&adj, gt.len())
        }
    };
    F1Counts {
        tp,
        fp: pred.len() - tp,
        fn_: gt.len() - tp,
    }
}

/// Kuhn's augmenting-path algorithm; `adj[i]` lists right vertices of left `i`.
fn max_bipartite_matching(adj: &[Vec<usize>], right: usize) -> usize {
    fn augment(
        u: usize,
        adj: &[Vec<usize>],
        seen: &mut [bool],
        owner: &mut [Option<usize>],
    ) -> bool {
        for &v in &adj[u] {
            if seen[v] {
                continue;
            }
            seen[v] = true;
            if owner[v].is_none_or(|w| augment(w, adj, seen, owner)) {
                owner[v] = Some(u);
                return true;
            }
        }
        false
    }

    let mut owner = vec![None; right];
    let mut count = 0;
    for u in 0..adj.len() {
        let mut seen = vec![false; right];
        if augment(u, adj, &mut seen, &mut owner) {
            count += 1;
        }
    }
    count
}

/// Segmental F1 at one IoU threshold, as a percentage.
pub fn f1_at(pred: &Segmentation, gt: &Segmentation, threshold: f64) -> Result<f64> {
    f1_at_with(pred, gt, threshold, MatchingRule::default(), None)
}

pub fn f1_at_with(
    pred: &Segmentation,
    gt: &Segmentation,
    threshold: f64,
    rule: MatchingRule,
    ignore: Option<ClassId>,
) -> Result<f64> {
    check_threshold(threshold)?;
    check_same_length(pred, gt)?;
    let counts = f1_counts(
        &intervals(pred, ignore),
        &intervals(gt, ignore),
        threshold,
        rule,
    );
    Ok(counts.f1())
}

fn check_threshold(threshold: f64) -> Result<()> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return invalid(format!("IoU threshold must lie in (0,1), got {threshold}"));
    }
    Ok(())
}

fn check_same_length(pred: &Segmentation, gt: &Segmentation) -> Result<()> {
    if pred.total_frames() != gt.total_frames() {
        return invalid(format!(
            "prediction covers {} frames, ground truth {}",
            pred.total_frames(),
            gt.total_frames()
        ));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EvalOptions {
    pub rule: MatchingRule,
    /// Class left out of all metrics, typically background.
    pub ignore: Option<ClassId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub acc: f64,
    pub edit: f64,
    /// Keyed by threshold in percent: 10, 25, 50.
    pub f1: BTreeMap<u32, f64>,
}

impl MetricReport {
    pub fn f1_at(&self, percent: u32) -> Option<f64> {
        self.f1.get(&percent).copied()
    }

    /// Flat `key=value` lines, rounded to two decimals.
    pub fn to_key_value(&self) -> String {
        let mut s = format!("acc={:.2}\nedit={:.2}\n", self.acc, self.edit);
        for (k, v) in &self.f1 {
            s.push_str(&format!("f1@{k}={v:.2}\n"));
        }
        s
    }

    pub fn to_json(&self) -> String {
        let mut f1 = serde_json::Map::new();
        for (k, v) in &self.f1 {
            f1.insert(k.to_string(), json_2dp(*v));
        }
        let value = serde_json::json!({
            "acc": json_2dp(self.acc),
            "edit": json_2dp(self.edit),
            "f1": f1,
        });
        serde_json::to_string_pretty(&value).expect("report serializes") + "\n"
    }
}

fn json_2dp(v: f64) -> serde_json::Value {
    let rounded: f64 = format!("{v:.2}").parse().expect("formatted float parses");
    serde_json::json!(rounded)
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Acc {:.2}  Edit {:.2}", self.acc, self.edit)?;
        for (k, v) in &self.f1 {
            write!(f, "  F1@{k} {v:.2}")?;
        }
        Ok(())
    }
}

fn percent_key(threshold: f64) -> u32 {
    (threshold * 100.0).round() as u32
}

/// All metrics for a single video.
pub fn evaluate(pred: &Segmentation, gt: &Segmentation, opts: EvalOptions) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::new(opts);
    acc.add(pred, gt)?;
    Ok(acc.report())
}

/// Dataset-level aggregation: accuracy weighted by frames, Edit averaged per
/// video, F1 from TP/FP/FN summed over videos.
#[derive(Debug, Clone)]
pub struct MetricAccumulator {
    opts: EvalOptions,
    correct: usize,
    frames: usize,
    edit_sum: f64,
    videos: usize,
    counts: [F1Counts; 3],
}

impl MetricAccumulator {
    pub fn new(opts: EvalOptions) -> Self {
        Self {
            opts,
            correct: 0,
            frames: 0,
            edit_sum: 0.0,
            videos: 0,
            counts: [F1Counts::default(); 3],
        }
    }

    pub fn add(&mut self, pred: &Segmentation, gt: &Segmentation) -> Result<()> {
        check_same_length(pred, gt)?;
        let pf = crate::segcore::to_frames(pred);
        let gf = crate::segcore::to_frames(gt);
        for (p, g) in pf.labels().iter().zip(gf.labels()) {
            if Some(*g) == self.opts.ignore {
                continue;
            }
            self.frames += 1;
            self.correct += usize::from(p == g);
        }
        let pi = intervals(pred, self.opts.ignore);
        let gi = intervals(gt, self.opts.ignore);
        let pt = Transcript::new_unchecked(pi.iter().map(|i| i.action).collect());
        let gtr = Transcript::new_unchecked(gi.iter().map(|i| i.action).collect());
        self.edit_sum += edit_score(&pt, &gtr);
        self.videos += 1;
        for (slot, &thr) in self.counts.iter_mut().zip(F1_THRESHOLDS.iter()) {
            slot.add(f1_counts(&pi, &gi, thr, self.opts.rule));
        }
        Ok(())
    }

    pub fn videos(&self) -> usize {
        self.videos
    }

    pub fn report(&self) -> MetricReport {
        let f1 = F1_THRESHOLDS
            .iter()
            .zip(self.counts.iter())
            .map(|(&thr, c)| (percent_key(thr), c.f1()))
            .collect();
        MetricReport {
            acc: 100.0 * ratio(self.correct, self.frames),
            edit: if self.videos == 0 {
                0.0
            } else {
                self.edit_sum / self.videos as f64
            },
            f1,
        }
    }
}
