//! Training losses on logit, probability and attention matrices.
//!
//! Each loss has a graph builder (`*_node`) used by the model and a plain
//! matrix entry point returning the value, optionally with the gradient with
//! respect to the input logits. Logits may contain `-inf` (log of a zero
//! probability); all log-probabilities come from a stable log-softmax.

use std::collections::BTreeMap;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::segcore::{ClassId, FrameLabeling, Transcript};
use crate::tape::{Graph, NodeId, RowGroup};
use crate::tensor::Mat;

const STOCHASTIC_TOL: f64 = 1e-6;

/// Rows are probability vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMatrix(Mat);

impl ProbMatrix {
    pub fn new(values: Mat) -> Result<Self> {
        check_stochastic(&values)?;
        if values.data().iter().any(|&p| !(0.0..=1.0).contains(&p)) {
            return invalid("probabilities must lie in [0,1]");
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Mat {
        &self.0
    }

    /// Log-probabilities, usable wherever logits are expected.
    pub fn to_logits(&self) -> Mat {
        self.0.map(f64::ln)
    }
}

/// Row-stochastic frames-to-segments matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMatrix(Mat);

impl AttentionMatrix {
    pub fn new(values: Mat) -> Result<Self> {
        check_stochastic(&values)?;
        if values.data().iter().any(|&p| p < 0.0) {
            return invalid("attention weights must be non-negative");
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &Mat {
        &self.0
    }
}

fn check_stochastic(m: &Mat) -> Result<()> {
    if m.rows() == 0 || m.cols() == 0 {
        return invalid("matrix must be non-empty");
    }
    for r in 0..m.rows() {
        let s: f64 = m.row(r).iter().sum();
        if s.is_nan() || (s - 1.0).abs() > STOCHASTIC_TOL {
            return invalid(format!("row {r} sums to {s}, expected 1"));
        }
    }
    Ok(())
}

/// Rows grouped by their ground-truth class, one group per occurring class in
/// ascending class order.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupIndex {
    groups: Vec<RowGroup>,
}

impl GroupIndex {
    pub fn from_labels(labels: &[ClassId]) -> Self {
        let mut by_class: BTreeMap<ClassId, Vec<usize>> = BTreeMap::new();
        for (r, &c) in labels.iter().enumerate() {
            by_class.entry(c).or_default().push(r);
        }
        Self {
            groups: by_class
                .into_iter()
                .map(|(class, rows)| RowGroup { rows, class })
                .collect(),
        }
    }

    pub fn new(groups: Vec<RowGroup>) -> Result<Self> {
        if groups.is_empty() {
            return invalid("no groups");
        }
        if let Some(g) = groups.iter().find(|g| g.rows.is_empty()) {
            return invalid(format!("group for class {} is empty", g.class));
        }
        Ok(Self { groups })
    }

    pub fn groups(&self) -> &[RowGroup] {
        &self.groups
    }

    fn check(&self, m: &Mat) -> Result<()> {
        for g in &self.groups {
            if g.rows.is_empty() {
                return invalid(format!("group for class {} is empty", g.class));
            }
            if g.class >= m.cols() {
                return invalid(format!("class {} out of range", g.class));
            }
            if let Some(&r) = g.rows.iter().find(|&&r| r >= m.rows()) {
                return invalid(format!("row {r} out of range"));
            }
        }
        if self.groups.is_empty() {
            return invalid("no groups");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupVariant {
    /// `-mean_c log(mean_{r in c} p[r,c])`.
    AvgProbability,
    /// Average logits per group, then softmax cross-entropy.
    AvgLogit,
}

impl std::str::FromStr for GroupVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg-probability" => Ok(Self::AvgProbability),
            "avg-logit" => Ok(Self::AvgLogit),
            other => invalid(format!("unknown group variant {other:?}")),
        }
    }
}

impl std::fmt::Display for GroupVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::AvgProbability => "avg-probability",
            Self::AvgLogit => "avg-logit",
        })
    }
}

/// Mean negative log-softmax at the target column of each row.
pub fn cross_entropy_node(g: &mut Graph, logits: NodeId, targets: Rc<Vec<usize>>) -> NodeId {
    let lp = g.log_softmax_rows(logits);
    let picked = g.pick(lp, targets);
    let m = g.mean(picked);
    g.scale(m, -1.0)
}

pub fn group_ce_node(
    g: &mut Graph,
    logits: NodeId,
    groups: &GroupIndex,
    variant: GroupVariant,
) -> NodeId {
    let groups = Rc::new(groups.groups.clone());
    let per_group = match variant {
        GroupVariant::AvgProbability => {
            let lp = g.log_softmax_rows(logits);
            g.group_log_mean_exp(lp, groups)
        }
        GroupVariant::AvgLogit => {
            let classes = Rc::new(groups.iter().map(|grp| grp.class).collect());
            let avg = g.group_mean_rows(logits, groups);
            let lp = g.log_softmax_rows(avg);
            g.pick(lp, classes)
        }
    };
    let m = g.mean(per_group);
    g.scale(m, -1.0)
}

/// Cross-attention loss from attention logits (`T x N`, softmaxed per row).
pub fn cross_attention_logits_node(
    g: &mut Graph,
    scores: NodeId,
    targets: Rc<Vec<usize>>,
) -> NodeId {
    cross_entropy_node(g, scores, targets)
}

/// Cross-attention loss from an attention matrix that is already row-stochastic.
pub fn cross_attention_probs_node(g: &mut Graph, m: NodeId, targets: Rc<Vec<usize>>) -> NodeId {
    let lm = g.log(m);
    let picked = g.pick(lm, targets);
    let mean = g.mean(picked);
    g.scale(mean, -1.0)
}

fn check_targets(m: &Mat, targets: &[usize], what: &str) -> Result<()> {
    if m.rows() != targets.len() {
        return invalid(format!(
            "{what}: matrix has {} rows but {} targets",
            m.rows(),
            targets.len()
        ));
    }
    if let Some(&t) = targets.iter().find(|&&t| t >= m.cols()) {
        return invalid(format!(
            "{what}: target {t} out of range for {} columns",
            m.cols()
        ));
    }
    Ok(())
}

fn eval_with_grad(x: &Mat, build: impl FnOnce(&mut Graph, NodeId) -> NodeId) -> (f64, Mat) {
    let mut g = Graph::new();
    let input = g.leaf(x.clone());
    let out = build(&mut g, input);
    let grads = g.backward(out);
    (g.scalar(out), grads.get_or_zeros(input, x.shape()))
}

/// Frame-wise cross-entropy; returns the loss and its gradient w.r.t. logits.
pub fn frame_ce_with_grad(logits: &Mat, gt: &FrameLabeling) -> Result<(f64, Mat)> {
    check_targets(logits, gt.labels(), "frame cross-entropy")?;
    let targets = Rc::new(gt.labels().to_vec());
    Ok(eval_with_grad(logits, |g, x| {
        cross_entropy_node(g, x, targets)
    }))
}

pub fn frame_ce(logits: &Mat, gt: &FrameLabeling) -> Result<f64> {
    frame_ce_with_grad(logits, gt).map(|(v, _)| v)
}

pub fn segment_ce_with_grad(logits: &Mat, gt: &Transcript) -> Result<(f64, Mat)> {
    check_targets(logits, gt.actions(), "segment cross-entropy")?;
    let targets = Rc::new(gt.actions().to_vec());
    Ok(eval_with_grad(logits, |g, x| {
        cross_entropy_node(g, x, targets)
    }))
}

pub fn segment_ce(logits: &Mat, gt: &Transcript) -> Result<f64> {
    segment_ce_with_grad(logits, gt).map(|(v, _)| v)
}

pub fn group_ce_with_grad(
    logits: &Mat,
    groups: &GroupIndex,
    variant: GroupVariant,
) -> Result<(f64, Mat)> {
    groups.check(logits)?;
    Ok(eval_with_grad(logits, |g, x| {
        group_ce_node(g, x, groups, variant)
    }))
}

pub fn group_ce(logits: &Mat, groups: &GroupIndex, variant: GroupVariant) -> Result<f64> {
    group_ce_with_grad(logits, groups, variant).map(|(v, _)| v)
}

/// `-(1/T) sum_t log M[t, n_t]`.
pub fn cross_attention_loss(m: &AttentionMatrix, frame_to_segment: &[usize]) -> Result<f64> {
    check_targets(m.values(), frame_to_segment, "cross-attention loss")?;
    let targets = Rc::new(frame_to_segment.to_vec());
    Ok(eval_with_grad(m.values(), |g, x| cross_attention_probs_node(g, x, targets)).0)
}

/// Cross-attention loss of `softmax(scores)`, with the gradient w.r.t. scores.
pub fn cross_attention_loss_logits_with_grad(
    scores: &Mat,
    frame_to_segment: &[usize],
) -> Result<(f64, Mat)> {
    check_targets(scores, frame_to_segment, "cross-attention loss")?;
    let targets = Rc::new(frame_to_segment.to_vec());
    Ok(eval_with_grad(scores, |g, x| {
        cross_attention_logits_node(g, x, targets)
    }))
}

/// The five terms of the stage-1 objective.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub frame: f64,
    pub segment: f64,
    pub group_frame: f64,
    pub group_segment: f64,
    pub cross_attention: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub frame: f64,
    pub segment: f64,
    pub group_frame: f64,
    pub group_segment: f64,
    pub cross_attention: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            frame: 1.0,
            segment: 1.0,
            group_frame: 1.0,
            group_segment: 1.0,
            cross_attention: 1.0,
        }
    }
}

impl LossParts {
    fn as_array(&self) -> [f64; 5] {
        [
            self.frame,
            self.segment,
            self.group_frame,
            self.group_segment,
            self.cross_attention,
        ]
    }
}

pub fn total_loss(parts: &LossParts) -> Result<f64> {
    weighted_total_loss(parts, &LossWeights::default())
}

pub fn weighted_total_loss(parts: &LossParts, w: &LossWeights) -> Result<f64> {
    let vals = parts.as_array();
    if let Some(v) = vals.iter().find(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite loss term {v}")));
    }
    let ws = [
        w.frame,
        w.segment,
        w.group_frame,
        w.group_segment,
        w.cross_attention,
    ];
    Ok(vals.iter().zip(ws).map(|(v, w)| v * w).sum())
}

/// Segment durations as column sums of the assignment matrix.
pub fn durations_from_assignment(mbar: &AttentionMatrix) -> Vec<f64> {
    mbar.values().col_sums()
}

/// Rounds non-negative durations to integers summing to `total`, giving the
/// leftover frames to the largest fractional parts (lowest index on ties).
pub fn round_durations(durations: &[f64], total: usize) -> Result<Vec<usize>> {
    if durations.is_empty() {
        return invalid("no durations to round");
    }
    if durations.iter().any(|d| !d.is_finite() || *d < 0.0) {
        return invalid("durations must be finite and non-negative");
    }
    let sum: f64 = durations.iter().sum();
    if sum <= 0.0 {
        return invalid("durations sum to zero");
    }
    let scale = total as f64 / sum;
    let scaled: Vec<f64> = durations.iter().map(|d| d * scale).collect();
    let mut out: Vec<usize> = scaled.iter().map(|d| d.floor() as usize).collect();
    let assigned: usize = out.iter().sum();
    let mut order: Vec<usize> = (0..scaled.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = scaled[a] - scaled[a].floor();
        let fb = scaled[b] - scaled[b].floor();
        fb.total_cmp(&fa).then(a.cmp(&b))
    });
    let mut left = total.saturating_sub(assigned);
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        out[i] += 1;
        left -= 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_targets_give_zero() {
        let p =
            ProbMatrix::new(Mat::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]])).unwrap();
        let gt = FrameLabeling::new(vec![0, 1]).unwrap();
        assert_eq!(frame_ce(&p.to_logits(), &gt).unwrap(), 0.0);
        let tr = Transcript::new(vec![0, 1]).unwrap();
        assert_eq!(segment_ce(&p.to_logits(), &tr).unwrap(), 0.0);
        let groups = GroupIndex::from_labels(&[0, 1]);
        for v in [GroupVariant::AvgProbability, GroupVariant::AvgLogit] {
            assert_eq!(group_ce(&p.to_logits(), &groups, v).unwrap(), 0.0);
        }
    }

    #[test]
    fn uniform_gives_ln_c() {
        let c = 5;
        let logits = Mat::zeros(4, c);
        let gt = FrameLabeling::new(vec![0, 3, 4, 1]).unwrap();
        assert!((frame_ce(&logits, &gt).unwrap() - (c as f64).ln()).abs() < 1e-12);
        let groups = GroupIndex::from_labels(&[2, 2, 2, 2]);
        let v = group_ce(&logits, &groups, GroupVariant::AvgProbability).unwrap();
        assert!((v - (c as f64).ln()).abs() < 1e-12);
        let m = AttentionMatrix::new(Mat::filled(6, 3, 1.0 / 3.0)).unwrap();
        let ca = cross_attention_loss(&m, &[0, 0, 1, 1, 2, 2]).unwrap();
        assert!((ca - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn argument_errors() {
        let logits = Mat::zeros(3, 2);
        assert!(frame_ce(&logits, &FrameLabeling::new(vec![0, 1]).unwrap()).is_err());
        let m = AttentionMatrix::new(Mat::filled(2, 2, 0.5)).unwrap();
        assert!(cross_attention_loss(&m, &[0, 2]).is_err());
        assert!(GroupIndex::new(vec![RowGroup {
            rows: vec![],
            class: 0
        }])
        .is_err());
        assert!(ProbMatrix::new(Mat::filled(1, 2, 0.6)).is_err());
        assert!(AttentionMatrix::new(Mat::from_rows(&[vec![0.3, 0.3]])).is_err());
    }

    #[test]
    fn total_loss_sums_and_rejects_nan() {
        let zero = LossParts::default();
        assert_eq!(total_loss(&zero).unwrap(), 0.0);
        let one = LossParts {
            segment: 1.0,
            ..zero
        };
        assert_eq!(total_loss(&one).unwrap(), 1.0);
        let parts = LossParts {
            frame: 0.25,
            segment: 1.5,
            group_frame: 0.125,
            group_segment: 2.0,
            cross_attention: 0.0625,
        };
        assert_eq!(
            total_loss(&parts).unwrap(),
            0.25 + 1.5 + 0.125 + 2.0 + 0.0625
        );
        let bad = LossParts {
            frame: f64::NAN,
            ..zero
        };
        assert!(matches!(total_loss(&bad), Err(Error::Numeric(_))));
    }

    #[test]
    fn durations_examples() {
        let onehot = AttentionMatrix::new(Mat::from_rows(&[
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
            vec![0.0, 1.0],
        ]))
        .unwrap();
        assert_eq!(durations_from_assignment(&onehot), vec![3.0, 2.0]);
        let uniform = AttentionMatrix::new(Mat::filled(6, 3, 1.0 / 3.0)).unwrap();
        let u = durations_from_assignment(&uniform);
        assert_eq!(round_durations(&u, 6).unwrap(), vec![2, 2, 2]);
    }

    #[test]
    fn largest_remainder_rounding() {
        assert_eq!(round_durations(&[1.4, 1.4, 2.2], 5).unwrap(), vec![2, 1, 2]);
        assert_eq!(round_durations(&[0.0, 3.0], 3).unwrap(), vec![0, 3]);
        assert!(round_durations(&[], 3).is_err());
    }

    #[test]
    fn group_variant_parse() {
        assert_eq!(
            "avg-logit".parse::<GroupVariant>().unwrap(),
            GroupVariant::AvgLogit
        );
        assert_eq!(GroupVariant::AvgProbability.to_string(), "avg-probability");
        assert!("mean".parse::<GroupVariant>().is_err());
    }
}
