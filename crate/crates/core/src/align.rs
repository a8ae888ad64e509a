//! Transcript-constrained duration inference.
//!
//! Both aligners take per-frame class log-probabilities and a transcript and
//! return a segmentation whose merged transcript is the given one.
//!
//! [`viterbi_align`] solves the problem exactly by dynamic programming over
//! `(frame block, segment index)` states, maximizing the summed log-probability
//! of the class assigned to each frame. No length model is used.
//!
//! [`fifa_align`] relaxes the problem: segment lengths are a softmax over free
//! parameters, segment membership is a difference of two sigmoids of
//! normalized time with a fixed sharpness, and the energy
//! `-sum_t sum_i mask[t,i] * logp[t, a_i]` is minimized by gradient descent
//! with the analytic gradient. A step that would raise the energy is retried
//! with half the step size.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::losses::round_durations;
use crate::segcore::{to_segments, ClassId, FrameLabeling, Segment, Segmentation, Transcript};
use crate::tape::{sigmoid, PROB_FLOOR};
use crate::tensor::Mat;

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentProblem {
    log_probs: Mat,
    transcript: Transcript,
    stride: usize,
}

impl AlignmentProblem {
    pub fn new(log_probs: Mat, transcript: Transcript, stride: usize) -> Result<Self> {
        if stride == 0 {
            return invalid("sampling stride must be at least 1");
        }
        if log_probs.rows() == 0 {
            return invalid("no frames to align");
        }
        if transcript.is_empty() {
            return invalid("empty transcript");
        }
        if let Some(&c) = transcript
            .actions()
            .iter()
            .find(|&&c| c >= log_probs.cols())
        {
            return invalid(format!("transcript class {c} has no probability column"));
        }
        if log_probs
            .data()
            .iter()
            .any(|v| v.is_nan() || *v == f64::INFINITY)
        {
            return Err(Error::Numeric(
                "log-probabilities contain NaN or +inf".into(),
            ));
        }
        let blocks = log_probs.rows().div_ceil(stride);
        if transcript.len() > blocks {
            return Err(Error::Infeasible(format!(
                "{} segments but only {blocks} frame blocks at stride {stride}",
                transcript.len()
            )));
        }
        Ok(Self {
            log_probs,
            transcript,
            stride,
        })
    }

    pub fn log_probs(&self) -> &Mat {
        &self.log_probs
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn frames(&self) -> usize {
        self.log_probs.rows()
    }

    pub fn stride(&self) -> usize {
        self.stride
    }
}

/// `sum_t logp[t, class(t)]`, summed in frame order.
pub fn alignment_score(log_probs: &Mat, seg: &Segmentation) -> f64 {
    let mut t = 0;
    let mut total = 0.0;
    for s in seg.segments() {
        for _ in 0..s.duration {
            total += log_probs[(t, s.action)];
            t += 1;
        }
    }
    total
}

/// Exact transcript-constrained alignment.
///
/// With `stride > 1` the DP runs over blocks of `stride` consecutive frames
/// (log-probabilities summed per block) and every frame of a block takes the
/// block's segment. Equal scores prefer the earlier boundary.
pub fn viterbi_align(p: &AlignmentProblem) -> Result<Segmentation> {
    let t_len = p.frames();
    let actions = p.transcript.actions();
    let n = actions.len();
    let blocks = t_len.div_ceil(p.stride);

    let block_score = |b: usize, k: usize| -> f64 {
        let lo = b * p.stride;
        let hi = ((b + 1) * p.stride).min(t_len);
        (lo..hi).map(|t| p.log_probs[(t, actions[k])]).sum()
    };

    // State (b, k) is reachable iff k <= b and n - 1 - k <= blocks - 1 - b.
    let valid = |b: usize, k: usize| k <= b && n - 1 - k <= blocks - 1 - b;
    let mut score = vec![f64::NEG_INFINITY; n];
    let mut advanced = vec![false; blocks * n];
    score[0] = block_score(0, 0);
    for b in 1..blocks {
        let mut next = vec![f64::NEG_INFINITY; n];
        for k in 0..n {
            if !valid(b, k) {
                continue;
            }
            let stay = if valid(b - 1, k) {
                Some(score[k])
            } else {
                None
            };
            let adv = if k > 0 && valid(b - 1, k - 1) {
                Some(score[k - 1])
            } else {
                None
            };
            let (best, took_adv) = match (stay, adv) {
                (Some(s), Some(a)) => {
                    if a > s {
                        (a, true)
                    } else {
                        (s, false)
                    }
                }
                (Some(s), None) => (s, false),
                (None, Some(a)) => (a, true),
                (None, None) => unreachable!("valid state without predecessor"),
            };
            next[k] = best + block_score(b, k);
            advanced[b * n + k] = took_adv;
        }
        score = next;
    }

    let mut block_len = vec![0usize; n];
    let mut k = n - 1;
    for b in (0..blocks).rev() {
        block_len[k] += 1;
        if b > 0 && advanced[b * n + k] {
            k -= 1;
        }
    }
    let mut segments = Vec::with_capacity(n);
    let mut start_block = 0;
    for (k, &len) in block_len.iter().enumerate() {
        let lo = start_block * p.stride;
        let hi = ((start_block + len) * p.stride).min(t_len);
        segments.push(Segment::new(actions[k], hi - lo));
        start_block += len;
    }
    Segmentation::new(segments)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FifaConfig {
    pub epochs: usize,
    pub sharpness: f64,
    pub step_size: f64,
    /// Initial segment lengths (any positive scale); uniform when absent.
    pub init_durations: Option<Vec<f64>>,
}

impl Default for FifaConfig {
    fn default() -> Self {
        Self {
            epochs: 3000,
            sharpness: 80.0,
            step_size: 0.01,
            init_durations: None,
        }
    }
}

impl FifaConfig {
    fn validate(&self, n: usize) -> Result<()> {
        if self.epochs == 0
            || self.sharpness.is_nan()
            || self.sharpness <= 0.0
            || self.step_size.is_nan()
            || self.step_size <= 0.0
        {
            return invalid("FIFA epochs, sharpness and step size must be positive");
        }
        if let Some(init) = &self.init_durations {
            if init.len() != n {
                return invalid(format!("{} initial durations for {n} segments", init.len()));
            }
            if init.iter().any(|d| !d.is_finite() || *d <= 0.0) {
                return invalid("initial durations must be positive");
            }
        }
        Ok(())
    }
}

/// Energy after every accepted step, starting with the initial energy.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FifaTrace {
    pub energies: Vec<f64>,
    pub halvings: usize,
}

/// Smooth relaxation of the alignment energy over segment-length parameters.
pub struct FifaEnergy<'a> {
    log_probs: Mat,
    actions: &'a [ClassId],
    sharpness: f64,
}

impl<'a> FifaEnergy<'a> {
    pub fn new(p: &'a AlignmentProblem, sharpness: f64) -> Self {
        let floor = PROB_FLOOR.ln();
        Self {
            log_probs: p.log_probs.map(|v| v.max(floor)),
            actions: p.transcript.actions(),
            sharpness,
        }
    }

    fn frames(&self) -> usize {
        self.log_probs.rows()
    }

    fn center(&self, t: usize) -> f64 {
        (t as f64 + 0.5) / self.frames() as f64
    }

    /// Normalized lengths (softmax of the parameters).
    pub fn lengths(params: &[f64]) -> Vec<f64> {
        let m = params.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = params.iter().map(|x| (x - m).exp()).collect();
        let z: f64 = e.iter().sum();
        e.into_iter().map(|x| x / z).collect()
    }

    /// Soft membership of frame center `c` in segment `i` given cumulative
    /// boundaries; the first segment has no left edge and the last no right.
    fn membership(&self, c: f64, i: usize, edges: &[f64]) -> f64 {
        let n = self.actions.len();
        let k = self.sharpness;
        let left = if i == 0 {
            1.0
        } else {
            sigmoid(k * (c - edges[i]))
        };
        let right = if i + 1 == n {
            0.0
        } else {
            sigmoid(k * (c - edges[i + 1]))
        };
        left - right
    }

    fn edges(lengths: &[f64]) -> Vec<f64> {
        let mut edges = Vec::with_capacity(lengths.len() + 1);
        let mut acc = 0.0;
        edges.push(0.0);
        for l in lengths {
            acc += l;
            edges.push(acc);
        }
        edges
    }

    pub fn energy(&self, params: &[f64]) -> f64 {
        let edges = Self::edges(&Self::lengths(params));
        let mut e = 0.0;
        for t in 0..self.frames() {
            let c = self.center(t);
            for (i, &a) in self.actions.iter().enumerate() {
                e -= self.membership(c, i, &edges) * self.log_probs[(t, a)];
            }
        }
        e
    }

    /// Energy and its gradient with respect to the parameters.
    pub fn energy_and_grad(&self, params: &[f64]) -> (f64, Vec<f64>) {
        let n = self.actions.len();
        let k = self.sharpness;
        let lengths = Self::lengths(params);
        let edges = Self::edges(&lengths);
        let energy = self.energy(params);

        // Interior edge j (1..n) separates segment j-1 and segment j:
        // mask[t, j-1] has -sigmoid(k(c - e_j)), mask[t, j] has +sigmoid(k(c - e_j)).
        let mut d_edge = vec![0.0; n + 1];
        for (j, d) in d_edge.iter_mut().enumerate().take(n).skip(1) {
            let (prev, next) = (self.actions[j - 1], self.actions[j]);
            let mut acc = 0.0;
            for t in 0..self.frames() {
                let s = sigmoid(k * (self.center(t) - edges[j]));
                let ds = -k * s * (1.0 - s);
                // dE/de_j = -sum_t (dmask_j - dmask_{j-1}) * logp
                acc -= ds * (self.log_probs[(t, next)] - self.log_probs[(t, prev)]);
            }
            *d = acc;
        }
        // e_j = sum_{i<j} l_i, so dE/dl_i = sum_{j>i} dE/de_j.
        let mut d_len = vec![0.0; n];
        let mut running = 0.0;
        for i in (0..n).rev() {
            running += d_edge[i + 1];
            d_len[i] = running;
        }
        let mean: f64 = lengths.iter().zip(&d_len).map(|(l, g)| l * g).sum();
        let grad = lengths
            .iter()
            .zip(&d_len)
            .map(|(l, g)| l * (g - mean))
            .collect();
        (energy, grad)
    }
}

/// Rounds normalized lengths to frame counts summing to `frames` with every
/// segment keeping at least one frame.
pub fn lengths_to_durations(lengths: &[f64], frames: usize) -> Result<Vec<usize>> {
    let n = lengths.len();
    if n > frames {
        return Err(Error::Infeasible(format!(
            "{n} segments for {frames} frames"
        )));
    }
    let spare: Vec<f64> = lengths
        .iter()
        .map(|l| (l * frames as f64 - 1.0).max(0.0))
        .collect();
    let extra = if frames == n {
        vec![0; n]
    } else if spare.iter().sum::<f64>() > 0.0 {
        round_durations(&spare, frames - n)?
    } else {
        round_durations(&vec![1.0; n], frames - n)?
    };
    Ok(extra.into_iter().map(|e| e + 1).collect())
}

pub fn fifa_align(p: &AlignmentProblem, cfg: &FifaConfig) -> Result<Segmentation> {
    fifa_align_traced(p, cfg).map(|(s, _)| s)
}

pub fn fifa_align_traced(
    p: &AlignmentProblem,
    cfg: &FifaConfig,
) -> Result<(Segmentation, FifaTrace)> {
    let n = p.transcript.len();
    cfg.validate(n)?;
    if n > p.frames() {
        return Err(Error::Infeasible(format!(
            "{n} segments for {} frames",
            p.frames()
        )));
    }
    let objective = FifaEnergy::new(p, cfg.sharpness);
    let mut params: Vec<f64> = match &cfg.init_durations {
        Some(d) => d.iter().map(|x| x.ln()).collect(),
        None => vec![0.0; n],
    };
    let mut step = cfg.step_size;
    let mut trace = FifaTrace::default();
    let (mut energy, mut grad) = objective.energy_and_grad(&params);
    check_finite(energy)?;
    trace.energies.push(energy);

    if n > 1 {
        'epochs: for _ in 0..cfg.epochs {
            loop {
                let cand: Vec<f64> = params
                    .iter()
                    .zip(&grad)
                    .map(|(x, g)| x - step * g)
                    .collect();
                let (e, g) = objective.energy_and_grad(&cand);
                check_finite(e)?;
                if e <= energy {
                    params = cand;
                    energy = e;
                    grad = g;
                    trace.energies.push(energy);
                    break;
                }
                step *= 0.5;
                trace.halvings += 1;
                if step < cfg.step_size * 1e-12 {
                    break 'epochs;
                }
            }
        }
    }

    let lengths = FifaEnergy::lengths(&params);
    let durations = lengths_to_durations(&lengths, p.frames())?;
    let seg = Segmentation::new(
        p.transcript
            .actions()
            .iter()
            .zip(durations)
            .map(|(&a, d)| Segment::new(a, d))
            .collect(),
    )?;
    Ok((seg, trace))
}

fn check_finite(e: f64) -> Result<()> {
    if e.is_finite() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("FIFA energy is {e}")))
    }
}

/// Argmax class per frame (lowest index on ties), run-length merged.
pub fn extract_transcript(frame_logits: &Mat) -> Result<Transcript> {
    let labels: Vec<ClassId> = (0..frame_logits.rows())
        .map(|t| frame_logits.argmax_row(t))
        .collect();
    let frames = FrameLabeling::new(labels)?;
    Ok(to_segments(&frames).transcript())
}
