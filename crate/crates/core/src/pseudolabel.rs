//! Timestamp supervision to frame labels via k-medoids.
//!
//! [`constrained_kmedoids`] clusters frames into temporally contiguous groups,
//! one per annotated timestamp. Medoids start at the timestamp frames. Each
//! iteration first moves every boundary between consecutive timestamps to the
//! position minimizing the summed distance of the frames in between to their
//! cluster medoid, then re-picks each medoid as the in-cluster frame with the
//! smallest summed distance to the rest of its cluster. Frames are 0-indexed
//! and cluster `i` is the half-open range `[b_i, b_{i+1})`.
//!
//! [`unconstrained_kmedoids`] is plain k-medoids with the same initialization,
//! labeling each frame with the class of the timestamp its cluster started
//! from. Its output may be fragmented.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::segcore::{ClassId, FeatureSequence, FrameLabeling, Segment, Segmentation};

pub const DEFAULT_MAX_ITERS: usize = 50;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestampAnnotation {
    entries: Vec<(usize, ClassId)>,
}

impl TimestampAnnotation {
    /// Checks that frames are strictly increasing and below `total_frames`.
    pub fn new(entries: Vec<(usize, ClassId)>, total_frames: usize) -> Result<Self> {
        if entries.is_empty() {
            return invalid("timestamp annotation needs at least one entry");
        }
        for w in entries.windows(2) {
            if w[1].0 <= w[0].0 {
                return invalid(format!(
                    "timestamps must be strictly increasing ({} then {})",
                    w[0].0, w[1].0
                ));
            }
        }
        let last = entries[entries.len() - 1].0;
        if last >= total_frames {
            return invalid(format!(
                "timestamp {last} outside a video of {total_frames} frames"
            ));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(usize, ClassId)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn frames(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.0).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum Distance {
    #[default]
    Euclidean,
    /// `1 - cos(a, b)`; a zero vector counts as orthogonal to everything.
    Cosine,
    L1,
}

impl Distance {
    pub fn eval(self, a: &[f64], b: &[f64]) -> f64 {
        match self {
            Distance::Euclidean => a
                .iter()
                .zip(b)
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt(),
            Distance::L1 => a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum(),
            Distance::Cosine => {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                if na == 0.0 || nb == 0.0 {
                    1.0
                } else {
                    1.0 - dot / (na * nb)
                }
            }
        }
    }
}

impl std::str::FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euclidean" => Ok(Self::Euclidean),
            "cosine" => Ok(Self::Cosine),
            "l1" => Ok(Self::L1),
            other => invalid(format!("unknown distance {other:?}")),
        }
    }
}

impl std::fmt::Display for Distance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Euclidean => "euclidean",
            Self::Cosine => "cosine",
            Self::L1 => "l1",
        })
    }
}

/// Medoid frames and cluster boundaries `b_0 = 0 < b_1 < ... < b_n = T`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterState {
    pub medoid_frames: Vec<usize>,
    pub boundaries: Vec<usize>,
}

/// Objective value after every boundary and medoid step.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KMedoidsTrace {
    pub objective: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl KMedoidsTrace {
    pub fn is_monotone(&self) -> bool {
        self.objective
            .windows(2)
            .all(|w| w[1] <= w[0] + monotone_slack(w[0]))
    }
}

fn monotone_slack(v: f64) -> f64 {
    1e-9 * (1.0 + v.abs())
}

fn check_inputs(feats: &FeatureSequence, ts: &TimestampAnnotation, max_iters: usize) -> Result<()> {
    let t = feats.frames();
    if ts.len() > t {
        return invalid(format!("{} timestamps for {t} frames", ts.len()));
    }
    // Re-validate: the annotation may have been built for another video.
    TimestampAnnotation::new(ts.entries.clone(), t)?;
    if max_iters == 0 {
        return invalid("max_iters must be at least 1");
    }
    Ok(())
}

pub fn constrained_kmedoids(
    feats: &FeatureSequence,
    ts: &TimestampAnnotation,
    dist: Distance,
    max_iters: usize,
) -> Result<Segmentation> {
    constrained_kmedoids_traced(feats, ts, dist, max_iters).map(|(s, _, _)| s)
}

/// Constrained k-medoids with the final cluster state and objective trace.
///
/// Returns [`Error::Numeric`] if the objective ever increases, which would
/// mean one of the two exact-argmin steps is broken.
pub fn constrained_kmedoids_traced(
    feats: &FeatureSequence,
    ts: &TimestampAnnotation,
    dist: Distance,
    max_iters: usize,
) -> Result<(Segmentation, ClusterState, KMedoidsTrace)> {
    check_inputs(feats, ts, max_iters)?;
    let t_len = feats.frames();
    let stamps = ts.frames();
    let n = stamps.len();
    let mut state = ClusterState {
        medoid_frames: stamps.clone(),
        boundaries: Vec::new(),
    };
    let mut trace = KMedoidsTrace::default();

    if n == 1 {
        state.boundaries = vec![0, t_len];
        trace.converged = true;
        trace.objective.push(objective(feats, &state, dist));
        return Ok((to_segmentation(ts, &state.boundaries)?, state, trace));
    }

    let mut prev: Option<ClusterState> = None;
    for _ in 0..max_iters {
        trace.iterations += 1;
        state.boundaries = boundary_step(feats, &stamps, &state.medoid_frames, dist);
        record(&mut trace, objective(feats, &state, dist))?;
        state.medoid_frames = medoid_step(feats, &state.boundaries, &state.medoid_frames, dist);
        record(&mut trace, objective(feats, &state, dist))?;
        if prev.as_ref() == Some(&state) {
            trace.converged = true;
            break;
        }
        prev = Some(state.clone());
    }
    Ok((to_segmentation(ts, &state.boundaries)?, state, trace))
}

fn record(trace: &mut KMedoidsTrace, value: f64) -> Result<()> {
    if let Some(&last) = trace.objective.last() {
        if value > last + monotone_slack(last) {
            return Err(Error::Numeric(format!(
                "k-medoids objective increased from {last} to {value}"
            )));
        }
    }
    trace.objective.push(value);
    Ok(())
}

fn to_segmentation(ts: &TimestampAnnotation, boundaries: &[usize]) -> Result<Segmentation> {
    Segmentation::new(
        ts.entries
            .iter()
            .zip(boundaries.windows(2))
            .map(|(&(_, class), b)| Segment::new(class, b[1] - b[0]))
            .collect(),
    )
}

/// `sum_i sum_{j in cluster i} dist(m_i, x_j)`.
pub fn objective(feats: &FeatureSequence, state: &ClusterState, dist: Distance) -> f64 {
    state
        .boundaries
        .windows(2)
        .zip(&state.medoid_frames)
        .map(|(b, &m)| {
            (b[0]..b[1])
                .map(|j| dist.eval(feats.frame(m), feats.frame(j)))
                .sum::<f64>()
        })
        .sum()
}

/// Prefix sums of distances from one medoid to every frame.
fn prefix_row(feats: &FeatureSequence, medoid: usize, dist: Distance) -> Vec<f64> {
    let mut out = Vec::with_capacity(feats.frames() + 1);
    let mut acc = 0.0;
    out.push(acc);
    for j in 0..feats.frames() {
        acc += dist.eval(feats.frame(medoid), feats.frame(j));
        out.push(acc);
    }
    out
}

fn boundary_step(
    feats: &FeatureSequence,
    stamps: &[usize],
    medoids: &[usize],
    dist: Distance,
) -> Vec<usize> {
    let n = stamps.len();
    let prefix: Vec<Vec<f64>> = medoids
        .iter()
        .map(|&m| prefix_row(feats, m, dist))
        .collect();
    let mut b = Vec::with_capacity(n + 1);
    b.push(0);
    for i in 0..n - 1 {
        let (lo, hi) = (stamps[i], stamps[i + 1]);
        let (left, right) = (&prefix[i], &prefix[i + 1]);
        // Frame `l` is the last one of cluster i.
        let mut best = (f64::INFINITY, lo);
        for l in lo..hi {
            let cost = (left[l + 1] - left[lo]) + (right[hi + 1] - right[l + 1]);
            if cost < best.0 {
                best = (cost, l);
            }
        }
        b.push(best.1 + 1);
    }
    b.push(feats.frames());
    b
}

/// Frame in `range` minimizing the summed distance to all frames of `range`.
fn medoid_of(feats: &FeatureSequence, frames: &[usize], dist: Distance) -> usize {
    let mut best = (f64::INFINITY, frames[0]);
    for &cand in frames {
        let cost: f64 = frames
            .iter()
            .map(|&j| dist.eval(feats.frame(cand), feats.frame(j)))
            .sum();
        if cost < best.0 {
            best = (cost, cand);
        }
    }
    best.1
}

/// New medoid per segment. A boundary move can leave the current medoid
/// outside its segment; it stays a candidate so the step never increases the
/// objective.
fn medoid_step(
    feats: &FeatureSequence,
    boundaries: &[usize],
    current: &[usize],
    dist: Distance,
) -> Vec<usize> {
    boundaries
        .windows(2)
        .zip(current)
        .map(|(b, &m)| {
            let frames: Vec<usize> = (b[0]..b[1]).collect();
            let best = medoid_of(feats, &frames, dist);
            if (b[0]..b[1]).contains(&m) {
                return best;
            }
            let cost = |c: usize| -> f64 {
                frames
                    .iter()
                    .map(|&j| dist.eval(feats.frame(c), feats.frame(j)))
                    .sum()
            };
            if cost(m) < cost(best) {
                m
            } else {
                best
            }
        })
        .collect()
}

/// Vanilla k-medoids initialized at the timestamp frames.
pub fn unconstrained_kmedoids(
    feats: &FeatureSequence,
    ts: &TimestampAnnotation,
    dist: Distance,
    max_iters: usize,
) -> Result<FrameLabeling> {
    check_inputs(feats, ts, max_iters)?;
    let mut medoids = ts.frames();
    let mut assign: Vec<usize> = Vec::new();
    for _ in 0..max_iters {
        let next: Vec<usize> = (0..feats.frames())
            .map(|j| {
                let mut best = (f64::INFINITY, 0);
                for (k, &m) in medoids.iter().enumerate() {
                    let d = dist.eval(feats.frame(m), feats.frame(j));
                    if d < best.0 {
                        best = (d, k);
                    }
                }
                best.1
            })
            .collect();
        let new_medoids: Vec<usize> = (0..medoids.len())
            .map(|k| {
                let members: Vec<usize> = (0..next.len()).filter(|&j| next[j] == k).collect();
                if members.is_empty() {
                    medoids[k]
                } else {
                    medoid_of(feats, &members, dist)
                }
            })
            .collect();
        let stable = next == assign && new_medoids == medoids;
        assign = next;
        medoids = new_medoids;
        if stable {
            break;
        }
    }
    let classes: Vec<ClassId> = ts.entries.iter().map(|e| e.1).collect();
    FrameLabeling::new(assign.into_iter().map(|k| classes[k]).collect())
}
