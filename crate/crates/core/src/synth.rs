//! Synthetic videos with known segmentations.
//!
//! Each class gets a prototype vector; prototypes are orthogonal whenever
//! `num_classes <= feature_dim`, so the ratio `noise_sigma / prototype_scale`
//! alone controls how separable the classes are. A frame's feature is its
//! class prototype, plus an optional linear drift along a per-video direction,
//! plus isotropic Gaussian noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::pseudolabel::TimestampAnnotation;
use crate::segcore::{ClassId, FeatureSequence, Segment, Segmentation};
use crate::tensor::Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub prototype_scale: f64,
    pub noise_sigma: f64,
    /// Total displacement over a video, in units of `prototype_scale`.
    pub temporal_drift: f64,
    pub min_segments: usize,
    pub max_segments: usize,
    pub min_duration: usize,
    pub max_duration: usize,
    /// Row-stochastic class transition weights; the diagonal is ignored.
    pub transition: Option<Vec<Vec<f64>>>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 4,
            feature_dim: 16,
            prototype_scale: 1.0,
            noise_sigma: 0.1,
            temporal_drift: 0.0,
            min_segments: 3,
            max_segments: 6,
            min_duration: 20,
            max_duration: 60,
            transition: None,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.feature_dim == 0 {
            return invalid("num_classes and feature_dim must be positive");
        }
        if self.noise_sigma.is_nan()
            || self.noise_sigma < 0.0
            || self.prototype_scale.is_nan()
            || self.prototype_scale <= 0.0
        {
            return invalid("noise_sigma must be >= 0 and prototype_scale > 0");
        }
        if !self.temporal_drift.is_finite() {
            return invalid("temporal_drift must be finite");
        }
        if self.min_segments == 0 || self.min_segments > self.max_segments {
            return invalid("segment count bounds must satisfy 1 <= min <= max");
        }
        if self.min_duration == 0 || self.min_duration > self.max_duration {
            return invalid("duration bounds must satisfy 1 <= min <= max");
        }
        if self.max_segments > 1 && self.num_classes < 2 {
            return invalid("more than one segment needs at least two classes");
        }
        if let Some(t) = &self.transition {
            if t.len() != self.num_classes || t.iter().any(|r| r.len() != self.num_classes) {
                return invalid("transition matrix must be num_classes x num_classes");
            }
            for (i, row) in t.iter().enumerate() {
                let off: f64 = row
                    .iter()
                    .enumerate()
                    .filter(|&(j, _)| j != i)
                    .map(|(_, w)| *w)
                    .sum();
                if row.iter().any(|w| w.is_nan() || *w < 0.0) || off <= 0.0 {
                    return invalid(format!("transition row {i} has no admissible successor"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthVideo {
    pub name: String,
    pub features: FeatureSequence,
    pub gt: Segmentation,
    pub timestamps: TimestampAnnotation,
}

/// Class prototypes, one row per class.
pub fn prototypes(cfg: &SynthConfig) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(cfg.num_classes);
    for _ in 0..cfg.num_classes {
        let mut v = gaussian_vec(&mut rng, cfg.feature_dim);
        if rows.len() < cfg.feature_dim {
            for r in &rows {
                let d: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                for (x, y) in v.iter_mut().zip(r) {
                    *x -= d * y;
                }
            }
        }
        normalize(&mut v);
        rows.push(v);
    }
    let mut m = Mat::from_rows(&rows);
    for x in m.data_mut() {
        *x *= cfg.prototype_scale;
    }
    m
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| StandardNormal.sample(rng)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

fn sample_transcript(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Vec<ClassId> {
    let n = rng.random_range(cfg.min_segments..=cfg.max_segments);
    let mut out = Vec::with_capacity(n);
    let mut cur = rng.random_range(0..cfg.num_classes);
    out.push(cur);
    for _ in 1..n {
        cur = match &cfg.transition {
            Some(t) => {
                let weights: Vec<f64> = (0..cfg.num_classes)
                    .map(|j| if j == cur { 0.0 } else { t[cur][j] })
                    .collect();
                let total: f64 = weights.iter().sum();
                let mut u = rng.random_range(0.0..total);
                let mut pick = weights.iter().rposition(|&w| w > 0.0).unwrap_or(0);
                for (j, &w) in weights.iter().enumerate() {
                    if w > 0.0 && u < w {
                        pick = j;
                        break;
                    }
                    u -= w;
                }
                pick
            }
            None => {
                let k = rng.random_range(0..cfg.num_classes - 1);
                if k >= cur {
                    k + 1
                } else {
                    k
                }
            }
        };
        out.push(cur);
    }
    out
}

/// Generates one video per index; video `i` depends only on `(seed, i)`.
pub fn generate_one(cfg: &SynthConfig, protos: &Mat, index: usize) -> Result<SynthVideo> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let transcript = sample_transcript(cfg, &mut rng);
    let segments: Vec<Segment> = transcript
        .iter()
        .map(|&a| Segment::new(a, rng.random_range(cfg.min_duration..=cfg.max_duration)))
        .collect();
    let gt = Segmentation::new(segments)?;
    let total = gt.total_frames();

    let mut direction = gaussian_vec(&mut rng, cfg.feature_dim);
    normalize(&mut direction);
    let drift = cfg.temporal_drift * cfg.prototype_scale;

    let labels = crate::segcore::to_frames(&gt);
    let mut feats = Mat::zeros(total, cfg.feature_dim);
    for (t, &c) in labels.labels().iter().enumerate() {
        let progress = if total > 1 {
            t as f64 / (total - 1) as f64
        } else {
            0.0
        };
        for (k, x) in feats.row_mut(t).iter_mut().enumerate() {
            let noise: f64 = StandardNormal.sample(&mut rng);
            *x = protos[(c, k)] + drift * progress * direction[k] + cfg.noise_sigma * noise;
        }
    }

    let mut entries = Vec::with_capacity(gt.len());
    let bounds = gt.boundaries();
    for (i, s) in gt.segments().iter().enumerate() {
        entries.push((rng.random_range(bounds[i]..bounds[i + 1]), s.action));
    }
    Ok(SynthVideo {
        name: format!("video_{index:04}"),
        features: FeatureSequence::new(feats)?,
        gt,
        timestamps: TimestampAnnotation::new(entries, total)?,
    })
}

pub fn generate(cfg: &SynthConfig, n_videos: usize) -> Result<Vec<SynthVideo>> {
    cfg.validate()?;
    let protos = prototypes(cfg);
    (0..n_videos)
        .map(|i| generate_one(cfg, &protos, i))
        .collect()
}
