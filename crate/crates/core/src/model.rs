//! Encoder, transcript decoder and alignment decoder.
//!
//! The encoder maps `T x d` features to `T x d'` features `E` and frame
//! logits. Each encoder block is: dilated convolution (dilation `2^i`) and
//! GELU, single-head self-attention over a local window on the layer-normed
//! features with a residual, then a trailing dilated convolution added to the
//! block input.
//!
//! The transcript decoder is a post-norm transformer decoder over the tokens
//! `[SOS, a_1 .. a_N]` predicting `[a_1 .. a_N, EOS]`. Its output rows
//! `0..N` are the segment features `D`. The attention matrix used by the
//! cross-attention loss is `softmax_N(E D^T / (tau' sqrt(d')))`.
//!
//! The alignment decoder runs decoder layers with the position-encoded frame
//! features as queries and the position-encoded segment features as memory,
//! producing `A`; the assignment is `softmax_N(A (D + PE)^T / tau)`.
//!
//! Everything is `f64` and differentiated exactly on the [`Graph`] tape.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{fifa_align, viterbi_align, AlignmentProblem, FifaConfig};
use crate::error::{invalid, Error, Result};
use crate::losses::{
    cross_attention_logits_node, cross_attention_probs_node, cross_entropy_node,
    durations_from_assignment, group_ce_node, round_durations, AttentionMatrix, GroupIndex,
    GroupVariant, LossParts, LossWeights,
};
use crate::pseudolabel::{constrained_kmedoids, Distance, TimestampAnnotation};
use crate::segcore::{
    merge_repeats, split_segments, to_frames, ClassId, FeatureSequence, Segment, Segmentation,
    Transcript, DEFAULT_SPLIT_FRACTION,
};
use crate::tape::{Gradients, Graph, NodeId};
use crate::tensor::{argmax, log_softmax_rows, sinusoidal_positions, softmax_rows, Mat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub num_classes: usize,
    pub d_model: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub align_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub align_ffn_dim: usize,
    /// Encoder attention window; frames attend to `|s - t| <= window / 2`.
    pub window: usize,
    pub tau_prime: f64,
    pub tau_train: f64,
    pub tau_infer: f64,
    pub dropout: f64,
    pub feature_drop: f64,
    pub ca_smoothing_kernel: Option<usize>,
    pub split_fraction: f64,
    pub group_frame: GroupVariant,
    pub group_segment: GroupVariant,
    /// Longest token sequence (including SOS) the decoder may be fed.
    pub max_decode_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy(16, 4)
    }
}

impl ModelConfig {
    pub fn toy(input_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            num_classes,
            d_model: 16,
            enc_layers: 4,
            dec_layers: 2,
            align_layers: 1,
            heads: 1,
            ffn_dim: 32,
            align_ffn_dim: 32,
            window: 31,
            tau_prime: 0.1,
            tau_train: 1.0,
            tau_infer: 1e-4,
            dropout: 0.0,
            feature_drop: 0.01,
            ca_smoothing_kernel: None,
            split_fraction: DEFAULT_SPLIT_FRACTION,
            group_frame: GroupVariant::AvgLogit,
            group_segment: GroupVariant::AvgProbability,
            max_decode_len: 64,
            seed: 0,
        }
    }

    pub fn paper(input_dim: usize, num_classes: usize) -> Self {
        Self {
            d_model: 64,
            enc_layers: 10,
            ffn_dim: 2048,
            align_ffn_dim: 1024,
            window: 63,
            tau_prime: 0.001,
            dropout: 0.1,
            ..Self::toy(input_dim, num_classes)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_dim", self.input_dim),
            ("num_classes", self.num_classes),
            ("d_model", self.d_model),
            ("enc_layers", self.enc_layers),
            ("dec_layers", self.dec_layers),
            ("align_layers", self.align_layers),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("align_ffn_dim", self.align_ffn_dim),
            ("window", self.window),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return invalid(format!("{name} must be at least 1"));
        }
        if self.heads != 1 {
            return invalid("only single-head attention is supported");
        }
        if self.window.is_multiple_of(2) {
            return invalid("window must be odd");
        }
        for (name, v) in [
            ("tau_prime", self.tau_prime),
            ("tau_train", self.tau_train),
            ("tau_infer", self.tau_infer),
        ] {
            if !v.is_finite() || v <= 0.0 {
                return invalid(format!("{name} must be positive"));
            }
        }
        for (name, v) in [
            ("dropout", self.dropout),
            ("feature_drop", self.feature_drop),
        ] {
            if !(0.0..1.0).contains(&v) {
                return invalid(format!("{name} must be in [0, 1)"));
            }
        }
        if let Some(k) = self.ca_smoothing_kernel {
            if k == 0 || k % 2 == 0 {
                return invalid("ca_smoothing_kernel must be odd");
            }
        }
        if !(self.split_fraction > 0.0 && self.split_fraction <= 1.0) {
            return invalid("split_fraction must be in (0, 1]");
        }
        if self.max_decode_len < 2 {
            return invalid("max_decode_len must be at least 2");
        }
        Ok(())
    }

    pub fn eos(&self) -> usize {
        self.num_classes
    }

    pub fn sos(&self) -> usize {
        self.num_classes + 1
    }

    /// Flat `key=value` text, one field per line.
    pub fn to_kv(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        let mut out = String::new();
        if let serde_json::Value::Object(map) = value {
            for (k, v) in map {
                let text = match v {
                    serde_json::Value::Null => "none".to_string(),
                    serde_json::Value::String(s) => s,
                    other => other.to_string(),
                };
                out.push_str(&format!("{k}={text}\n"));
            }
        }
        out
    }

    /// Parses `key=value` lines over the toy defaults. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut map = serde_json::Map::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return invalid(format!("config line {}: expected key=value", i + 1));
            };
            let (k, v) = (k.trim(), v.trim());
            let value = if v == "none" {
                serde_json::Value::Null
            } else {
                serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.to_string()))
            };
            map.insert(k.to_string(), value);
        }
        let cfg: ModelConfig = serde_json::from_value(serde_json::Value::Object(map))
            .map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Gradients keyed by parameter position in [`Params`].
pub type ParamGrads = Vec<(usize, Mat)>;

/// Named parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Params {
    names: Vec<String>,
    values: Vec<Mat>,
    index: BTreeMap<String, usize>,
}

impl Params {
    pub fn insert(&mut self, name: impl Into<String>, value: Mat) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return invalid(format!("duplicate parameter {name}"));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        Ok(())
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

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Mat> {
        self.position(name).map(|i| &self.values[i])
    }

    pub fn value(&self, i: usize) -> &Mat {
        &self.values[i]
    }

    pub fn value_mut(&mut self, i: usize) -> &mut Mat {
        &mut self.values[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|m| m.data().len()).sum()
    }

    /// Indices of parameters whose name starts with `prefix`.
    pub fn group(&self, prefix: &str) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.names[i].starts_with(prefix))
            .collect()
    }
}

pub const ENCODER: &str = "enc.";
pub const DECODER: &str = "dec.";
pub const ALIGNER: &str = "align.";

struct Init {
    rng: ChaCha8Rng,
    params: Params,
}

impl Init {
    /// Uniform in `+-1/sqrt(fan_in)`.
    fn weight(&mut self, name: String, rows: usize, cols: usize) -> Result<()> {
        let bound = 1.0 / (rows as f64).sqrt();
        let rng = &mut self.rng;
        let m = Mat::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound));
        self.params.insert(name, m)
    }

    fn bias(&mut self, name: String, cols: usize) -> Result<()> {
        self.params.insert(name, Mat::zeros(1, cols))
    }

    fn attention(&mut self, prefix: &str, d: usize) -> Result<()> {
        for m in ["q", "k", "v", "o"] {
            self.weight(format!("{prefix}.{m}"), d, d)?;
        }
        Ok(())
    }

    fn decoder_layer(&mut self, prefix: &str, d: usize, ffn: usize) -> Result<()> {
        self.attention(&format!("{prefix}.self"), d)?;
        self.attention(&format!("{prefix}.cross"), d)?;
        self.weight(format!("{prefix}.ffn.w1"), d, ffn)?;
        self.bias(format!("{prefix}.ffn.b1"), ffn)?;
        self.weight(format!("{prefix}.ffn.w2"), ffn, d)?;
        self.bias(format!("{prefix}.ffn.b2"), d)
    }
}

fn build_params(cfg: &ModelConfig) -> Result<Params> {
    let d = cfg.d_model;
    let c = cfg.num_classes;
    let mut init = Init {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        params: Params::default(),
    };
    init.weight("enc.in.w".into(), cfg.input_dim, d)?;
    init.bias("enc.in.b".into(), d)?;
    for i in 0..cfg.enc_layers {
        for conv in ["conv", "out"] {
            for tap in 0..3 {
                init.weight(format!("enc.{i}.{conv}.w{tap}"), d, d)?;
            }
            init.bias(format!("enc.{i}.{conv}.b"), d)?;
        }
        init.attention(&format!("enc.{i}.att"), d)?;
    }
    init.weight("enc.head.w".into(), d, c)?;
    init.bias("enc.head.b".into(), c)?;

    // Token embeddings: fan-in 1, i.e. uniform in (-1, 1).
    let rng = &mut init.rng;
    let emb = Mat::from_fn(c + 2, d, |_, _| rng.random_range(-1.0..1.0));
    init.params.insert("dec.emb", emb)?;
    for i in 0..cfg.dec_layers {
        init.decoder_layer(&format!("dec.{i}"), d, cfg.ffn_dim)?;
    }
    init.weight("dec.head.w".into(), d, c + 1)?;
    init.bias("dec.head.b".into(), c + 1)?;
    for i in 0..cfg.align_layers {
        init.decoder_layer(&format!("{ALIGNER}{i}"), d, cfg.align_ffn_dim)?;
    }
    Ok(init.params)
}

/// Parameter leaves bound into one graph.
struct Bound<'p> {
    params: &'p Params,
    ids: Vec<Option<NodeId>>,
}

impl<'p> Bound<'p> {
    fn new(g: &mut Graph, params: &'p Params, prefixes: &[&str]) -> Self {
        let ids = params
            .iter()
            .map(|(name, v)| {
                prefixes
                    .iter()
                    .any(|p| name.starts_with(p))
                    .then(|| g.leaf(v.clone()))
            })
            .collect();
        Self { params, ids }
    }

    fn p(&self, name: &str) -> NodeId {
        let i = self
            .params
            .position(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.ids[i].unwrap_or_else(|| panic!("parameter {name} not bound"))
    }

    fn grads(&self, grads: &Gradients) -> Vec<(usize, Mat)> {
        self.ids
            .iter()
            .enumerate()
            .filter_map(|(i, id)| {
                id.map(|id| (i, grads.get_or_zeros(id, self.params.value(i).shape())))
            })
            .collect()
    }
}

/// Dropout randomness; `None` means evaluation mode.
struct Noise<'r> {
    rng: Option<&'r mut ChaCha8Rng>,
    rate: f64,
}

impl Noise<'_> {
    fn off() -> Noise<'static> {
        Noise {
            rng: None,
            rate: 0.0,
        }
    }

    fn dropout(&mut self, g: &mut Graph, x: NodeId) -> NodeId {
        let rate = self.rate;
        match self.rng.as_deref_mut() {
            Some(rng) if rate > 0.0 => {
                let (r, c) = g.value(x).shape();
                let keep = 1.0 / (1.0 - rate);
                let mask = Mat::from_fn(r, c, |_, _| {
                    if rng.random::<f64>() < rate {
                        0.0
                    } else {
                        keep
                    }
                });
                let m = g.leaf(mask);
                g.mul(x, m)
            }
            _ => x,
        }
    }
}

fn linear(g: &mut Graph, b: &Bound, x: NodeId, w: &str, bias: Option<&str>) -> NodeId {
    let y = g.matmul(x, b.p(w));
    match bias {
        Some(name) => g.add_row(y, b.p(name)),
        None => y,
    }
}

fn dilated_conv(g: &mut Graph, b: &Bound, x: NodeId, prefix: &str, dilation: usize) -> NodeId {
    let back = g.shift_rows(x, -(dilation as isize));
    let fwd = g.shift_rows(x, dilation as isize);
    let y0 = g.matmul(back, b.p(&format!("{prefix}.w0")));
    let y1 = g.matmul(x, b.p(&format!("{prefix}.w1")));
    let y2 = g.matmul(fwd, b.p(&format!("{prefix}.w2")));
    let y = g.add(y0, y1);
    let y = g.add(y, y2);
    g.add_row(y, b.p(&format!("{prefix}.b")))
}

/// Single-head attention; returns the output and the attention weights.
fn attention(
    g: &mut Graph,
    b: &Bound,
    prefix: &str,
    queries: NodeId,
    memory: NodeId,
    mask: Option<&[bool]>,
) -> (NodeId, NodeId) {
    let q = g.matmul(queries, b.p(&format!("{prefix}.q")));
    let k = g.matmul(memory, b.p(&format!("{prefix}.k")));
    let v = g.matmul(memory, b.p(&format!("{prefix}.v")));
    let d = g.value(q).cols() as f64;
    let s = g.matmul_t(q, k);
    let s = g.scale(s, 1.0 / d.sqrt());
    let p = g.softmax_rows(s, mask);
    let h = g.matmul(p, v);
    (g.matmul(h, b.p(&format!("{prefix}.o"))), p)
}

fn band_mask(t: usize, window: usize) -> Vec<bool> {
    let half = window / 2;
    (0..t * t)
        .map(|i| (i / t).abs_diff(i % t) <= half)
        .collect()
}

fn causal_mask(n: usize) -> Vec<bool> {
    (0..n * n).map(|i| i % n <= i / n).collect()
}

/// Post-norm decoder layer. Returns the output and the cross-attention weights.
#[allow(clippy::too_many_arguments)]
fn decoder_layer(
    g: &mut Graph,
    b: &Bound,
    prefix: &str,
    x: NodeId,
    memory: NodeId,
    self_mask: Option<&[bool]>,
    noise: &mut Noise,
) -> (NodeId, NodeId) {
    let (s, _) = attention(g, b, &format!("{prefix}.self"), x, x, self_mask);
    let s = noise.dropout(g, s);
    let x = g.add(x, s);
    let x = g.layer_norm(x);
    let (c, probs) = attention(g, b, &format!("{prefix}.cross"), x, memory, None);
    let c = noise.dropout(g, c);
    let x = g.add(x, c);
    let x = g.layer_norm(x);
    let h = linear(
        g,
        b,
        x,
        &format!("{prefix}.ffn.w1"),
        Some(&format!("{prefix}.ffn.b1")),
    );
    let h = g.gelu(h);
    let f = linear(
        g,
        b,
        h,
        &format!("{prefix}.ffn.w2"),
        Some(&format!("{prefix}.ffn.b2")),
    );
    let f = noise.dropout(g, f);
    let x = g.add(x, f);
    (g.layer_norm(x), probs)
}

struct EncoderNodes {
    e: NodeId,
    logits: NodeId,
}

struct DecoderNodes {
    x: NodeId,
    logits: NodeId,
    cross: NodeId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub features: Mat,
    pub frame_logits: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderOutput {
    /// `N x d'`, one row per input action.
    pub features: Mat,
    /// `(N + 1) x (C + 1)`; the last row predicts EOS.
    pub segment_logits: Mat,
    /// `T x N`, rows sum to 1 over segments.
    pub cross_attention: Mat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AlignmentOutput {
    pub aligned: Mat,
    pub assignment: Mat,
}

/// A training video with its frame targets and (unsplit) target segmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub name: String,
    pub features: FeatureSequence,
    pub target: Segmentation,
}

impl TrainSample {
    pub fn new(
        name: impl Into<String>,
        features: FeatureSequence,
        target: Segmentation,
    ) -> Result<Self> {
        if features.frames() != target.total_frames() {
            return invalid(format!(
                "{} feature frames but {} labeled frames",
                features.frames(),
                target.total_frames()
            ));
        }
        Ok(Self {
            name: name.into(),
            features,
            target,
        })
    }

    /// Uses the constrained k-medoids pseudo-segmentation as the target.
    pub fn from_timestamps(
        name: impl Into<String>,
        features: FeatureSequence,
        timestamps: &TimestampAnnotation,
        dist: Distance,
    ) -> Result<Self> {
        let target = constrained_kmedoids(&features, timestamps, dist, 100)?;
        Self::new(name, features, target)
    }
}

/// Targets derived from a sample for one model configuration.
struct Targets {
    frames: Rc<Vec<usize>>,
    frame_groups: GroupIndex,
    tokens: Rc<Vec<usize>>,
    next_tokens: Rc<Vec<usize>>,
    segment_groups: GroupIndex,
    frame_to_segment: Rc<Vec<usize>>,
    segments: usize,
}

impl Targets {
    fn new(cfg: &ModelConfig, target: &Segmentation) -> Result<Self> {
        if let Some(s) = target
            .segments()
            .iter()
            .find(|s| s.action >= cfg.num_classes)
        {
            return invalid(format!(
                "class {} outside the {} model classes",
                s.action, cfg.num_classes
            ));
        }
        let split = split_segments(target, cfg.split_fraction)?;
        let actions = split.transcript().actions().to_vec();
        let frames = to_frames(target).into_inner();
        let mut tokens = vec![cfg.sos()];
        tokens.extend(&actions);
        if tokens.len() > cfg.max_decode_len {
            return invalid(format!(
                "{} target segments exceed max_decode_len {}",
                actions.len(),
                cfg.max_decode_len
            ));
        }
        let mut next = actions.clone();
        next.push(cfg.eos());
        Ok(Self {
            frame_groups: GroupIndex::from_labels(&frames),
            frames: Rc::new(frames),
            tokens: Rc::new(tokens),
            next_tokens: Rc::new(next),
            segment_groups: GroupIndex::from_labels(&actions),
            frame_to_segment: Rc::new(split.frame_to_segment()),
            segments: actions.len(),
        })
    }
}

/// Inputs to the alignment decoder, computed from the frozen stage-1 network.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignInputs {
    pub encoder: Mat,
    pub decoder: Mat,
    pub frame_to_segment: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferMode {
    /// Transcript only.
    None,
    #[default]
    Alignment,
    Viterbi,
    Fifa,
}

impl std::str::FromStr for InferMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "alignment" => Ok(Self::Alignment),
            "viterbi" => Ok(Self::Viterbi),
            "fifa" => Ok(Self::Fifa),
            other => invalid(format!("unknown duration mode {other:?}")),
        }
    }
}

impl std::fmt::Display for InferMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::None => "none",
            Self::Alignment => "alignment",
            Self::Viterbi => "viterbi",
            Self::Fifa => "fifa",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferOptions {
    pub mode: InferMode,
    pub stride: usize,
    pub fifa: FifaConfig,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            mode: InferMode::Alignment,
            stride: 1,
            fifa: FifaConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// Decoded actions, possibly with adjacent repeats from split segments.
    pub decoded: Vec<ClassId>,
    /// Merged transcript used for duration inference.
    pub transcript: Transcript,
    pub segmentation: Option<Segmentation>,
    /// Decoding hit `max_decode_len` before EOS, or the fallback transcript
    /// was cut to fit it.
    pub truncated: bool,
    /// The decoder produced no action and the frame-level transcript was used.
    pub fallback: bool,
    pub frame_logits: Mat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub shuffle: bool,
    pub weights: LossWeights,
}

impl TrainConfig {
    /// Toy-scale schedule: the paper's optimizer with a larger step.
    pub fn toy() -> Self {
        Self {
            lr: 2e-3,
            ..Self::default()
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            shuffle: true,
            weights: LossWeights::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub parts: LossParts,
}

/// Adam over a subset of the parameters.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    moments: BTreeMap<usize, (Mat, Mat)>,
}

impl Adam {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn update(&mut self, params: &mut Params, grads: &[(usize, Mat)]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, grad) in grads {
            let p = params.value_mut(*i);
            let (m, v) = self.moments.entry(*i).or_insert_with(|| {
                (
                    Mat::zeros(p.rows(), p.cols()),
                    Mat::zeros(p.rows(), p.cols()),
                )
            });
            for (((x, g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *x -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Params,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = build_params(&config)?;
        Ok(Self { config, params })
    }

    /// Rebuilds a model from stored tensors, checking names and shapes.
    pub fn from_parts(config: ModelConfig, params: Params) -> Result<Self> {
        let fresh = Self::new(config)?;
        if fresh.params.names() != params.names() {
            return invalid("checkpoint parameters do not match the configuration");
        }
        for (i, (name, v)) in params.iter().enumerate() {
            if v.shape() != fresh.params.value(i).shape() {
                return invalid(format!("parameter {name} has shape {:?}", v.shape()));
            }
        }
        Ok(Self {
            config: fresh.config,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    fn check_features(&self, x: &FeatureSequence) -> Result<()> {
        if x.dim() != self.config.input_dim {
            return invalid(format!(
                "features have {} dims, model expects {}",
                x.dim(),
                self.config.input_dim
            ));
        }
        Ok(())
    }

    fn encoder_nodes(
        &self,
        g: &mut Graph,
        b: &Bound,
        x: NodeId,
        noise: &mut Noise,
    ) -> EncoderNodes {
        let t = g.value(x).rows();
        let mask = band_mask(t, self.config.window);
        let mut h = linear(g, b, x, "enc.in.w", Some("enc.in.b"));
        for i in 0..self.config.enc_layers {
            let dilation = 1usize << i.min(30);
            let f = dilated_conv(g, b, h, &format!("enc.{i}.conv"), dilation);
            let f = g.gelu(f);
            let n = g.layer_norm(f);
            let (att, _) = attention(g, b, &format!("enc.{i}.att"), n, n, Some(&mask));
            let att = noise.dropout(g, att);
            let a = g.add(f, att);
            let out = dilated_conv(g, b, a, &format!("enc.{i}.out"), dilation);
            let out = noise.dropout(g, out);
            h = g.add(h, out);
        }
        let logits = linear(g, b, h, "enc.head.w", Some("enc.head.b"));
        EncoderNodes { e: h, logits }
    }

    fn decoder_nodes(
        &self,
        g: &mut Graph,
        b: &Bound,
        e: NodeId,
        tokens: Rc<Vec<usize>>,
        noise: &mut Noise,
    ) -> DecoderNodes {
        let n = tokens.len();
        let emb = g.gather_rows(b.p("dec.emb"), tokens);
        let pe = g.leaf(sinusoidal_positions(n, self.config.d_model));
        let mut x = g.add(emb, pe);
        let mask = causal_mask(n);
        let mut cross = None;
        for i in 0..self.config.dec_layers {
            let (y, c) = decoder_layer(g, b, &format!("dec.{i}"), x, e, Some(&mask), noise);
            x = y;
            cross = Some(c);
        }
        let logits = linear(g, b, x, "dec.head.w", Some("dec.head.b"));
        DecoderNodes {
            x,
            logits,
            cross: cross.expect("at least one decoder layer"),
        }
    }

    /// Alignment decoder; returns `(A, A (D + PE)^T)`.
    fn align_nodes(
        &self,
        g: &mut Graph,
        b: &Bound,
        e: NodeId,
        d: NodeId,
        noise: &mut Noise,
    ) -> (NodeId, NodeId) {
        let t = g.value(e).rows();
        let n = g.value(d).rows();
        let pe_t = g.leaf(sinusoidal_positions(t, self.config.d_model));
        let pe_n = g.leaf(sinusoidal_positions(n, self.config.d_model));
        let mut x = g.add(e, pe_t);
        let dpe = g.add(d, pe_n);
        for i in 0..self.config.align_layers {
            x = decoder_layer(g, b, &format!("{ALIGNER}{i}"), x, dpe, None, noise).0;
        }
        let scores = g.matmul_t(x, dpe);
        (x, scores)
    }

    fn ca_loss_node(&self, g: &mut Graph, e: NodeId, d: NodeId, targets: Rc<Vec<usize>>) -> NodeId {
        let scores = g.matmul_t(e, d);
        let scale = 1.0 / (self.config.tau_prime * (self.config.d_model as f64).sqrt());
        let scores = g.scale(scores, scale);
        match self.config.ca_smoothing_kernel {
            Some(k) => {
                let m = g.softmax_rows(scores, None);
                let m = g.avg_pool_rows(m, k);
                let m = g.row_normalize(m);
                cross_attention_probs_node(g, m, targets)
            }
            None => cross_attention_logits_node(g, scores, targets),
        }
    }

    pub fn encode(&self, x: &FeatureSequence) -> Result<EncoderOutput> {
        self.check_features(x)?;
        let mut g = Graph::new();
        let b = Bound::new(&mut g, &self.params, &[ENCODER]);
        let xin = g.leaf(x.values().clone());
        let nodes = self.encoder_nodes(&mut g, &b, xin, &mut Noise::off());
        Ok(EncoderOutput {
            features: g.value(nodes.e).clone(),
            frame_logits: g.value(nodes.logits).clone(),
        })
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.first() != Some(&self.config.sos()) {
            return invalid("token sequence must start with SOS");
        }
        if tokens.len() > self.config.max_decode_len {
            return Err(Error::DecodeOverflow(self.config.max_decode_len));
        }
        if let Some(t) = tokens[1..].iter().find(|&&t| t >= self.config.num_classes) {
            return invalid(format!("token {t} is not an action class"));
        }
        Ok(())
    }

    fn check_encoder(&self, e: &Mat) -> Result<()> {
        if e.cols() != self.config.d_model || e.rows() == 0 {
            return invalid(format!(
                "encoder features must be T x {}",
                self.config.d_model
            ));
        }
        Ok(())
    }

    /// Logits over `C + 1` classes for the token after `prefix`, and the last
    /// decoder layer's attention over frames for that position.
    pub fn decode_step(&self, e: &Mat, prefix: &[usize]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_encoder(e)?;
        self.check_tokens(prefix)?;
        let mut g = Graph::new();
        let b = Bound::new(&mut g, &self.params, &[DECODER]);
        let en = g.leaf(e.clone());
        let nodes = self.decoder_nodes(&mut g, &b, en, Rc::new(prefix.to_vec()), &mut Noise::off());
        let last = prefix.len() - 1;
        Ok((
            g.value(nodes.logits).row(last).to_vec(),
            g.value(nodes.cross).row(last).to_vec(),
        ))
    }

    /// Teacher-forced pass over `[SOS, actions..]`.
    pub fn decode_transcript(&self, e: &Mat, actions: &[ClassId]) -> Result<DecoderOutput> {
        self.check_encoder(e)?;
        if actions.is_empty() {
            return invalid("empty transcript");
        }
        let mut tokens = vec![self.config.sos()];
        tokens.extend_from_slice(actions);
        self.check_tokens(&tokens)?;
        let n = actions.len();
        let mut g = Graph::new();
        let b = Bound::new(&mut g, &self.params, &[DECODER]);
        let en = g.leaf(e.clone());
        let nodes = self.decoder_nodes(&mut g, &b, en, Rc::new(tokens), &mut Noise::off());
        let d = g.slice_rows(nodes.x, 0, n);
        let scores = g.matmul_t(en, d);
        let scale = 1.0 / (self.config.tau_prime * (self.config.d_model as f64).sqrt());
        let m = softmax_rows(&g.value(scores).map(|v| v * scale));
        Ok(DecoderOutput {
            features: g.value(d).clone(),
            segment_logits: g.value(nodes.logits).clone(),
            cross_attention: m,
        })
    }

    /// Alignment decoder output and assignment at temperature `tau`.
    pub fn align(&self, e: &Mat, d: &Mat, tau: f64) -> Result<AlignmentOutput> {
        self.check_encoder(e)?;
        if d.rows() == 0 {
            return invalid("alignment needs at least one segment");
        }
        if d.cols() != self.config.d_model {
            return invalid(format!(
                "decoder features must be N x {}",
                self.config.d_model
            ));
        }
        if tau.is_nan() || tau <= 0.0 {
            return invalid("temperature must be positive");
        }
        let mut g = Graph::new();
        let b = Bound::new(&mut g, &self.params, &[ALIGNER]);
        let en = g.leaf(e.clone());
        let dn = g.leaf(d.clone());
        let (a, scores) = self.align_nodes(&mut g, &b, en, dn, &mut Noise::off());
        Ok(AlignmentOutput {
            aligned: g.value(a).clone(),
            assignment: softmax_rows(&g.value(scores).map(|v| v / tau)),
        })
    }

    /// Greedy decoding until EOS or `max_decode_len`. Returns the actions and
    /// whether decoding was cut off.
    pub fn greedy_decode(&self, e: &Mat) -> Result<(Vec<ClassId>, bool)> {
        let mut tokens = vec![self.config.sos()];
        loop {
            let (logits, _) = self.decode_step(e, &tokens)?;
            let next = argmax(&logits);
            if next == self.config.eos() {
                return Ok((tokens[1..].to_vec(), false));
            }
            if tokens.len() == self.config.max_decode_len {
                return Ok((tokens[1..].to_vec(), true));
            }
            tokens.push(next);
        }
    }

    pub fn predict(&self, x: &FeatureSequence, opts: &InferOptions) -> Result<Prediction> {
        let enc = self.encode(x)?;
        let t = x.frames();
        let (mut decoded, mut truncated) = self.greedy_decode(&enc.features)?;
        let fallback = decoded.is_empty();
        if fallback {
            decoded = crate::align::extract_transcript(&enc.frame_logits)?
                .actions()
                .to_vec();
            // The alignment decoder consumes the transcript as decoder input.
            let limit = self.config.max_decode_len - 1;
            if decoded.len() > limit {
                decoded.truncate(limit);
                truncated = true;
            }
        }
        let raw = Transcript::new_unchecked(decoded.clone());
        let transcript = raw.merged();
        let segmentation = match opts.mode {
            InferMode::None => None,
            InferMode::Alignment => {
                Some(self.alignment_segmentation(&enc.features, &decoded, t)?)
            }
            InferMode::Viterbi => {
                let lp = log_softmax_rows(&enc.frame_logits);
                let p = AlignmentProblem::new(lp, transcript.clone(), opts.stride)?;
                Some(viterbi_align(&p)?)
            }
            InferMode::Fifa => {
                let durations = self.alignment_durations(&enc.features, &decoded)?;
                let merged = merge_real_durations(&decoded, &durations);
                let lp = log_softmax_rows(&enc.frame_logits);
                let p = AlignmentProblem::new(lp, transcript.clone(), 1)?;
                let cfg = FifaConfig {
                    init_durations: Some(merged.iter().map(|u| u + 1e-3).collect()),
                    ..opts.fifa.clone()
                };
                Some(fifa_align(&p, &cfg)?)
            }
        };
        Ok(Prediction {
            decoded,
            transcript,
            segmentation,
            truncated,
            fallback,
            frame_logits: enc.frame_logits,
        })
    }

    fn alignment_durations(&self, e: &Mat, actions: &[ClassId]) -> Result<Vec<f64>> {
        let dec = self.decode_transcript(e, actions)?;
        let out = self.align(e, &dec.features, self.config.tau_infer)?;
        Ok(durations_from_assignment(&AttentionMatrix::new(
            out.assignment,
        )?))
    }

    fn alignment_segmentation(
        &self,
        e: &Mat,
        actions: &[ClassId],
        frames: usize,
    ) -> Result<Segmentation> {
        let u = self.alignment_durations(e, actions)?;
        let rounded = round_durations(&u, frames)?;
        let segments: Vec<Segment> = actions
            .iter()
            .zip(rounded)
            .filter(|(_, d)| *d > 0)
            .map(|(&a, d)| Segment::new(a, d))
            .collect();
        Ok(merge_repeats(&Segmentation::new(segments)?))
    }

    /// Stage-1 loss on one sample, with per-term values and parameter
    /// gradients for the encoder and decoder.
    pub fn stage1_loss_and_grads(
        &self,
        sample: &TrainSample,
        weights: &LossWeights,
    ) -> Result<(f64, LossParts, ParamGrads)> {
        self.stage1_step(sample, weights, None, true)
    }

    pub fn stage1_loss(&self, sample: &TrainSample, weights: &LossWeights) -> Result<f64> {
        self.stage1_step(sample, weights, None, false)
            .map(|(l, _, _)| l)
    }

    fn stage1_step(
        &self,
        sample: &TrainSample,
        weights: &LossWeights,
        rng: Option<&mut ChaCha8Rng>,
        with_grads: bool,
    ) -> Result<(f64, LossParts, ParamGrads)> {
        self.check_features(&sample.features)?;
        let targets = Targets::new(&self.config, &sample.target)?;
        let mut g = Graph::new();
        let b = Bound::new(&mut g, &self.params, &[ENCODER, DECODER]);
        let mut noise = Noise {
            rate: self.config.dropout,
            rng,
        };
        let mut x = sample.features.values().clone();
        if let Some(rng) = noise.rng.as_deref_mut() {
            if self.config.feature_drop > 0.0 {
                for t in 0..x.rows() {
                    if rng.random::<f64>() < self.config.feature_drop {
                        x.row_mut(t).iter_mut().for_each(|v| *v = 0.0);
                    }
                }
            }
        }
        let xin = g.leaf(x);
        let enc = self.encoder_nodes(&mut g, &b, xin, &mut noise);
        let dec = self.decoder_nodes(&mut g, &b, enc.e, targets.tokens.clone(), &mut noise);

        let frame = cross_entropy_node(&mut g, enc.logits, targets.frames.clone());
        let segment = cross_entropy_node(&mut g, dec.logits, targets.next_tokens.clone());
        let group_frame = group_ce_node(
            &mut g,
            enc.logits,
            &targets.frame_groups,
            self.config.group_frame,
        );
        let seg_logits = g.slice_rows(dec.logits, 0, targets.segments);
        let group_segment = group_ce_node(
            &mut g,
            seg_logits,
            &targets.segment_groups,
            self.config.group_segment,
        );
        let d = g.slice_rows(dec.x, 0, targets.segments);
        let ca = self.ca_loss_node(&mut g, enc.e, d, targets.frame_to_segment.clone());

        let terms = [
            (frame, weights.frame),
            (segment, weights.segment),
            (group_frame, weights.group_frame),
            (group_segment, weights.group_segment),
            (ca, weights.cross_attention),
        ];
        let mut total = None;
        for (node, w) in terms {
            let term = g.scale(node, w);
            total = Some(match total {
                None => term,
                Some(acc) => g.add(acc, term),
            });
        }
        let total = total.expect("five terms");
        let parts = LossParts {
            frame: g.scalar(frame),
            segment: g.scalar(segment),
            group_frame: g.scalar(group_frame),
            group_segment: g.scalar(group_segment),
            cross_attention: g.scalar(ca),
        };
        let loss = g.scalar(total);
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "stage-1 loss is {loss} on {}",
                sample.name
            )));
        }
        let grads = if with_grads {
            b.grads(&g.backward(total))
        } else {
            Vec::new()
        };
        Ok((loss, parts, grads))
    }

    /// Frozen encoder and teacher-forced decoder features for stage 2.
    pub fn align_inputs(&self, sample: &TrainSample) -> Result<AlignInputs> {
        let targets = Targets::new(&self.config, &sample.target)?;
        let enc = self.encode(&sample.features)?;
        let dec = self.decode_transcript(&enc.features, &targets.tokens[1..])?;
        Ok(AlignInputs {
            encoder: enc.features,
            decoder: dec.features,
            frame_to_segment: targets.frame_to_segment.to_vec(),
        })
    }

    /// Stage-2 loss at `tau_train` with gradients for the alignment decoder.
    pub fn stage2_loss_and_grads(&self, inputs: &AlignInputs) -> Result<(f64, ParamGrads)> {
        self.stage2_step(inputs, None, true)
    }

    pub fn stage2_loss(&self, inputs: &AlignInputs) -> Result<f64> {
        self.stage2_step(inputs, None, false).map(|(l, _)| l)
    }

    fn stage2_step(
        &self,
        inputs: &AlignInputs,
        rng: Option<&mut ChaCha8Rng>,
        with_grads: bool,
    ) -> Result<(f64, Vec<(usize, Mat)>)> {
        let mut g = Graph::new();
        let b = Bound::new(&mut g, &self.params, &[ALIGNER]);
        let e = g.leaf(inputs.encoder.clone());
        let d = g.leaf(inputs.decoder.clone());
        let mut noise = Noise {
            rate: self.config.dropout,
            rng,
        };
        let (_, scores) = self.align_nodes(&mut g, &b, e, d, &mut noise);
        let scores = g.scale(scores, 1.0 / self.config.tau_train);
        let loss =
            cross_attention_logits_node(&mut g, scores, Rc::new(inputs.frame_to_segment.clone()));
        let value = g.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Numeric(format!("stage-2 loss is {value}")));
        }
        let grads = if with_grads {
            b.grads(&g.backward(loss))
        } else {
            Vec::new()
        };
        Ok((value, grads))
    }

    /// Trains encoder and decoder on the five-term objective, one video per
    /// step. On a non-finite loss or gradient the parameters are left at the
    /// last good step and a numeric error is returned.
    pub fn train_stage1(
        &mut self,
        data: &[TrainSample],
        cfg: &TrainConfig,
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<Vec<EpochLog>> {
        if data.is_empty() {
            return invalid("no training videos");
        }
        for s in data {
            Targets::new(&self.config, &s.target)?;
            self.check_features(&s.features)?;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut adam = Adam::new(cfg);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut logs = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            if cfg.shuffle {
                order.shuffle(&mut rng);
            }
            let mut sum = 0.0;
            let mut parts = LossParts::default();
            for &i in &order {
                let (loss, p, grads) =
                    self.stage1_step(&data[i], &cfg.weights, Some(&mut rng), true)?;
                check_grads(&grads, &data[i].name)?;
                adam.update(&mut self.params, &grads);
                sum += loss;
                parts.frame += p.frame;
                parts.segment += p.segment;
                parts.group_frame += p.group_frame;
                parts.group_segment += p.group_segment;
                parts.cross_attention += p.cross_attention;
            }
            let k = data.len() as f64;
            let log = EpochLog {
                epoch,
                loss: sum / k,
                parts: LossParts {
                    frame: parts.frame / k,
                    segment: parts.segment / k,
                    group_frame: parts.group_frame / k,
                    group_segment: parts.group_segment / k,
                    cross_attention: parts.cross_attention / k,
                },
            };
            on_epoch(&log);
            logs.push(log);
        }
        Ok(logs)
    }

    /// Trains only the alignment decoder on top of the frozen network.
    pub fn train_stage2(
        &mut self,
        data: &[TrainSample],
        cfg: &TrainConfig,
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<Vec<EpochLog>> {
        if data.is_empty() {
            return invalid("no training videos");
        }
        let inputs = data
            .iter()
            .map(|s| self.align_inputs(s))
            .collect::<Result<Vec<_>>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(2);
        let mut adam = Adam::new(cfg);
        let mut order: Vec<usize> = (0..data.len()).collect();
        let mut logs = Vec::with_capacity(cfg.epochs);
        for epoch in 0..cfg.epochs {
            if cfg.shuffle {
                order.shuffle(&mut rng);
            }
            let mut sum = 0.0;
            for &i in &order {
                let (loss, grads) = self.stage2_step(&inputs[i], Some(&mut rng), true)?;
                check_grads(&grads, &data[i].name)?;
                adam.update(&mut self.params, &grads);
                sum += loss;
            }
            let loss = sum / data.len() as f64;
            let log = EpochLog {
                epoch,
                loss,
                parts: LossParts {
                    cross_attention: loss,
                    ..Default::default()
                },
            };
            on_epoch(&log);
            logs.push(log);
        }
        Ok(logs)
    }
}

fn check_grads(grads: &[(usize, Mat)], name: &str) -> Result<()> {
    if grads.iter().all(|(_, g)| g.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite gradient on {name}")))
    }
}

/// Sums real-valued durations over runs of equal adjacent actions.
fn merge_real_durations(actions: &[ClassId], durations: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    for (i, (&a, &u)) in actions.iter().zip(durations).enumerate() {
        if i > 0 && actions[i - 1] == a {
            *out.last_mut().expect("non-empty") += u;
        } else {
            out.push(u);
        }
    }
    out
}
