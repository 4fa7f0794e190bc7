//! Frame, video and report encoders mapping into the shared embedding space.
//!
//! * frame: `F → H → D_frame`, two affine layers with a tanh between them
//! * video: per-frame embeddings pooled as `[mean_t e_t ; mean_t |e_{t+1} − e_t|]`,
//!   then one affine projection `2·D_frame → D`
//! * report: `F_text → H → D`, same shape as the frame MLP
//!
//! Backward passes accumulate into an [`EncoderParams`] used as a gradient
//! buffer.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{Report, Study, VideoClip, ViewLabel};
use crate::error::{Error, Result};
use crate::math::{Mat64, Vec64};
use crate::rng::Rng;

/// Bounds on `exp(log_temperature)`.
pub const TEMPERATURE_MIN: f64 = 0.01;
pub const TEMPERATURE_MAX: f64 = 100.0;
pub const INITIAL_TEMPERATURE: f64 = 0.07;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderDims {
    pub frame_dim: usize,
    pub text_dim: usize,
    pub hidden: usize,
    pub frame_embed: usize,
    pub embed: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        EncoderDims {
            frame_dim: 32,
            text_dim: 24,
            hidden: 64,
            frame_embed: 32,
            embed: 64,
        }
    }
}

impl EncoderDims {
    pub fn validate(&self) -> Result<()> {
        if [self.frame_dim, self.text_dim, self.hidden, self.frame_embed, self.embed].contains(&0) {
            return Err(Error::Validation("encoder dimensions must be positive".into()));
        }
        Ok(())
    }
}

/// Affine layer `y = W x + b` with `W` stored out × in.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Mat64,
    pub bias: Vec<f64>,
}

impl Dense {
    fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Dense {
            weight: Mat64::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    /// Glorot-uniform weights, zero bias.
    fn glorot(out_dim: usize, in_dim: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..out_dim * in_dim)
            .map(|_| rng.uniform_range(-bound, bound))
            .collect();
        Dense {
            weight: Mat64::from_vec_unchecked(out_dim, in_dim, data),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    fn forward_into(&self, x: &[f64], out: &mut [f64]) {
        for ((o, row), b) in out.iter_mut().zip(self.weight.iter_rows()).zip(&self.bias) {
            *o = b + crate::math::dot(row, x);
        }
    }

    /// `grad += dy ⊗ x`, `dbias += dy`; returns nothing, writes `Wᵀ dy` into `dx` if given.
    fn backward_into(&self, x: &[f64], dy: &[f64], grad: &mut Dense, dx: Option<&mut [f64]>) {
        let cols = self.in_dim();
        let gw = grad.weight.as_mut_slice();
        for (i, &d) in dy.iter().enumerate() {
            if d == 0.0 {
                continue;
            }
            grad.bias[i] += d;
            for (g, xi) in gw[i * cols..(i + 1) * cols].iter_mut().zip(x) {
                *g += d * xi;
            }
        }
        if let Some(dx) = dx {
            dx.iter_mut().for_each(|v| *v = 0.0);
            for (row, &d) in self.weight.iter_rows().zip(dy) {
                if d == 0.0 {
                    continue;
                }
                for (o, w) in dx.iter_mut().zip(row) {
                    *o += d * w;
                }
            }
        }
    }
}

/// Every trainable weight of one model, plus the learnable log-temperature.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub dims: EncoderDims,
    pub frame_hidden: Dense,
    pub frame_out: Dense,
    pub temporal_proj: Dense,
    pub text_hidden: Dense,
    pub text_out: Dense,
    pub log_temperature: f64,
}

/// Named flat views over the parameter tensors, in a fixed order.
pub const TENSOR_NAMES: [&str; 11] = [
    "frame_hidden.weight",
    "frame_hidden.bias",
    "frame_out.weight",
    "frame_out.bias",
    "temporal_proj.weight",
    "temporal_proj.bias",
    "text_hidden.weight",
    "text_hidden.bias",
    "text_out.weight",
    "text_out.bias",
    "log_temperature",
];

impl EncoderParams {
    pub fn init(dims: EncoderDims, rng: &mut Rng) -> Self {
        let frame_hidden = Dense::glorot(dims.hidden, dims.frame_dim, rng);
        let frame_out = Dense::glorot(dims.frame_embed, dims.hidden, rng);
        let temporal_proj = Dense::glorot(dims.embed, 2 * dims.frame_embed, rng);
        let text_hidden = Dense::glorot(dims.hidden, dims.text_dim, rng);
        let text_out = Dense::glorot(dims.embed, dims.hidden, rng);
        EncoderParams {
            dims,
            frame_hidden,
            frame_out,
            temporal_proj,
            text_hidden,
            text_out,
            log_temperature: INITIAL_TEMPERATURE.ln(),
        }
    }

    /// All-zero parameters (also used as a gradient accumulator).
    pub fn zeros(dims: EncoderDims) -> Self {
        EncoderParams {
            dims,
            frame_hidden: Dense::zeros(dims.hidden, dims.frame_dim),
            frame_out: Dense::zeros(dims.frame_embed, dims.hidden),
            temporal_proj: Dense::zeros(dims.embed, 2 * dims.frame_embed),
            text_hidden: Dense::zeros(dims.hidden, dims.text_dim),
            text_out: Dense::zeros(dims.embed, dims.hidden),
            log_temperature: 0.0,
        }
    }

    pub fn temperature(&self) -> f64 {
        self.log_temperature.exp()
    }

    pub fn clamp_temperature(&mut self) {
        self.log_temperature = self
            .log_temperature
            .clamp(TEMPERATURE_MIN.ln(), TEMPERATURE_MAX.ln());
    }

    pub fn tensors(&self) -> [&[f64]; 11] {
        [
            self.frame_hidden.weight.as_slice(),
            &self.frame_hidden.bias,
            self.frame_out.weight.as_slice(),
            &self.frame_out.bias,
            self.temporal_proj.weight.as_slice(),
            &self.temporal_proj.bias,
            self.text_hidden.weight.as_slice(),
            &self.text_hidden.bias,
            self.text_out.weight.as_slice(),
            &self.text_out.bias,
            std::slice::from_ref(&self.log_temperature),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 11] {
        [
            self.frame_hidden.weight.as_mut_slice(),
            &mut self.frame_hidden.bias,
            self.frame_out.weight.as_mut_slice(),
            &mut self.frame_out.bias,
            self.temporal_proj.weight.as_mut_slice(),
            &mut self.temporal_proj.bias,
            self.text_hidden.weight.as_mut_slice(),
            &mut self.text_hidden.bias,
            self.text_out.weight.as_mut_slice(),
            &mut self.text_out.bias,
            std::slice::from_mut(&mut self.log_temperature),
        ]
    }

    /// Shapes matching [`TENSOR_NAMES`]; vectors are `[n]`, the scalar is `[]`.
    pub fn shapes(&self) -> [Vec<usize>; 11] {
        let m = |d: &Dense| vec![d.out_dim(), d.in_dim()];
        let b = |d: &Dense| vec![d.out_dim()];
        [
            m(&self.frame_hidden),
            b(&self.frame_hidden),
            m(&self.frame_out),
            b(&self.frame_out),
            m(&self.temporal_proj),
            b(&self.temporal_proj),
            m(&self.text_hidden),
            b(&self.text_hidden),
            m(&self.text_out),
            b(&self.text_out),
            vec![],
        ]
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &EncoderParams) {
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// One of the four study-level encoding rules of the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncodingMode {
    MultiVideo,
    #[serde(rename = "multi_video_4ch")]
    MultiVideo4ch,
    SingleVideo,
    SingleImage,
}

impl EncodingMode {
    pub const ALL: [EncodingMode; 4] = [
        EncodingMode::MultiVideo,
        EncodingMode::MultiVideo4ch,
        EncodingMode::SingleVideo,
        EncodingMode::SingleImage,
    ];

    /// Modes that own a trained parameter set. MultiVideo-4CH reuses MultiVideo's.
    pub const TRAINED: [EncodingMode; 3] = [
        EncodingMode::MultiVideo,
        EncodingMode::SingleVideo,
        EncodingMode::SingleImage,
    ];

    /// Display name used in tables.
    pub fn label(self) -> &'static str {
        match self {
            EncodingMode::MultiVideo => "MultiVideo",
            EncodingMode::MultiVideo4ch => "MultiVideo-4CH",
            EncodingMode::SingleVideo => "SingleVideo",
            EncodingMode::SingleImage => "SingleImage",
        }
    }

    /// Identifier used on the command line and in file names.
    pub fn key(self) -> &'static str {
        match self {
            EncodingMode::MultiVideo => "multi_video",
            EncodingMode::MultiVideo4ch => "multi_video_4ch",
            EncodingMode::SingleVideo => "single_video",
            EncodingMode::SingleImage => "single_image",
        }
    }

    /// Mode whose trained parameters this mode evaluates with.
    pub fn weights_from(self) -> EncodingMode {
        match self {
            EncodingMode::MultiVideo4ch => EncodingMode::MultiVideo,
            m => m,
        }
    }

    /// Whether only 4CH clips are used.
    pub fn ch4_only(self) -> bool {
        !matches!(self, EncodingMode::MultiVideo)
    }
}

impl fmt::Display for EncodingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for EncodingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        EncodingMode::ALL
            .into_iter()
            .find(|m| m.key() == norm || m.label().to_ascii_lowercase().replace('-', "_") == norm)
            .ok_or_else(|| Error::InvalidInput(format!("unknown encoding mode {s:?}")))
    }
}

/// Intermediate activations of a frame MLP pass.
#[derive(Debug, Clone)]
pub struct FrameCache {
    pub hidden: Vec<f64>,
    pub embed: Vec<f64>,
}

fn frame_forward(p: &EncoderParams, frame: &[f64]) -> FrameCache {
    let mut hidden = vec![0.0; p.dims.hidden];
    p.frame_hidden.forward_into(frame, &mut hidden);
    hidden.iter_mut().for_each(|h| *h = h.tanh());
    let mut embed = vec![0.0; p.dims.frame_embed];
    p.frame_out.forward_into(&hidden, &mut embed);
    FrameCache { hidden, embed }
}

fn frame_backward(
    p: &EncoderParams,
    frame: &[f64],
    cache: &FrameCache,
    d_embed: &[f64],
    grad: &mut EncoderParams,
    scratch: &mut Vec<f64>,
) {
    scratch.resize(p.dims.hidden, 0.0);
    p.frame_out
        .backward_into(&cache.hidden, d_embed, &mut grad.frame_out, Some(scratch));
    for (d, h) in scratch.iter_mut().zip(&cache.hidden) {
        *d *= 1.0 - h * h;
    }
    p.frame_hidden
        .backward_into(frame, scratch, &mut grad.frame_hidden, None);
}

pub fn encode_frame(p: &EncoderParams, frame: &Vec64) -> Result<Vec64> {
    if frame.len() != p.dims.frame_dim {
        return Err(Error::dim(p.dims.frame_dim, frame.len(), "encode_frame"));
    }
    Ok(Vec64::from_vec_unchecked(frame_forward(p, frame.as_slice()).embed))
}

/// Activations of a video pass, kept for backprop.
#[derive(Debug, Clone)]
pub struct VideoCache {
    pub frames: Vec<FrameCache>,
    pub pooled: Vec<f64>,
    pub output: Vec<f64>,
}

/// Mean embedding and mean absolute successive difference, concatenated.
fn temporal_pool(embeds: &[&[f64]], dim: usize) -> Vec<f64> {
    let n = embeds.len();
    let mut pooled = vec![0.0; 2 * dim];
    let (mean, motion) = pooled.split_at_mut(dim);
    for e in embeds {
        for (m, x) in mean.iter_mut().zip(e.iter()) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    if n > 1 {
        for w in embeds.windows(2) {
            for ((m, a), b) in motion.iter_mut().zip(w[0].iter()).zip(w[1].iter()) {
                *m += (b - a).abs();
            }
        }
        motion.iter_mut().for_each(|m| *m /= (n - 1) as f64);
    }
    pooled
}

pub(crate) fn video_forward(p: &EncoderParams, clip: &VideoClip) -> VideoCache {
    let frames: Vec<FrameCache> = clip
        .frames
        .iter_rows()
        .map(|x| frame_forward(p, x))
        .collect();
    let embeds: Vec<&[f64]> = frames.iter().map(|c| c.embed.as_slice()).collect();
    let pooled = temporal_pool(&embeds, p.dims.frame_embed);
    let mut output = vec![0.0; p.dims.embed];
    p.temporal_proj.forward_into(&pooled, &mut output);
    VideoCache {
        frames,
        pooled,
        output,
    }
}

pub(crate) fn video_backward(
    p: &EncoderParams,
    clip: &VideoClip,
    cache: &VideoCache,
    d_out: &[f64],
    grad: &mut EncoderParams,
) {
    let df = p.dims.frame_embed;
    let mut d_pooled = vec![0.0; 2 * df];
    p.temporal_proj
        .backward_into(&cache.pooled, d_out, &mut grad.temporal_proj, Some(&mut d_pooled));
    let n = cache.frames.len();
    let (d_mean, d_motion) = d_pooled.split_at(df);
    let mut d_embeds: Vec<Vec<f64>> = vec![d_mean.iter().map(|d| d / n as f64).collect(); n];
    if n > 1 {
        let scale = 1.0 / (n - 1) as f64;
        for t in 0..n - 1 {
            let (a, b) = (&cache.frames[t].embed, &cache.frames[t + 1].embed);
            for k in 0..df {
                let diff = b[k] - a[k];
                let s = if diff > 0.0 {
                    1.0
                } else if diff < 0.0 {
                    -1.0
                } else {
                    0.0
                };
                let g = d_motion[k] * s * scale;
                d_embeds[t + 1][k] += g;
                d_embeds[t][k] -= g;
            }
        }
    }
    let mut scratch = Vec::new();
    for ((x, c), d) in clip.frames.iter_rows().zip(&cache.frames).zip(&d_embeds) {
        frame_backward(p, x, c, d, grad, &mut scratch);
    }
}

fn check_clip(p: &EncoderParams, clip: &VideoClip, clip_len: usize) -> Result<()> {
    if clip.n_frames() != clip_len {
        return Err(Error::dim(clip_len, clip.n_frames(), "clip frame count"));
    }
    if clip.frame_dim() != p.dims.frame_dim {
        return Err(Error::dim(p.dims.frame_dim, clip.frame_dim(), "frame feature count"));
    }
    Ok(())
}

/// Embed a clip that must have exactly `clip_len` frames.
pub fn encode_video(p: &EncoderParams, clip: &VideoClip, clip_len: usize) -> Result<Vec64> {
    check_clip(p, clip, clip_len)?;
    Ok(Vec64::from_vec_unchecked(video_forward(p, clip).output))
}

/// Activations of a single-frame image pass (SingleImage training input).
#[derive(Debug, Clone)]
pub struct ImageCache {
    pub frame: FrameCache,
    pub output: Vec<f64>,
}

/// Project a frame-space embedding with a zeroed motion half.
fn project_static(p: &EncoderParams, embed: &[f64]) -> Vec<f64> {
    let mut pooled = vec![0.0; 2 * p.dims.frame_embed];
    pooled[..p.dims.frame_embed].copy_from_slice(embed);
    let mut out = vec![0.0; p.dims.embed];
    p.temporal_proj.forward_into(&pooled, &mut out);
    out
}

pub(crate) fn image_forward(p: &EncoderParams, frame: &[f64]) -> ImageCache {
    let frame_cache = frame_forward(p, frame);
    let output = project_static(p, &frame_cache.embed);
    ImageCache {
        frame: frame_cache,
        output,
    }
}

pub(crate) fn image_backward(
    p: &EncoderParams,
    frame: &[f64],
    cache: &ImageCache,
    d_out: &[f64],
    grad: &mut EncoderParams,
) {
    let df = p.dims.frame_embed;
    let mut pooled = vec![0.0; 2 * df];
    pooled[..df].copy_from_slice(&cache.frame.embed);
    let mut d_pooled = vec![0.0; 2 * df];
    p.temporal_proj
        .backward_into(&pooled, d_out, &mut grad.temporal_proj, Some(&mut d_pooled));
    let mut scratch = Vec::new();
    frame_backward(p, frame, &cache.frame, &d_pooled[..df], grad, &mut scratch);
}

/// Activations of a report pass.
#[derive(Debug, Clone)]
pub struct TextCache {
    pub hidden: Vec<f64>,
    pub output: Vec<f64>,
}

pub(crate) fn text_forward(p: &EncoderParams, features: &[f64]) -> TextCache {
    let mut hidden = vec![0.0; p.dims.hidden];
    p.text_hidden.forward_into(features, &mut hidden);
    hidden.iter_mut().for_each(|h| *h = h.tanh());
    let mut output = vec![0.0; p.dims.embed];
    p.text_out.forward_into(&hidden, &mut output);
    TextCache { hidden, output }
}

pub(crate) fn text_backward(
    p: &EncoderParams,
    features: &[f64],
    cache: &TextCache,
    d_out: &[f64],
    grad: &mut EncoderParams,
) {
    let mut d_hidden = vec![0.0; p.dims.hidden];
    p.text_out
        .backward_into(&cache.hidden, d_out, &mut grad.text_out, Some(&mut d_hidden));
    for (d, h) in d_hidden.iter_mut().zip(&cache.hidden) {
        *d *= 1.0 - h * h;
    }
    p.text_hidden
        .backward_into(features, &d_hidden, &mut grad.text_hidden, None);
}

pub fn encode_report(p: &EncoderParams, r: &Report) -> Result<Vec64> {
    if r.features.len() != p.dims.text_dim {
        return Err(Error::dim(p.dims.text_dim, r.features.len(), "encode_report"));
    }
    Ok(Vec64::from_vec_unchecked(
        text_forward(p, r.features.as_slice()).output,
    ))
}

/// Study-level embedding under an encoding mode.
///
/// MultiVideo averages all clip embeddings; the 4CH modes average only 4CH
/// clips; SingleImage averages frame embeddings over every frame of every 4CH
/// clip and projects that mean with a zero motion half.
pub fn encode_study(
    p: &EncoderParams,
    s: &Study,
    mode: EncodingMode,
    clip_len: usize,
) -> Result<Vec64> {
    let clips: Vec<&VideoClip> = if mode.ch4_only() {
        s.clips_of(ViewLabel::Ch4).collect()
    } else {
        s.clips.iter().collect()
    };
    if clips.is_empty() {
        return Err(Error::MissingView {
            study_id: s.study_id.clone(),
            mode: mode.label().to_string(),
        });
    }
    for c in &clips {
        check_clip(p, c, clip_len)?;
    }
    match mode {
        EncodingMode::SingleImage => {
            let mut acc = vec![0.0; p.dims.frame_embed];
            let mut n = 0usize;
            for c in &clips {
                for x in c.frames.iter_rows() {
                    let e = frame_forward(p, x).embed;
                    acc.iter_mut().zip(&e).for_each(|(a, v)| *a += v);
                    n += 1;
                }
            }
            acc.iter_mut().for_each(|a| *a /= n as f64);
            Ok(Vec64::from_vec_unchecked(project_static(p, &acc)))
        }
        _ => {
            let embeds: Vec<Vec<f64>> = clips.iter().map(|c| video_forward(p, c).output).collect();
            crate::math::mean_vectors(&embeds)
        }
    }
}
