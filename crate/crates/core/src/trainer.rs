//! Mini-batch contrastive training with Adam and a warmup + cosine schedule.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contrastive::{contrastive_loss, BatchEmbeddings};
use crate::data::{Report, Study, VideoClip, ViewLabel};
use crate::encoders::{
    image_backward, image_forward, text_backward, text_forward, video_backward, video_forward,
    EncoderDims, EncoderParams, EncodingMode, ImageCache, TextCache, VideoCache,
};
use crate::math::Mat64;
use crate::metrics::{evaluate_mode, RECALL_KS};
use crate::rng::Rng;
use crate::{Error, Result};

const TAG_INIT: u64 = 0x1_0000;
const TAG_PAIRS: u64 = 0x2_0000;
/// Samples per backward work unit. Gradients are summed inside a unit in
/// sample order, then across units in unit order, whatever the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: EncodingMode,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// Validation interval in steps; 0 validates only after the last step.
    pub eval_every: usize,
    #[serde(default)]
    pub seed: u64,
}

impl TrainConfig {
    pub fn for_mode(mode: EncodingMode) -> Self {
        Self {
            mode,
            batch_size: if mode == EncodingMode::SingleImage { 256 } else { 64 },
            lr_peak: 1e-3,
            warmup_steps: 200,
            total_steps: 5000,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            eval_every: 500,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Validation(m));
        if self.mode == EncodingMode::MultiVideo4ch {
            return fail("multi_video_4ch is evaluated with multi_video weights and is not trained".into());
        }
        if self.batch_size < 2 {
            return fail(format!("batch_size must be at least 2, got {}", self.batch_size));
        }
        if self.warmup_steps >= self.total_steps {
            return fail(format!(
                "warmup_steps ({}) must be below total_steps ({})",
                self.warmup_steps, self.total_steps
            ));
        }
        if !(self.lr_peak.is_finite() && self.lr_peak >= 0.0) {
            return fail(format!("lr_peak must be finite and non-negative, got {}", self.lr_peak));
        }
        for (name, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return fail(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) {
            return fail(format!("adam_eps must be positive, got {}", self.adam_eps));
        }
        Ok(())
    }
}

/// Learning rate after linear warmup then cosine decay to zero.
pub fn lr_at(step: usize, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::InvalidInput(format!(
            "step {step} beyond total_steps {}",
            cfg.total_steps
        )));
    }
    if cfg.warmup_steps >= cfg.total_steps {
        return Err(Error::Validation("warmup_steps must be below total_steps".into()));
    }
    if step < cfg.warmup_steps {
        return Ok(cfg.lr_peak * step as f64 / cfg.warmup_steps as f64);
    }
    if step == cfg.total_steps {
        return Ok(0.0);
    }
    let progress = (step - cfg.warmup_steps) as f64 / (cfg.total_steps - cfg.warmup_steps) as f64;
    Ok(cfg.lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

#[derive(Debug, Clone, Copy)]
pub enum TrainInput<'a> {
    Clip(&'a VideoClip),
    Frame(&'a [f64]),
}

#[derive(Debug, Clone, Copy)]
pub struct TrainingPair<'a> {
    pub study: usize,
    pub input: TrainInput<'a>,
    pub report: &'a Report,
}

/// Endless stream of training pairs; every epoch visits each eligible clip
/// once in a freshly shuffled order.
#[derive(Debug, Clone)]
pub struct PairStream<'a> {
    studies: &'a [Study],
    mode: EncodingMode,
    clips: Vec<(usize, usize)>,
    pos: usize,
    rng: Rng,
}

impl<'a> PairStream<'a> {
    /// Number of eligible clips, i.e. samples per epoch.
    pub fn epoch_len(&self) -> usize {
        self.clips.len()
    }
}

impl<'a> Iterator for PairStream<'a> {
    type Item = TrainingPair<'a>;

    fn next(&mut self) -> Option<TrainingPair<'a>> {
        if self.pos == self.clips.len() {
            self.rng.shuffle(&mut self.clips);
            self.pos = 0;
        }
        let (s, c) = self.clips[self.pos];
        self.pos += 1;
        let study = &self.studies[s];
        let clip = &study.clips[c];
        let input = match self.mode {
            EncodingMode::SingleImage => TrainInput::Frame(clip.frames.row(self.rng.below(clip.n_frames()))),
            _ => TrainInput::Clip(clip),
        };
        Some(TrainingPair {
            study: s,
            input,
            report: &study.report,
        })
    }
}

pub fn make_training_pairs(studies: &[Study], mode: EncodingMode, rng: Rng) -> Result<PairStream<'_>> {
    let clips: Vec<(usize, usize)> = studies
        .iter()
        .enumerate()
        .flat_map(|(s, study)| {
            study
                .clips
                .iter()
                .enumerate()
                .filter(move |(_, c)| !mode.ch4_only() || c.view == ViewLabel::Ch4)
                .map(move |(c, _)| (s, c))
        })
        .collect();
    if clips.is_empty() {
        return Err(Error::Validation(format!(
            "no clips eligible for training under mode {}",
            mode.label()
        )));
    }
    Ok(PairStream {
        studies,
        mode,
        pos: clips.len(),
        clips,
        rng,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: usize,
    pub mcmrr_v2r: f64,
    pub mcmrr_r2v: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub mode: EncodingMode,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainHistory {
    /// Mean loss over a fraction of steps taken from the start (`from_end`
    /// false) or the end.
    pub fn mean_loss(&self, fraction: f64, from_end: bool) -> f64 {
        let n = ((self.steps.len() as f64 * fraction).ceil() as usize).clamp(1, self.steps.len().max(1));
        let slice = if from_end {
            &self.steps[self.steps.len() - n..]
        } else {
            &self.steps[..n]
        };
        slice.iter().map(|s| s.loss).sum::<f64>() / slice.len() as f64
    }
}

pub enum TrainEvent<'a> {
    Step(&'a StepRecord),
    Eval(&'a EvalRecord),
}

struct Adam {
    m: EncoderParams,
    v: EncoderParams,
    t: i32,
}

impl Adam {
    fn new(dims: EncoderDims) -> Self {
        Self {
            m: EncoderParams::zeros(dims),
            v: EncoderParams::zeros(dims),
            t: 0,
        }
    }

    fn step(&mut self, params: &mut EncoderParams, grad: &EncoderParams, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let tensors = params
            .tensors_mut()
            .into_iter()
            .zip(grad.tensors())
            .zip(self.m.tensors_mut())
            .zip(self.v.tensors_mut());
        for (((p, g), m), v) in tensors {
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let update = (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps);
                p[i] -= lr * update;
            }
        }
    }
}

enum InputCache {
    Video(VideoCache),
    Image(ImageCache),
}

struct SampleCache {
    input: InputCache,
    text: TextCache,
}

fn forward(p: &EncoderParams, pair: &TrainingPair<'_>) -> SampleCache {
    let input = match pair.input {
        TrainInput::Clip(c) => InputCache::Video(video_forward(p, c)),
        TrainInput::Frame(f) => InputCache::Image(image_forward(p, f)),
    };
    SampleCache {
        input,
        text: text_forward(p, pair.report.features.as_slice()),
    }
}

fn input_output(c: &SampleCache) -> &[f64] {
    match &c.input {
        InputCache::Video(v) => &v.output,
        InputCache::Image(i) => &i.output,
    }
}

fn check_shapes(p: &EncoderParams, studies: &[Study], clip_len: usize) -> Result<()> {
    for s in studies {
        if s.report.features.len() != p.dims.text_dim {
            return Err(Error::dim(p.dims.text_dim, s.report.features.len(), "report features"));
        }
        for c in &s.clips {
            if c.n_frames() != clip_len {
                return Err(Error::dim(clip_len, c.n_frames(), "clip frame count"));
            }
            if c.frame_dim() != p.dims.frame_dim {
                return Err(Error::dim(p.dims.frame_dim, c.frame_dim(), "frame dimension"));
            }
        }
    }
    Ok(())
}

/// One optimization step's loss and gradient on a batch of pairs.
fn batch_gradient(
    p: &EncoderParams,
    batch: &[TrainingPair<'_>],
) -> Result<(f64, EncoderParams)> {
    let caches: Vec<SampleCache> = batch.par_iter().map(|pair| forward(p, pair)).collect();
    let d = p.dims.embed;
    let mut videos = Mat64::zeros(batch.len(), d);
    let mut reports = Mat64::zeros(batch.len(), d);
    for (i, c) in caches.iter().enumerate() {
        videos.row_mut(i).copy_from_slice(input_output(c));
        reports.row_mut(i).copy_from_slice(&c.text.output);
    }
    let lg = contrastive_loss(&BatchEmbeddings::new(videos, reports, p.temperature())?)?;
    let partials: Vec<EncoderParams> = batch
        .par_chunks(GRAD_CHUNK)
        .zip(caches.par_chunks(GRAD_CHUNK))
        .enumerate()
        .map(|(chunk, (pairs, caches))| {
            let mut g = EncoderParams::zeros(p.dims);
            for (k, (pair, c)) in pairs.iter().zip(caches).enumerate() {
                let row = chunk * GRAD_CHUNK + k;
                match (&pair.input, &c.input) {
                    (TrainInput::Clip(clip), InputCache::Video(vc)) => {
                        video_backward(p, clip, vc, lg.d_videos.row(row), &mut g)
                    }
                    (TrainInput::Frame(f), InputCache::Image(ic)) => {
                        image_backward(p, f, ic, lg.d_videos.row(row), &mut g)
                    }
                    _ => unreachable!("cache kind follows input kind"),
                }
                text_backward(p, pair.report.features.as_slice(), &c.text, lg.d_reports.row(row), &mut g);
            }
            g
        })
        .collect();
    let mut grad = EncoderParams::zeros(p.dims);
    for g in &partials {
        grad.add_assign(g);
    }
    grad.log_temperature = lg.d_log_tau;
    Ok((lg.loss, grad))
}

fn usable(studies: &[Study], mode: EncodingMode) -> Vec<Study> {
    studies
        .iter()
        .filter(|s| !mode.ch4_only() || s.has_view(ViewLabel::Ch4))
        .cloned()
        .collect()
}

/// Starting parameters drawn from the config seed.
pub fn initial_params(cfg: &TrainConfig, dims: EncoderDims) -> EncoderParams {
    EncoderParams::init(dims, &mut Rng::derive(cfg.seed, TAG_INIT))
}

/// Trains a fresh parameter set initialized from the config seed.
pub fn train(
    cfg: &TrainConfig,
    dims: EncoderDims,
    clip_len: usize,
    train_set: &[Study],
    valid_set: &[Study],
) -> Result<(EncoderParams, TrainHistory)> {
    train_from(cfg, initial_params(cfg, dims), clip_len, train_set, valid_set, &mut |_| {})
}

/// Trains starting from `init`, reporting every step and validation to
/// `observer`.
pub fn train_from(
    cfg: &TrainConfig,
    init: EncoderParams,
    clip_len: usize,
    train_set: &[Study],
    valid_set: &[Study],
    observer: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<(EncoderParams, TrainHistory)> {
    cfg.validate()?;
    init.dims.validate()?;
    if train_set.is_empty() {
        return Err(Error::EmptyInput("training set"));
    }
    check_shapes(&init, train_set, clip_len)?;
    check_shapes(&init, valid_set, clip_len)?;
    let valid = usable(valid_set, cfg.mode);
    let mut stream = make_training_pairs(train_set, cfg.mode, Rng::derive(cfg.seed, TAG_PAIRS))?;

    let mut params = init;
    let mut adam = Adam::new(params.dims);
    let mut history = TrainHistory {
        mode: cfg.mode,
        steps: Vec::with_capacity(cfg.total_steps),
        evals: Vec::new(),
    };
    let diverged = |step: usize, detail: String| Error::Divergence { step, detail };

    for step in 0..cfg.total_steps {
        if !params.is_finite() {
            return Err(diverged(step, "non-finite parameters".into()));
        }
        let lr = lr_at(step, cfg)?;
        let batch: Vec<TrainingPair<'_>> = stream.by_ref().take(cfg.batch_size).collect();
        let (loss, grad) = batch_gradient(&params, &batch).map_err(|e| diverged(step, e.to_string()))?;
        if !loss.is_finite() {
            return Err(diverged(step, format!("loss is {loss}")));
        }
        if !grad.is_finite() {
            return Err(diverged(step, "non-finite gradient".into()));
        }
        adam.step(&mut params, &grad, lr, cfg);
        params.clamp_temperature();
        let record = StepRecord { step, lr, loss };
        history.steps.push(record);
        observer(TrainEvent::Step(&record));

        let last = step + 1 == cfg.total_steps;
        let due = cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0;
        if (due || last) && valid.len() >= 2 {
            let e = evaluate_mode(&params, &valid, cfg.mode, clip_len, &RECALL_KS)?;
            let rec = EvalRecord {
                step,
                mcmrr_v2r: e.report.mcmrr_v2r,
                mcmrr_r2v: e.report.mcmrr_r2v,
            };
            history.evals.push(rec);
            observer(TrainEvent::Eval(&rec));
        }
    }
    if !params.is_finite() {
        return Err(diverged(cfg.total_steps, "non-finite parameters".into()));
    }
    Ok((params, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, GenConfig};

    fn cfg(mode: EncodingMode) -> TrainConfig {
        TrainConfig {
            batch_size: 8,
            warmup_steps: 5,
            total_steps: 30,
            eval_every: 10,
            seed: 4,
            ..TrainConfig::for_mode(mode)
        }
    }

    fn tiny_gen() -> GenConfig {
        GenConfig {
            n_studies: 40,
            clip_len: 6,
            seed: 11,
            ..GenConfig::default()
        }
    }

    fn tiny_dims(g: &GenConfig) -> EncoderDims {
        EncoderDims {
            frame_dim: g.frame_dim,
            text_dim: g.text_dim,
            hidden: 12,
            frame_embed: 8,
            embed: 10,
        }
    }

    #[test]
    fn schedule_examples() {
        let c = TrainConfig::for_mode(EncodingMode::MultiVideo);
        assert_eq!(lr_at(0, &c).unwrap(), 0.0);
        assert_eq!(lr_at(c.warmup_steps, &c).unwrap(), c.lr_peak);
        let mid = (c.warmup_steps + c.total_steps) / 2;
        assert!((lr_at(mid, &c).unwrap() - c.lr_peak / 2.0).abs() < 1e-12);
        assert_eq!(lr_at(c.total_steps, &c).unwrap(), 0.0);
        assert!(lr_at(c.total_steps + 1, &c).is_err());
    }

    #[test]
    fn schedule_is_continuous() {
        let c = TrainConfig::for_mode(EncodingMode::MultiVideo);
        let step = c.lr_peak / c.warmup_steps as f64;
        for s in 0..c.total_steps {
            let (a, b) = (lr_at(s, &c).unwrap(), lr_at(s + 1, &c).unwrap());
            assert!((a - b).abs() <= step * 1.0000001, "jump at {s}");
            assert!((0.0..=c.lr_peak).contains(&a));
        }
    }

    #[test]
    fn config_validation() {
        let mut c = cfg(EncodingMode::MultiVideo);
        c.batch_size = 1;
        assert!(c.validate().is_err());
        let mut c = cfg(EncodingMode::MultiVideo);
        c.warmup_steps = c.total_steps;
        assert!(c.validate().is_err());
        assert!(cfg(EncodingMode::MultiVideo4ch).validate().is_err());
        assert_eq!(TrainConfig::for_mode(EncodingMode::SingleImage).batch_size, 256);
    }

    #[test]
    fn pair_streams_follow_mode() {
        let studies = generate_dataset(&tiny_gen()).unwrap();
        let all: usize = studies.iter().map(|s| s.clips.len()).sum();
        let ch4: usize = studies.iter().map(|s| s.clips_of(ViewLabel::Ch4).count()).sum();
        assert!(ch4 < all);

        let mv = make_training_pairs(&studies, EncodingMode::MultiVideo, Rng::new(1)).unwrap();
        assert_eq!(mv.epoch_len(), all);
        let sv = make_training_pairs(&studies, EncodingMode::SingleVideo, Rng::new(1)).unwrap();
        assert_eq!(sv.epoch_len(), ch4);
        for p in sv.take(3 * ch4) {
            match p.input {
                TrainInput::Clip(c) => assert_eq!(c.view, ViewLabel::Ch4),
                TrainInput::Frame(_) => panic!("video mode yielded a frame"),
            }
        }
        let si = make_training_pairs(&studies, EncodingMode::SingleImage, Rng::new(1)).unwrap();
        for p in si.take(50) {
            match p.input {
                TrainInput::Frame(f) => assert_eq!(f.len(), tiny_gen().frame_dim),
                TrainInput::Clip(_) => panic!("image mode yielded a clip"),
            }
        }
    }

    #[test]
    fn epochs_cover_every_clip_in_shuffled_order() {
        let studies = generate_dataset(&tiny_gen()).unwrap();
        let stream = make_training_pairs(&studies, EncodingMode::MultiVideo, Rng::new(2)).unwrap();
        let n = stream.epoch_len();
        let key = |p: TrainingPair<'_>| match p.input {
            TrainInput::Clip(c) => (p.study, c as *const VideoClip as usize),
            _ => unreachable!(),
        };
        let order: Vec<_> = stream.clone().take(2 * n).map(key).collect();
        let (e1, e2) = order.split_at(n);
        let mut s1 = e1.to_vec();
        let mut s2 = e2.to_vec();
        s1.sort_unstable();
        s2.sort_unstable();
        s1.dedup();
        assert_eq!(s1.len(), n);
        assert_eq!(s1, s2);
        assert_ne!(e1, e2);
        let again: Vec<_> = make_training_pairs(&studies, EncodingMode::MultiVideo, Rng::new(2))
            .unwrap()
            .take(2 * n)
            .map(key)
            .collect();
        assert_eq!(order, again);
    }

    #[test]
    fn no_eligible_clips_is_an_error() {
        let mut studies = generate_dataset(&tiny_gen()).unwrap();
        for s in &mut studies {
            s.clips.retain(|c| c.view != ViewLabel::Ch4);
            if s.clips.is_empty() {
                s.clips.push(VideoClip {
                    view: ViewLabel::Lax,
                    frames: Mat64::zeros(6, 32),
                });
            }
        }
        assert!(make_training_pairs(&studies, EncodingMode::SingleVideo, Rng::new(0)).is_err());
        assert!(make_training_pairs(&studies, EncodingMode::MultiVideo, Rng::new(0)).is_ok());
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let g = tiny_gen();
        let studies = generate_dataset(&g).unwrap();
        for mode in EncodingMode::TRAINED {
            let c = TrainConfig { lr_peak: 0.0, ..cfg(mode) };
            let init = EncoderParams::init(tiny_dims(&g), &mut Rng::new(9));
            let (out, hist) = train_from(&c, init.clone(), g.clip_len, &studies, &studies, &mut |_| {}).unwrap();
            assert_eq!(out, init);
            assert_eq!(hist.steps.len(), c.total_steps);
        }
    }

    #[test]
    fn history_follows_schedule() {
        let g = tiny_gen();
        let studies = generate_dataset(&g).unwrap();
        let c = cfg(EncodingMode::MultiVideo);
        let (_, h) = train(&c, tiny_dims(&g), g.clip_len, &studies, &studies).unwrap();
        for (i, s) in h.steps.iter().enumerate() {
            assert_eq!(s.step, i);
            assert_eq!(s.lr, lr_at(i, &c).unwrap());
        }
        assert_eq!(h.evals.iter().map(|e| e.step).collect::<Vec<_>>(), [9, 19, 29]);
    }

    #[test]
    fn deterministic_across_runs_and_thread_counts() {
        let g = tiny_gen();
        let studies = generate_dataset(&g).unwrap();
        for mode in EncodingMode::TRAINED {
            let c = cfg(mode);
            let run = |threads: usize| {
                rayon::ThreadPoolBuilder::new()
                    .num_threads(threads)
                    .build()
                    .unwrap()
                    .install(|| train(&c, tiny_dims(&g), g.clip_len, &studies, &studies).unwrap())
            };
            let (a, ha) = run(1);
            let (b, hb) = run(3);
            assert_eq!(a, b);
            assert_eq!(ha, hb);
        }
    }

    #[test]
    fn nan_parameters_abort() {
        let g = tiny_gen();
        let studies = generate_dataset(&g).unwrap();
        let mut init = EncoderParams::init(tiny_dims(&g), &mut Rng::new(1));
        init.text_out.weight.set(0, 0, f64::NAN);
        let err = train_from(&cfg(EncodingMode::MultiVideo), init, g.clip_len, &studies, &studies, &mut |_| {})
            .unwrap_err();
        assert!(matches!(err, Error::Divergence { step: 0, .. }), "{err}");
    }

    #[test]
    fn temperature_stays_clamped() {
        let g = tiny_gen();
        let studies = generate_dataset(&g).unwrap();
        let c = TrainConfig { lr_peak: 5.0, ..cfg(EncodingMode::MultiVideo) };
        let mut init = EncoderParams::init(tiny_dims(&g), &mut Rng::new(1));
        init.log_temperature = (0.0101f64).ln();
        if let Ok((p, _)) = train_from(&c, init, g.clip_len, &studies, &studies, &mut |_| {}) {
            let t = p.temperature();
            assert!((0.01 * (1.0 - 1e-12)..=100.0 * (1.0 + 1e-12)).contains(&t), "{t}");
        }
    }

    #[test]
    fn loss_decreases() {
        let g = GenConfig { n_studies: 120, ..tiny_gen() };
        let studies = generate_dataset(&g).unwrap();
        let c = TrainConfig {
            batch_size: 16,
            warmup_steps: 10,
            total_steps: 200,
            lr_peak: 3e-3,
            eval_every: 0,
            ..cfg(EncodingMode::MultiVideo)
        };
        let (_, h) = train(&c, tiny_dims(&g), g.clip_len, &studies, &studies).unwrap();
        assert!(h.mean_loss(0.1, true) < h.mean_loss(0.05, false), "{} vs {}", h.mean_loss(0.1, true), h.mean_loss(0.05, false));
    }
}
