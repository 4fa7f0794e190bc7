//! Seeded synthetic echo studies.
//!
//! Each study has a latent condition: static findings (seen through view-specific
//! masks) and motion findings (an oscillation amplitude, visible only across
//! frames). Frames of a clip of view `v` are
//!
//! ```text
//! frame_t = c_v + A_v (mask_v ⊙ z_static) + sin(ω t + φ₀) · B_v z_motion + noise
//! ```
//!
//! with `ω = 2π/T` and a per-clip random phase `φ₀`, so a single frame cannot
//! separate motion amplitude from phase. `c_v` is a fixed per-view appearance
//! that lets an encoder tell views apart. The report is a fixed linear image of
//! the whole latent plus a little noise.

use std::collections::BTreeMap;
use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use crate::data::{Report, Study, VideoClip, ViewLabel};
use crate::error::{Error, Result};
use crate::math::{Mat64, Vec64};
use crate::rng::Rng;

/// Number of levels on the severity grid {0, 1/3, 2/3, 1}.
pub const SEVERITY_LEVELS: usize = 4;
const SEVERITY_NAMES: [&str; SEVERITY_LEVELS] = ["none", "mild", "moderate", "severe"];

/// View proportions of the reference multi-view echo dataset (LAX, SAX, 2CH, 3CH, 4CH).
pub const REFERENCE_VIEW_PROPORTIONS: [f64; 5] = [0.269, 0.256, 0.088, 0.140, 0.247];

const TAG_MIXING: u64 = 0x4D49_5849;
const TAG_STUDY: u64 = 0x5354_5544;
const TAG_PATIENTS: u64 = 0x5041_5449;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenConfig {
    pub k_static: usize,
    pub k_motion: usize,
    /// F: features per frame.
    pub frame_dim: usize,
    /// F_text: report feature length.
    pub text_dim: usize,
    /// T: frames per clip.
    pub clip_len: usize,
    /// Static latent indices each view can see.
    pub view_masks: BTreeMap<ViewLabel, Vec<usize>>,
    /// Expected clips per study for each view (Poisson rate before capping).
    pub view_clip_rate: BTreeMap<ViewLabel, f64>,
    pub max_clips_per_view: usize,
    pub noise_frame: f64,
    pub noise_report: f64,
    /// Column scale of the static mixing matrices.
    pub static_gain: f64,
    /// Column scale of the motion mixing matrices.
    pub motion_gain: f64,
    /// Per-view deviation of the mixing matrices from the shared component.
    pub view_spread: f64,
    /// Norm scale of the fixed per-view appearance added to every frame.
    pub view_offset: f64,
    /// Fraction of each motion direction lying in the span of the static
    /// directions. At 1 a single frame cannot tell motion displacement from
    /// static appearance.
    pub motion_overlap: f64,
    /// Column scale of the motion findings in the report map, relative to
    /// the static findings.
    pub report_motion_weight: f64,
    pub n_studies: usize,
    /// Patients per study: the pool holds `round(n_studies · fraction)` patients.
    pub patients_per_study_pool: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        let masks: [(ViewLabel, &[usize]); 5] = [
            (ViewLabel::Lax, &[0, 1, 2, 3, 6, 7]),
            (ViewLabel::Sax, &[2, 3, 4, 5, 8, 9]),
            (ViewLabel::Ch2, &[0, 1, 4, 5, 8]),
            (ViewLabel::Ch3, &[0, 2, 4, 6, 9]),
            (ViewLabel::Ch4, &[0, 1, 2, 3, 4, 5]),
        ];
        let mean_clips = 6.0;
        GenConfig {
            k_static: 10,
            k_motion: 6,
            frame_dim: 32,
            text_dim: 24,
            clip_len: 32,
            view_masks: masks.iter().map(|(v, m)| (*v, m.to_vec())).collect(),
            view_clip_rate: ViewLabel::ALL
                .iter()
                .map(|&v| (v, REFERENCE_VIEW_PROPORTIONS[v.index()] * mean_clips))
                .collect(),
            max_clips_per_view: 3,
            noise_frame: 0.1,
            noise_report: 0.8,
            static_gain: 0.5,
            motion_gain: 1.0,
            view_spread: 0.25,
            view_offset: 1.0,
            motion_overlap: 1.0,
            report_motion_weight: 3.0,
            n_studies: 1000,
            patients_per_study_pool: 0.5,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn latent_dim(&self) -> usize {
        self.k_static + self.k_motion
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Validation(msg));
        if self.k_static == 0 || self.k_motion == 0 {
            return fail("k_static and k_motion must be positive".into());
        }
        if self.frame_dim < self.k_static + self.k_motion {
            return fail(format!(
                "frame_dim {} too small to carry {} latents",
                self.frame_dim,
                self.latent_dim()
            ));
        }
        if self.text_dim < self.latent_dim() {
            return fail(format!(
                "text_dim {} must be at least the latent dim {}",
                self.text_dim,
                self.latent_dim()
            ));
        }
        if self.clip_len < 2 {
            return fail("clip_len must be at least 2".into());
        }
        if self.max_clips_per_view == 0 {
            return fail("max_clips_per_view must be positive".into());
        }
        if self.n_studies == 0 {
            return fail("n_studies must be positive".into());
        }
        if !(self.patients_per_study_pool > 0.0 && self.patients_per_study_pool <= 1.0) {
            return fail("patients_per_study_pool must be in (0, 1]".into());
        }
        for (name, x) in [
            ("noise_frame", self.noise_frame),
            ("noise_report", self.noise_report),
            ("view_spread", self.view_spread),
            ("view_offset", self.view_offset),
        ] {
            if !(x >= 0.0 && x.is_finite()) {
                return fail(format!("{name} must be finite and non-negative"));
            }
        }
        if !(0.0..=1.0).contains(&self.motion_overlap) {
            return fail("motion_overlap must lie in [0, 1]".into());
        }
        for (name, x) in [
            ("static_gain", self.static_gain),
            ("motion_gain", self.motion_gain),
            ("report_motion_weight", self.report_motion_weight),
        ] {
            if !(x > 0.0 && x.is_finite()) {
                return fail(format!("{name} must be positive"));
            }
        }
        let mut covered = vec![false; self.k_static];
        for view in ViewLabel::ALL {
            let mask = self
                .view_masks
                .get(&view)
                .ok_or_else(|| Error::Validation(format!("view_masks missing {view}")))?;
            for &i in mask {
                if i >= self.k_static {
                    return fail(format!("view_masks.{view} index {i} out of range"));
                }
                covered[i] = true;
            }
            let rate = self
                .view_clip_rate
                .get(&view)
                .copied()
                .ok_or_else(|| Error::Validation(format!("view_clip_rate missing {view}")))?;
            if !(0.0..30.0).contains(&rate) {
                return fail(format!("view_clip_rate.{view} must be in [0, 30)"));
            }
        }
        if covered.iter().any(|c| !c) {
            return fail("view masks do not cover every static index".into());
        }
        if self.view_masks[&ViewLabel::Ch4].len() >= self.k_static {
            return fail("the 4CH mask must leave some static index unseen".into());
        }
        if self.view_clip_rate.values().sum::<f64>() <= 0.0 {
            return fail("view_clip_rate must not be all zero".into());
        }
        Ok(())
    }

    fn mask_of(&self, view: ViewLabel) -> Vec<f64> {
        let mut m = vec![0.0; self.k_static];
        for &i in &self.view_masks[&view] {
            m[i] = 1.0;
        }
        m
    }
}

/// Hidden condition behind one study.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCondition {
    pub z_static: Vec64,
    pub z_motion: Vec64,
}

impl LatentCondition {
    pub fn sample(cfg: &GenConfig, rng: &mut Rng) -> Self {
        let mut draw = |n: usize| {
            let v = (0..n)
                .map(|_| rng.below(SEVERITY_LEVELS) as f64 / (SEVERITY_LEVELS - 1) as f64)
                .collect();
            Vec64::from_vec_unchecked(v)
        };
        let z_static = draw(cfg.k_static);
        let z_motion = draw(cfg.k_motion);
        LatentCondition { z_static, z_motion }
    }

    pub fn concat(&self) -> Vec<f64> {
        let mut out = self.z_static.as_slice().to_vec();
        out.extend_from_slice(self.z_motion.as_slice());
        out
    }
}

/// Fixed linear maps derived from the generator seed.
#[derive(Debug, Clone)]
pub struct Mixing {
    /// Per view: F × K_s.
    pub static_maps: Vec<Mat64>,
    /// Per view: F × K_m.
    pub motion_maps: Vec<Mat64>,
    /// F_text × (K_s + K_m).
    pub report_map: Mat64,
    /// Per view: length-F appearance shared by every frame of that view.
    pub view_offsets: Vec<Vec<f64>>,
}

impl Mixing {
    pub fn new(cfg: &GenConfig) -> Self {
        let mut rng = Rng::derive(cfg.seed, TAG_MIXING);
        let f = cfg.frame_dim;
        let gaussian = |rng: &mut Rng, rows: usize, cols: usize, scale: f64| {
            let data = (0..rows * cols).map(|_| rng.normal() * scale).collect();
            Mat64::from_vec_unchecked(rows, cols, data)
        };
        let col_scale = 1.0 / (f as f64).sqrt();
        let shared_static = gaussian(&mut rng, f, cfg.k_static, col_scale);
        let shared_motion = gaussian(&mut rng, f, cfg.k_motion, col_scale);
        let coupling = gaussian(&mut rng, cfg.k_static, cfg.k_motion, 1.0 / (cfg.k_static as f64).sqrt());
        let mut static_maps = Vec::with_capacity(5);
        let mut motion_maps = Vec::with_capacity(5);
        for _ in ViewLabel::ALL {
            let perturb = |shared: &Mat64, rng: &mut Rng| {
                let data = shared
                    .as_slice()
                    .iter()
                    .map(|&s| s + cfg.view_spread * rng.normal() * col_scale)
                    .collect();
                Mat64::from_vec_unchecked(shared.rows(), shared.cols(), data)
            };
            let appearance = perturb(&shared_static, &mut rng);
            let free = perturb(&shared_motion, &mut rng);
            let coupled = mat_mul(&appearance, &coupling);
            let motion: Vec<f64> = coupled
                .as_slice()
                .iter()
                .zip(free.as_slice())
                .map(|(c, f)| cfg.motion_gain * (cfg.motion_overlap * c + (1.0 - cfg.motion_overlap) * f))
                .collect();
            let scaled: Vec<f64> = appearance.as_slice().iter().map(|a| cfg.static_gain * a).collect();
            static_maps.push(Mat64::from_vec_unchecked(f, cfg.k_static, scaled));
            motion_maps.push(Mat64::from_vec_unchecked(f, cfg.k_motion, motion));
        }
        let mut report_map = gaussian(
            &mut rng,
            cfg.text_dim,
            cfg.latent_dim(),
            1.0 / (cfg.text_dim as f64).sqrt(),
        );
        for r in 0..cfg.text_dim {
            for c in cfg.k_static..cfg.latent_dim() {
                report_map.set(r, c, report_map.get(r, c) * cfg.report_motion_weight);
            }
        }
        let view_offsets = ViewLabel::ALL
            .iter()
            .map(|_| (0..f).map(|_| cfg.view_offset * col_scale * rng.normal()).collect())
            .collect();
        Mixing {
            static_maps,
            motion_maps,
            report_map,
            view_offsets,
        }
    }
}

fn mat_mul(a: &Mat64, b: &Mat64) -> Mat64 {
    let mut out = Mat64::zeros(a.rows(), b.cols());
    for i in 0..a.rows() {
        for k in 0..a.cols() {
            let x = a.get(i, k);
            for j in 0..b.cols() {
                out.set(i, j, out.get(i, j) + x * b.get(k, j));
            }
        }
    }
    out
}

fn mat_vec(m: &Mat64, x: &[f64]) -> Vec<f64> {
    m.iter_rows().map(|r| crate::math::dot(r, x)).collect()
}

/// Render one clip of `view`. Draws the phase, then the per-element noise, from `rng`.
pub fn render_frames(
    z: &LatentCondition,
    view: ViewLabel,
    cfg: &GenConfig,
    mixing: &Mixing,
    rng: &mut Rng,
) -> Mat64 {
    let phase = rng.uniform_range(0.0, TAU);
    render_frames_with_phase(z, view, cfg, mixing, phase, cfg.noise_frame, rng)
}

pub(crate) fn render_frames_with_phase(
    z: &LatentCondition,
    view: ViewLabel,
    cfg: &GenConfig,
    mixing: &Mixing,
    phase: f64,
    noise: f64,
    rng: &mut Rng,
) -> Mat64 {
    let masked: Vec<f64> = z
        .z_static
        .as_slice()
        .iter()
        .zip(cfg.mask_of(view))
        .map(|(a, m)| a * m)
        .collect();
    let mut base = mat_vec(&mixing.static_maps[view.index()], &masked);
    base.iter_mut()
        .zip(&mixing.view_offsets[view.index()])
        .for_each(|(b, o)| *b += o);
    let motion = mat_vec(&mixing.motion_maps[view.index()], z.z_motion.as_slice());
    let omega = TAU / cfg.clip_len as f64;
    let mut data = Vec::with_capacity(cfg.clip_len * cfg.frame_dim);
    for t in 0..cfg.clip_len {
        let s = (omega * t as f64 + phase).sin();
        for (b, m) in base.iter().zip(&motion) {
            let eps = if noise > 0.0 { noise * rng.normal() } else { 0.0 };
            data.push(b + s * m + eps);
        }
    }
    Mat64::from_vec_unchecked(cfg.clip_len, cfg.frame_dim, data)
}

fn severity_text(prefix: &str, values: &[f64], out: &mut Vec<String>) {
    for (i, v) in values.iter().enumerate() {
        let level = (v * (SEVERITY_LEVELS - 1) as f64).round() as usize;
        out.push(format!(
            "{prefix}{i}: {} ({level}/{})",
            SEVERITY_NAMES[level],
            SEVERITY_LEVELS - 1
        ));
    }
}

pub fn render_report(
    z: &LatentCondition,
    cfg: &GenConfig,
    mixing: &Mixing,
    rng: &mut Rng,
) -> Report {
    let mut features = mat_vec(&mixing.report_map, &z.concat());
    if cfg.noise_report > 0.0 {
        for f in features.iter_mut() {
            *f += cfg.noise_report * rng.normal();
        }
    }
    let mut lines = Vec::with_capacity(cfg.latent_dim());
    severity_text("static finding ", z.z_static.as_slice(), &mut lines);
    severity_text("motion finding ", z.z_motion.as_slice(), &mut lines);
    Report {
        features: Vec64::from_vec_unchecked(features),
        display_text: Some(lines.join("; ")),
    }
}

/// Study plus the latent it was rendered from.
#[derive(Debug, Clone)]
pub struct GeneratedStudy {
    pub study: Study,
    pub latent: LatentCondition,
}

/// Clip counts per view for one study: capped Poisson draws, redrawn until at
/// least one clip exists overall.
fn draw_clip_counts(cfg: &GenConfig, rng: &mut Rng) -> [usize; 5] {
    loop {
        let mut counts = [0usize; 5];
        for view in ViewLabel::ALL {
            let rate = cfg.view_clip_rate[&view];
            counts[view.index()] = rng.poisson(rate).min(cfg.max_clips_per_view);
        }
        if counts.iter().any(|&c| c > 0) {
            return counts;
        }
    }
}

pub fn generate_dataset(cfg: &GenConfig) -> Result<Vec<Study>> {
    Ok(generate_with_latents(cfg)?
        .into_iter()
        .map(|g| g.study)
        .collect())
}

pub fn generate_with_latents(cfg: &GenConfig) -> Result<Vec<GeneratedStudy>> {
    cfg.validate()?;
    let mixing = Mixing::new(cfg);
    let n_patients = ((cfg.n_studies as f64 * cfg.patients_per_study_pool).round() as usize).max(1);
    let mut patient_rng = Rng::derive(cfg.seed, TAG_PATIENTS);
    let width = digits(cfg.n_studies);
    let pwidth = digits(n_patients);

    let mut out = Vec::with_capacity(cfg.n_studies);
    for i in 0..cfg.n_studies {
        let mut rng = Rng::derive(cfg.seed, TAG_STUDY.wrapping_add(i as u64));
        let latent = LatentCondition::sample(cfg, &mut rng);
        let counts = draw_clip_counts(cfg, &mut rng);
        let mut clips = Vec::new();
        for view in ViewLabel::ALL {
            for _ in 0..counts[view.index()] {
                let frames = render_frames(&latent, view, cfg, &mixing, &mut rng);
                clips.push(VideoClip { view, frames });
            }
        }
        let report = render_report(&latent, cfg, &mixing, &mut rng);
        let patient = patient_rng.below(n_patients);
        out.push(GeneratedStudy {
            study: Study {
                study_id: format!("S{i:0width$}"),
                patient_id: format!("P{patient:0pwidth$}"),
                clips,
                report,
            },
            latent,
        });
    }
    Ok(out)
}

fn digits(n: usize) -> usize {
    n.max(1).to_string().len()
}
