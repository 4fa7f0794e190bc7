//! Studies, clips, reports, patient-level splits and dataset checks.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{Mat64, Vec64};
use crate::rng::Rng;

/// Standard echocardiographic view.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ViewLabel {
    #[serde(rename = "LAX")]
    Lax,
    #[serde(rename = "SAX")]
    Sax,
    #[serde(rename = "2CH")]
    Ch2,
    #[serde(rename = "3CH")]
    Ch3,
    #[serde(rename = "4CH")]
    Ch4,
}

impl ViewLabel {
    pub const ALL: [ViewLabel; 5] = [
        ViewLabel::Lax,
        ViewLabel::Sax,
        ViewLabel::Ch2,
        ViewLabel::Ch3,
        ViewLabel::Ch4,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ViewLabel::Lax => "LAX",
            ViewLabel::Sax => "SAX",
            ViewLabel::Ch2 => "2CH",
            ViewLabel::Ch3 => "3CH",
            ViewLabel::Ch4 => "4CH",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for ViewLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ViewLabel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ViewLabel::ALL
            .into_iter()
            .find(|v| v.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidInput(format!("unknown view label {s:?}")))
    }
}

/// A single clip: T frames of F features each.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub view: ViewLabel,
    pub frames: Mat64,
}

impl VideoClip {
    pub fn n_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn frame_dim(&self) -> usize {
        self.frames.cols()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Report {
    pub features: Vec64,
    pub display_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Study {
    pub study_id: String,
    pub patient_id: String,
    pub clips: Vec<VideoClip>,
    pub report: Report,
}

impl Study {
    pub fn has_view(&self, view: ViewLabel) -> bool {
        self.clips.iter().any(|c| c.view == view)
    }

    pub fn clips_of(&self, view: ViewLabel) -> impl Iterator<Item = &VideoClip> {
        self.clips.iter().filter(move |c| c.view == view)
    }
}

/// Which split a patient (and therefore all of their studies) belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitAssignment {
    pub train: Vec<String>,
    pub valid: Vec<String>,
    pub test: Vec<String>,
}

impl SplitAssignment {
    /// Lookup table patient_id → split.
    pub fn index(&self) -> HashMap<&str, Split> {
        let mut m = HashMap::new();
        for (split, ids) in [
            (Split::Train, &self.train),
            (Split::Valid, &self.valid),
            (Split::Test, &self.test),
        ] {
            for id in ids {
                m.insert(id.as_str(), split);
            }
        }
        m
    }

    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.valid.len(), self.test.len())
    }
}

/// Shuffle patients with `rng` and cut them into train / valid / test.
///
/// Valid and test take `round(n·ratio)` patients each; whatever is left goes
/// to train.
pub fn split_patients(
    patient_ids: &[String],
    ratios: (f64, f64, f64),
    rng: &mut Rng,
) -> Result<SplitAssignment> {
    let (r_train, r_valid, r_test) = ratios;
    if patient_ids.is_empty() {
        return Err(Error::EmptyInput("patient list"));
    }
    if !(r_train > 0.0 && r_valid > 0.0 && r_test > 0.0) {
        return Err(Error::Validation(format!(
            "split ratios must be positive, got {ratios:?}"
        )));
    }
    if ((r_train + r_valid + r_test) - 1.0).abs() > 1e-9 {
        return Err(Error::Validation(format!(
            "split ratios must sum to 1, got {ratios:?}"
        )));
    }
    let mut seen = HashSet::new();
    for id in patient_ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::Validation(format!("duplicate patient id {id:?}")));
        }
    }

    let mut ids = patient_ids.to_vec();
    rng.shuffle(&mut ids);
    let n = ids.len() as f64;
    let n_valid = (n * r_valid).round() as usize;
    let n_test = (n * r_test).round() as usize;
    // Rounding can overshoot for tiny n; train keeps whatever is left, valid/test shrink first.
    let n_test = n_test.min(ids.len());
    let n_valid = n_valid.min(ids.len() - n_test);
    let n_train = ids.len() - n_valid - n_test;

    let test = ids.split_off(n_train + n_valid);
    let valid = ids.split_off(n_train);
    Ok(SplitAssignment {
        train: ids,
        valid,
        test,
    })
}

/// Keep only studies with at least one 4CH clip, in their original order.
pub fn filter_test_studies(studies: &[Study]) -> Vec<Study> {
    studies
        .iter()
        .filter(|s| s.has_view(ViewLabel::Ch4))
        .cloned()
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Violation {
    DuplicateStudyId(String),
    NoClips(String),
    ClipShape {
        study_id: String,
        clip: usize,
        frames: usize,
        features: usize,
    },
    TooManyClips {
        study_id: String,
        view: ViewLabel,
        count: usize,
    },
    ReportShape {
        study_id: String,
        len: usize,
    },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DuplicateStudyId(id) => write!(f, "duplicate study_id {id}"),
            Violation::NoClips(id) => write!(f, "study {id} has no clips"),
            Violation::ClipShape {
                study_id,
                clip,
                frames,
                features,
            } => write!(
                f,
                "study {study_id} clip {clip} has shape {frames}x{features}"
            ),
            Violation::TooManyClips {
                study_id,
                view,
                count,
            } => write!(f, "study {study_id} has {count} {view} clips"),
            Violation::ReportShape { study_id, len } => {
                write!(f, "study {study_id} report has {len} features")
            }
        }
    }
}

/// Shapes every study in a dataset must have.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetShape {
    pub clip_len: usize,
    pub frame_dim: usize,
    pub text_dim: usize,
    pub max_clips_per_view: usize,
}

pub fn validate_dataset(studies: &[Study], shape: &DatasetShape) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for s in studies {
        if !seen.insert(s.study_id.as_str()) {
            out.push(Violation::DuplicateStudyId(s.study_id.clone()));
        }
        if s.clips.is_empty() {
            out.push(Violation::NoClips(s.study_id.clone()));
        }
        for (i, c) in s.clips.iter().enumerate() {
            if c.n_frames() != shape.clip_len || c.frame_dim() != shape.frame_dim {
                out.push(Violation::ClipShape {
                    study_id: s.study_id.clone(),
                    clip: i,
                    frames: c.n_frames(),
                    features: c.frame_dim(),
                });
            }
        }
        for view in ViewLabel::ALL {
            let count = s.clips_of(view).count();
            if count > shape.max_clips_per_view {
                out.push(Violation::TooManyClips {
                    study_id: s.study_id.clone(),
                    view,
                    count,
                });
            }
        }
        if s.report.features.len() != shape.text_dim {
            out.push(Violation::ReportShape {
                study_id: s.study_id.clone(),
                len: s.report.features.len(),
            });
        }
    }
    out
}

/// Partition studies by their patient's split, preserving order.
pub fn partition_studies(
    studies: Vec<Study>,
    split: &SplitAssignment,
) -> Result<(Vec<Study>, Vec<Study>, Vec<Study>)> {
    let index = split.index();
    let (mut train, mut valid, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for s in studies {
        match index.get(s.patient_id.as_str()) {
            Some(Split::Train) => train.push(s),
            Some(Split::Valid) => valid.push(s),
            Some(Split::Test) => test.push(s),
            None => return Err(Error::UnknownId(s.patient_id)),
        }
    }
    Ok((train, valid, test))
}

/// Distinct patient ids in first-appearance order.
pub fn patient_ids(studies: &[Study]) -> Vec<String> {
    let mut seen = HashSet::new();
    studies
        .iter()
        .filter(|s| seen.insert(s.patient_id.as_str()))
        .map(|s| s.patient_id.clone())
        .collect()
}
