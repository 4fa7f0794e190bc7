//! Dataset on disk: `manifest.jsonl` with one study per line, and
//! `frames.bin` holding every clip's frame matrix as row-major f32.
//!
//! Clip descriptors address the blob by byte `offset` and `length`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{Report, Split, Study, VideoClip, ViewLabel};
use crate::error::{Error, Result};
use crate::io::{read_bytes, read_text, write_atomic};
use crate::math::{Mat64, Vec64};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const FRAMES_FILE: &str = "frames.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipEntry {
    pub view: ViewLabel,
    pub frames: usize,
    pub frame_dim: usize,
    pub offset: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportEntry {
    pub features: Vec<f64>,
    pub display_text: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub study_id: String,
    pub patient_id: String,
    pub split: Split,
    pub report: ReportEntry,
    pub clips: Vec<ClipEntry>,
}

/// Rounds every frame value to f32, the precision the blob stores.
pub fn quantize_frames(study: &mut Study) {
    for clip in &mut study.clips {
        for v in clip.frames.as_mut_slice() {
            *v = *v as f32 as f64;
        }
    }
}

/// Serializes to `(manifest, blob)` bytes.
pub fn encode_dataset(studies: &[(Split, Study)]) -> (Vec<u8>, Vec<u8>) {
    let mut manifest = Vec::new();
    let mut blob = Vec::new();
    for (split, s) in studies {
        let clips = s
            .clips
            .iter()
            .map(|c| {
                let offset = blob.len() as u64;
                for v in c.frames.as_slice() {
                    blob.extend_from_slice(&(*v as f32).to_le_bytes());
                }
                ClipEntry {
                    view: c.view,
                    frames: c.n_frames(),
                    frame_dim: c.frame_dim(),
                    offset,
                    length: blob.len() as u64 - offset,
                }
            })
            .collect();
        let entry = ManifestEntry {
            study_id: s.study_id.clone(),
            patient_id: s.patient_id.clone(),
            split: *split,
            report: ReportEntry {
                features: s.report.features.as_slice().to_vec(),
                display_text: s.report.display_text.clone(),
            },
            clips,
        };
        serde_json::to_writer(&mut manifest, &entry).expect("manifest entry serializes");
        manifest.push(b'\n');
    }
    (manifest, blob)
}

/// Writes `manifest.jsonl` and `frames.bin` under `dir`. The blob is written
/// first so a reader never sees a manifest pointing past its end.
pub fn write_dataset(dir: &Path, studies: &[(Split, Study)]) -> Result<()> {
    let (manifest, blob) = encode_dataset(studies);
    write_atomic(&dir.join(FRAMES_FILE), &blob)?;
    write_atomic(&dir.join(MANIFEST_FILE), &manifest)
}

fn malformed(path: &Path, line: usize, detail: impl std::fmt::Display) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: format!("line {line}: {detail}"),
    }
}

/// Parses manifest text against `blob`. The paths only label errors.
pub fn decode_dataset(
    manifest: &str,
    blob: &[u8],
    manifest_path: &Path,
) -> Result<Vec<(Split, Study)>> {
    let mut out = Vec::new();
    for (i, line) in manifest.lines().enumerate() {
        let n = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(line).map_err(|err| malformed(manifest_path, n, err))?;
        let features = Vec64::new(e.report.features).map_err(|err| malformed(manifest_path, n, err))?;
        let mut clips = Vec::with_capacity(e.clips.len());
        for c in e.clips {
            let want = (c.frames as u64)
                .checked_mul(c.frame_dim as u64)
                .and_then(|x| x.checked_mul(4));
            if want != Some(c.length) {
                return Err(malformed(
                    manifest_path,
                    n,
                    format!("clip length {} does not hold {}x{} f32 values", c.length, c.frames, c.frame_dim),
                ));
            }
            let end = c.offset.checked_add(c.length).filter(|&end| end <= blob.len() as u64);
            let Some(end) = end else {
                return Err(malformed(
                    manifest_path,
                    n,
                    format!("blob range {}+{} exceeds blob size {}", c.offset, c.length, blob.len()),
                ));
            };
            let values = blob[c.offset as usize..end as usize]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
                .collect();
            let frames = Mat64::new(c.frames, c.frame_dim, values).map_err(|err| malformed(manifest_path, n, err))?;
            clips.push(VideoClip { view: c.view, frames });
        }
        out.push((
            e.split,
            Study {
                study_id: e.study_id,
                patient_id: e.patient_id,
                clips,
                report: Report {
                    features,
                    display_text: e.report.display_text,
                },
            },
        ));
    }
    Ok(out)
}

pub fn read_dataset(dir: &Path) -> Result<Vec<(Split, Study)>> {
    let manifest_path: PathBuf = dir.join(MANIFEST_FILE);
    let manifest = read_text(&manifest_path)?;
    let blob = read_bytes(&dir.join(FRAMES_FILE))?;
    decode_dataset(&manifest, &blob, &manifest_path)
}

/// Studies of one split, in manifest order.
pub fn studies_in(dataset: &[(Split, Study)], split: Split) -> Vec<Study> {
    dataset
        .iter()
        .filter(|(s, _)| *s == split)
        .map(|(_, st)| st.clone())
        .collect()
}
