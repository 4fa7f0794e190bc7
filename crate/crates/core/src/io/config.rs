//! Run configuration: one TOML document driving every command.
//!
//! The top-level `seed` is authoritative. It is copied into the generator
//! and every training section on load and on [`RunConfig::set_seed`].

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderDims, EncodingMode};
use crate::error::{Error, Result};
use crate::io::{read_text, write_atomic};
use crate::metrics::{HEADLINE_K, RECALL_KS};
use crate::synth::GenConfig;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub encoder: EncoderDims,
    pub train: TrainSection,
    pub eval: EvalConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Patient-level train / valid / test fractions.
    pub split_ratios: [f64; 3],
    pub generator: GenConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub multi_video: TrainConfig,
    pub single_video: TrainConfig,
    pub single_image: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub recall_ks: Vec<usize>,
}

impl TrainSection {
    fn for_modes(f: impl Fn(EncodingMode) -> TrainConfig) -> Self {
        TrainSection {
            multi_video: f(EncodingMode::MultiVideo),
            single_video: f(EncodingMode::SingleVideo),
            single_image: f(EncodingMode::SingleImage),
        }
    }

    /// Training settings for a trained mode.
    pub fn get(&self, mode: EncodingMode) -> Result<&TrainConfig> {
        match mode {
            EncodingMode::MultiVideo => Ok(&self.multi_video),
            EncodingMode::SingleVideo => Ok(&self.single_video),
            EncodingMode::SingleImage => Ok(&self.single_image),
            EncodingMode::MultiVideo4ch => Err(Error::Validation(
                "multi_video_4ch is not trained; it evaluates the multi_video weights".into(),
            )),
        }
    }

    fn all_mut(&mut self) -> [&mut TrainConfig; 3] {
        [&mut self.multi_video, &mut self.single_video, &mut self.single_image]
    }
}

impl Default for RunConfig {
    /// Desk-scale run: 1000 studies split 0.875 : 0.025 : 0.1 by patient.
    fn default() -> Self {
        let mut cfg = RunConfig {
            seed: 1,
            output_dir: PathBuf::from("runs/default"),
            data: DataConfig {
                split_ratios: [0.875, 0.025, 0.1],
                generator: GenConfig::default(),
            },
            encoder: EncoderDims::default(),
            train: TrainSection::for_modes(TrainConfig::for_mode),
            eval: EvalConfig {
                recall_ks: RECALL_KS.to_vec(),
            },
        };
        cfg.set_seed(1);
        cfg
    }
}

impl RunConfig {
    /// The ablation benchmark: 2350 studies whose patient split yields about
    /// 2000 / 50 / 300 studies.
    pub fn benchmark() -> Self {
        let mut cfg = RunConfig {
            output_dir: PathBuf::from("runs/benchmark"),
            ..RunConfig::default()
        };
        cfg.data.generator.n_studies = 2350;
        cfg.data.split_ratios = [2000.0 / 2350.0, 50.0 / 2350.0, 300.0 / 2350.0];
        cfg
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.data.generator.seed = seed;
        for t in self.train.all_mut() {
            t.seed = seed;
        }
    }

    pub fn split_ratios(&self) -> (f64, f64, f64) {
        let [a, b, c] = self.data.split_ratios;
        (a, b, c)
    }

    pub fn clip_len(&self) -> usize {
        self.data.generator.clip_len
    }

    /// Parses and validates; `origin` labels syntax errors.
    pub fn from_toml_str(text: &str, origin: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::Config {
                path: if path == "." { origin.to_string() } else { path },
                detail: e.into_inner().message().trim().to_string(),
            }
        })?;
        cfg.set_seed(cfg.seed);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        RunConfig::from_toml_str(&read_text(path)?, &path.display().to_string())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_toml().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let at = |path: &str, detail: String| Error::Config {
            path: path.to_string(),
            detail,
        };
        let wrap = |path: &str, r: Result<()>| r.map_err(|e| at(path, e.to_string()));

        let [a, b, c] = self.data.split_ratios;
        if !(a > 0.0 && b > 0.0 && c > 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
            return Err(at(
                "data.split_ratios",
                format!("must be three positive fractions summing to 1, got {:?}", self.data.split_ratios),
            ));
        }
        let g = &self.data.generator;
        wrap("data.generator", g.validate())?;
        wrap("encoder", self.encoder.validate())?;
        if self.encoder.frame_dim != g.frame_dim {
            return Err(at(
                "encoder.frame_dim",
                format!("{} differs from data.generator.frame_dim {}", self.encoder.frame_dim, g.frame_dim),
            ));
        }
        if self.encoder.text_dim != g.text_dim {
            return Err(at(
                "encoder.text_dim",
                format!("{} differs from data.generator.text_dim {}", self.encoder.text_dim, g.text_dim),
            ));
        }
        for mode in EncodingMode::TRAINED {
            let path = format!("train.{}", mode.key());
            let t = self.train.get(mode)?;
            if t.mode != mode {
                return Err(at(&format!("{path}.mode"), format!("expected {}, got {}", mode.key(), t.mode.key())));
            }
            wrap(&path, t.validate())?;
        }
        let ks = &self.eval.recall_ks;
        if ks.is_empty() || ks.contains(&0) || ks.windows(2).any(|w| w[0] >= w[1]) {
            return Err(at("eval.recall_ks", format!("must be strictly increasing and >= 1, got {ks:?}")));
        }
        if !ks.contains(&HEADLINE_K) {
            return Err(at("eval.recall_ks", format!("must include {HEADLINE_K}, got {ks:?}")));
        }
        Ok(())
    }
}
