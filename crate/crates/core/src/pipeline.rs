//! The end-to-end steps behind each command: generate and split, train,
//! evaluate, ablate.

use std::collections::BTreeMap;

use crate::data::{filter_test_studies, patient_ids, split_patients, Split, Study};
use crate::encoders::{EncoderParams, EncodingMode};
use crate::error::{Error, Result};
use crate::io::config::RunConfig;
use crate::io::manifest::quantize_frames;
use crate::metrics::{run_ablation, AblationTable};
use crate::rng::Rng;
use crate::synth::generate_dataset;
use crate::trainer::{initial_params, train_from, TrainEvent, TrainHistory};

const TAG_SPLIT: u64 = 0x5350_4C54;

/// Generates the studies, rounds frames to their stored f32 precision and
/// assigns each study its patient's split. Study order is generation order.
pub fn generate_split_dataset(cfg: &RunConfig) -> Result<Vec<(Split, Study)>> {
    let mut studies = generate_dataset(&cfg.data.generator)?;
    for s in &mut studies {
        quantize_frames(s);
    }
    let patients = patient_ids(&studies);
    let assignment = split_patients(&patients, cfg.split_ratios(), &mut Rng::derive(cfg.seed, TAG_SPLIT))?;
    let index = assignment.index();
    studies
        .into_iter()
        .map(|s| match index.get(s.patient_id.as_str()) {
            Some(&split) => Ok((split, s)),
            None => Err(Error::UnknownId(s.patient_id)),
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct SplitSets {
    pub train: Vec<Study>,
    pub valid: Vec<Study>,
    /// The whole test split; [`SplitSets::test_pool`] is what gets ranked.
    pub test: Vec<Study>,
}

impl SplitSets {
    pub fn new(dataset: &[(Split, Study)]) -> Self {
        let pick = |want: Split| -> Vec<Study> {
            dataset
                .iter()
                .filter(|(s, _)| *s == want)
                .map(|(_, st)| st.clone())
                .collect()
        };
        SplitSets {
            train: pick(Split::Train),
            valid: pick(Split::Valid),
            test: pick(Split::Test),
        }
    }

    /// Test studies with a 4CH clip: the retrieval pool for every mode.
    pub fn test_pool(&self) -> Vec<Study> {
        filter_test_studies(&self.test)
    }
}

pub fn train_mode(
    cfg: &RunConfig,
    mode: EncodingMode,
    sets: &SplitSets,
    observer: &mut dyn FnMut(TrainEvent<'_>),
) -> Result<(EncoderParams, TrainHistory)> {
    let tc = cfg.train.get(mode)?;
    let init = initial_params(tc, cfg.encoder);
    train_from(tc, init, cfg.clip_len(), &sets.train, &sets.valid, observer)
}

/// Trains every mode that owns weights, in [`EncodingMode::TRAINED`] order.
pub fn train_all(
    cfg: &RunConfig,
    sets: &SplitSets,
) -> Result<BTreeMap<EncodingMode, (EncoderParams, TrainHistory)>> {
    EncodingMode::TRAINED
        .into_iter()
        .map(|mode| Ok((mode, train_mode(cfg, mode, sets, &mut |_| {})?)))
        .collect()
}

/// Generates, trains all modes and evaluates the four-row ablation.
pub fn run_benchmark(cfg: &RunConfig) -> Result<AblationTable> {
    let sets = SplitSets::new(&generate_split_dataset(cfg)?);
    let weights: BTreeMap<_, _> = train_all(cfg, &sets)?
        .into_iter()
        .map(|(mode, (params, _))| (mode, params))
        .collect();
    run_ablation(&weights, &sets.test_pool(), cfg.clip_len(), &cfg.eval.recall_ks)
}
