//! Mean rank and recall@k, per-mode evaluation and the ablation table.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Study;
use crate::encoders::{encode_report, encode_study, EncoderParams, EncodingMode};
use crate::math::Vec64;
use crate::retrieval::{paired_outcomes, RankOutcome};
use crate::{Error, Result};

pub const RECALL_KS: [usize; 3] = [1, 5, 10];
pub const HEADLINE_K: usize = 10;

pub fn mcmrr(ranks: &[usize]) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::EmptyInput("mcmrr ranks"));
    }
    if ranks.contains(&0) {
        return Err(Error::InvalidInput("ranks are 1-based".into()));
    }
    Ok(ranks.iter().map(|&r| r as f64).sum::<f64>() / ranks.len() as f64)
}

pub fn recall_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    if ranks.is_empty() {
        return Err(Error::EmptyInput("recall ranks"));
    }
    if k == 0 {
        return Err(Error::InvalidInput("k must be at least 1".into()));
    }
    let hits = ranks.iter().filter(|&&r| r <= k).count();
    Ok(100.0 * hits as f64 / ranks.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mode: EncodingMode,
    pub mcmrr_v2r: f64,
    pub mcmrr_r2v: f64,
    pub r_at_k_v2r: BTreeMap<usize, f64>,
    pub r_at_k_r2v: BTreeMap<usize, f64>,
    pub pool_size: usize,
    pub n_queries: usize,
}

impl MetricsReport {
    pub fn headline_recall(&self) -> (f64, f64) {
        (
            self.r_at_k_v2r.get(&HEADLINE_K).copied().unwrap_or(f64::NAN),
            self.r_at_k_r2v.get(&HEADLINE_K).copied().unwrap_or(f64::NAN),
        )
    }

    pub fn chance(&self) -> f64 {
        (self.pool_size as f64 + 1.0) / 2.0
    }
}

/// Embeddings of one evaluation pool: study `i` is paired with report `i`.
#[derive(Debug, Clone)]
pub struct EmbeddedPool {
    pub studies: Vec<(String, Vec64)>,
    pub reports: Vec<(String, Vec64)>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricsReport,
    pub v2r: Vec<RankOutcome>,
    pub r2v: Vec<RankOutcome>,
}

/// Both retrieval directions over a paired pool. A pure function of the
/// embeddings.
pub fn evaluate_embeddings(
    mode: EncodingMode,
    pool: &EmbeddedPool,
    ks: &[usize],
) -> Result<Evaluation> {
    let v2r = paired_outcomes(&pool.studies, &pool.reports)?;
    let r2v = paired_outcomes(&pool.reports, &pool.studies)?;
    let ranks = |o: &[RankOutcome]| o.iter().map(|x| x.rank).collect::<Vec<_>>();
    let (rv, rr) = (ranks(&v2r), ranks(&r2v));
    let recall = |r: &[usize]| -> Result<BTreeMap<usize, f64>> {
        ks.iter().map(|&k| Ok((k, recall_at_k(r, k)?))).collect()
    };
    let report = MetricsReport {
        mode,
        mcmrr_v2r: mcmrr(&rv)?,
        mcmrr_r2v: mcmrr(&rr)?,
        r_at_k_v2r: recall(&rv)?,
        r_at_k_r2v: recall(&rr)?,
        pool_size: pool.reports.len(),
        n_queries: pool.studies.len(),
    };
    Ok(Evaluation { report, v2r, r2v })
}

/// Encodes every study (under `mode`) and every report of `studies`.
pub fn embed_pool(
    params: &EncoderParams,
    studies: &[Study],
    mode: EncodingMode,
    clip_len: usize,
) -> Result<EmbeddedPool> {
    let pairs: Vec<((String, Vec64), (String, Vec64))> = studies
        .par_iter()
        .map(|s| {
            let v = encode_study(params, s, mode, clip_len)?;
            let r = encode_report(params, &s.report)?;
            Ok(((s.study_id.clone(), v), (s.study_id.clone(), r)))
        })
        .collect::<Result<_>>()?;
    let (studies, reports) = pairs.into_iter().unzip();
    Ok(EmbeddedPool { studies, reports })
}

pub fn evaluate_mode(
    params: &EncoderParams,
    studies: &[Study],
    mode: EncodingMode,
    clip_len: usize,
    ks: &[usize],
) -> Result<Evaluation> {
    let pool = embed_pool(params, studies, mode, clip_len)?;
    evaluate_embeddings(mode, &pool, ks)
}

/// One table row per encoding mode, in [`EncodingMode::ALL`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub pool_size: usize,
    pub rows: Vec<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TableRow<'a> {
    mode: EncodingMode,
    label: &'a str,
    mcmrr_v2r: f64,
    mcmrr_r2v: f64,
    r_at_10_v2r: f64,
    r_at_10_r2v: f64,
}

#[derive(Serialize)]
struct TableJson<'a> {
    pool_size: usize,
    chance_mcmrr: f64,
    rows: Vec<TableRow<'a>>,
    reports: &'a [MetricsReport],
}

impl AblationTable {
    pub fn get(&self, mode: EncodingMode) -> Option<&MetricsReport> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Retrieval scores (pool size {}, chance MCMRR {:.1})", self.pool_size, (self.pool_size as f64 + 1.0) / 2.0);
        let _ = writeln!(
            s,
            "{:<16} {:>12} {:>12} {:>10} {:>10}",
            "Method", "MCMRR V->R", "MCMRR R->V", "R@10 V->R", "R@10 R->V"
        );
        for r in &self.rows {
            let (a, b) = r.headline_recall();
            let _ = writeln!(
                s,
                "{:<16} {:>12.2} {:>12.2} {:>9.1}% {:>9.1}%",
                r.mode.label(),
                r.mcmrr_v2r,
                r.mcmrr_r2v,
                a,
                b
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        let rows = self
            .rows
            .iter()
            .map(|r| {
                let (a, b) = r.headline_recall();
                TableRow {
                    mode: r.mode,
                    label: r.mode.label(),
                    mcmrr_v2r: r.mcmrr_v2r,
                    mcmrr_r2v: r.mcmrr_r2v,
                    r_at_10_v2r: a,
                    r_at_10_r2v: b,
                }
            })
            .collect();
        let doc = TableJson {
            pool_size: self.pool_size,
            chance_mcmrr: (self.pool_size as f64 + 1.0) / 2.0,
            rows,
            reports: &self.rows,
        };
        serde_json::to_string_pretty(&doc).expect("table serializes")
    }
}

/// Evaluates all four modes on the test pool. `weights` must hold the three
/// trained parameter sets; MultiVideo-4CH reuses the MultiVideo weights.
pub fn run_ablation(
    weights: &BTreeMap<EncodingMode, EncoderParams>,
    test: &[Study],
    clip_len: usize,
    ks: &[usize],
) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for mode in EncodingMode::ALL {
        let source = mode.weights_from();
        let params = weights.get(&source).ok_or_else(|| Error::MissingCheckpoint {
            mode: source.label().to_string(),
            path: Default::default(),
        })?;
        rows.push(evaluate_mode(params, test, mode, clip_len, ks)?.report);
    }
    Ok(AblationTable {
        pool_size: test.len(),
        rows,
    })
}

/// Outcome of one ordering/margin check on ablation results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// The comparative checks over one or more seeds' tables: ordering, the
/// video-over-image margin, MultiVideo-4CH vs SingleVideo agreement (averaged
/// over seeds), and every mode beating chance.
pub fn ablation_checks(tables: &[AblationTable]) -> Vec<Check> {
    use EncodingMode::*;
    fn m(t: &AblationTable, mode: EncodingMode) -> &MetricsReport {
        t.get(mode).expect("all modes present")
    }
    let mut ordering = Vec::new();
    let mut margin = Vec::new();
    let mut chance = Vec::new();
    let mut gaps = Vec::new();
    for (i, t) in tables.iter().enumerate() {
        let (mv, mv4, sv, si) = (m(t, MultiVideo), m(t, MultiVideo4ch), m(t, SingleVideo), m(t, SingleImage));
        for (dir, get) in [
            ("V->R", (|r: &MetricsReport| r.mcmrr_v2r) as fn(&MetricsReport) -> f64),
            ("R->V", |r: &MetricsReport| r.mcmrr_r2v),
        ] {
            let ok = get(mv) < get(mv4) && get(mv) < get(sv) && get(sv) < get(si);
            ordering.push((ok, format!(
                "run {i} {dir}: MV {:.2} MV4 {:.2} SV {:.2} SI {:.2}",
                get(mv), get(mv4), get(sv), get(si)
            )));
            let ratio = get(si) / get(sv);
            margin.push((ratio >= 1.3, format!("run {i} {dir}: SI/SV {ratio:.3}")));
            gaps.push((get(mv4) - get(sv)).abs() / get(sv));
            for r in [mv, mv4, sv, si] {
                let bound = 0.6 * r.chance();
                let v = get(r);
                chance.push((v < bound, format!("run {i} {dir} {}: {v:.2} vs {bound:.2}", r.mode.label())));
            }
        }
    }
    let fold = |name: &str, items: Vec<(bool, String)>| Check {
        name: name.to_string(),
        passed: !items.is_empty() && items.iter().all(|(ok, _)| *ok),
        detail: items.into_iter().map(|(ok, d)| format!("{}{d}", if ok { "" } else { "FAIL " })).collect::<Vec<_>>().join("; "),
    };
    let mean_gap = gaps.iter().sum::<f64>() / gaps.len().max(1) as f64;
    vec![
        fold("ordering", ordering),
        fold("video_over_image", margin),
        Check {
            name: "multivideo_4ch_matches_singlevideo".into(),
            passed: !gaps.is_empty() && mean_gap <= 0.25,
            detail: format!("mean relative gap {mean_gap:.3}"),
        },
        fold("beats_chance", chance),
    ]
}
