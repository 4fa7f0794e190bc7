//! Exact cosine ranking of a candidate pool, in both retrieval directions.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::math::{dot, norm, Vec64, COSINE_EPS};
use crate::{Error, Result};

/// Candidates sorted by descending similarity; equal scores keep pool order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList {
    pub query_id: String,
    pub entries: Vec<(String, f64)>,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _)| id.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankOutcome {
    pub query_id: String,
    pub correct_id: String,
    pub rank: usize,
    pub top_k_ids: Vec<String>,
}

/// Number of ids kept in [`RankOutcome::top_k_ids`].
pub const TOP_K: usize = 10;

/// Rank under the pessimistic tie rule: every other candidate whose score is
/// at least the correct one's counts as ahead of it.
pub fn pessimistic_rank(scores: &[f64], correct: usize) -> usize {
    let target = scores[correct];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &s)| j != correct && s >= target)
        .count()
}

/// A candidate pool with cached norms. Scores are computed exactly as
/// `cosine(candidate, query)` would, so results are bit-identical to a
/// plain scan.
#[derive(Debug, Clone)]
pub struct ExactIndex {
    ids: Vec<String>,
    vectors: Vec<Vec<f64>>,
    norms: Vec<f64>,
    dim: usize,
}

impl ExactIndex {
    pub fn new(candidates: &[(String, Vec64)]) -> Result<Self> {
        let first = candidates
            .first()
            .ok_or(Error::EmptyInput("candidate pool"))?;
        let dim = first.1.len();
        let mut seen = std::collections::HashSet::new();
        for (id, v) in candidates {
            if v.len() != dim {
                return Err(Error::dim(dim, v.len(), "candidate embedding"));
            }
            if !seen.insert(id.as_str()) {
                return Err(Error::InvalidInput(format!("duplicate candidate id {id}")));
            }
        }
        Ok(Self {
            ids: candidates.iter().map(|(id, _)| id.clone()).collect(),
            vectors: candidates.iter().map(|(_, v)| v.as_slice().to_vec()).collect(),
            norms: candidates.iter().map(|(_, v)| norm(v.as_slice())).collect(),
            dim,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|c| c == id)
    }

    pub fn scores(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.dim {
            return Err(Error::dim(self.dim, query.len(), "query embedding"));
        }
        let qn = norm(query);
        Ok(self
            .vectors
            .iter()
            .zip(&self.norms)
            .map(|(c, &cn)| dot(c, query) / (cn * qn + COSINE_EPS))
            .collect())
    }

    pub fn search(&self, query_id: &str, query: &[f64]) -> Result<RankedList> {
        let scores = self.scores(query)?;
        let mut order: Vec<usize> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        Ok(RankedList {
            query_id: query_id.to_string(),
            entries: order
                .into_iter()
                .map(|i| (self.ids[i].clone(), scores[i]))
                .collect(),
        })
    }

    /// Rank of candidate `correct` for `query` without sorting the pool.
    pub fn rank(&self, query: &[f64], correct: usize) -> Result<usize> {
        if correct >= self.len() {
            return Err(Error::InvalidInput(format!("candidate index {correct} out of range")));
        }
        Ok(pessimistic_rank(&self.scores(query)?, correct))
    }
}

pub fn retrieve_reports(study_emb: &Vec64, report_embs: &[(String, Vec64)]) -> Result<RankedList> {
    ExactIndex::new(report_embs)?.search("", study_emb.as_slice())
}

pub fn retrieve_studies(report_emb: &Vec64, study_embs: &[(String, Vec64)]) -> Result<RankedList> {
    ExactIndex::new(study_embs)?.search("", report_emb.as_slice())
}

pub fn rank_of(correct_id: &str, ranked: &RankedList) -> Result<RankOutcome> {
    let target = ranked
        .entries
        .iter()
        .find(|(id, _)| id == correct_id)
        .map(|(_, s)| *s)
        .ok_or_else(|| Error::UnknownId(correct_id.to_string()))?;
    let ahead = ranked
        .entries
        .iter()
        .filter(|(id, s)| id != correct_id && *s >= target)
        .count();
    Ok(RankOutcome {
        query_id: ranked.query_id.clone(),
        correct_id: correct_id.to_string(),
        rank: ahead + 1,
        top_k_ids: ranked.ids().take(TOP_K).map(str::to_string).collect(),
    })
}

/// Ranks of the paired candidate for every query: query `i` is matched with
/// candidate `i`. Queries run in parallel; output order follows the queries.
pub fn paired_outcomes(
    queries: &[(String, Vec64)],
    candidates: &[(String, Vec64)],
) -> Result<Vec<RankOutcome>> {
    if queries.len() != candidates.len() {
        return Err(Error::dim(candidates.len(), queries.len(), "paired queries"));
    }
    let index = ExactIndex::new(candidates)?;
    queries
        .par_iter()
        .enumerate()
        .map(|(i, (qid, q))| {
            let ranked = index.search(qid, q.as_slice())?;
            let correct = &candidates[i].0;
            rank_of(correct, &ranked)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::cosine;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn pool(vs: &[&[f64]]) -> Vec<(String, Vec64)> {
        vs.iter()
            .enumerate()
            .map(|(i, v)| (format!("c{i}"), Vec64::new(v.to_vec()).unwrap()))
            .collect()
    }

    fn naive(query: &[f64], cands: &[(String, Vec64)]) -> Vec<(String, f64)> {
        let mut out: Vec<(usize, f64)> = cands
            .iter()
            .enumerate()
            .map(|(i, (_, v))| (i, cosine(v.as_slice(), query)))
            .collect();
        // Insertion sort: independent of the library's sort.
        for i in 1..out.len() {
            let mut j = i;
            while j > 0 && out[j - 1].1 < out[j].1 {
                out.swap(j - 1, j);
                j -= 1;
            }
        }
        out.into_iter().map(|(i, s)| (cands[i].0.clone(), s)).collect()
    }

    #[test]
    fn self_ranks_first() {
        let c = pool(&[&[0.3, 0.1], &[1.0, 2.0], &[-1.0, 0.5]]);
        let q = c[1].1.clone();
        let r = retrieve_reports(&q, &c).unwrap();
        assert_eq!(r.entries[0].0, "c1");
        let r = retrieve_studies(&q, &c).unwrap();
        assert_eq!(r.entries[0].0, "c1");
    }

    #[test]
    fn axis_order() {
        let c = pool(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let r = retrieve_reports(&Vec64::new(vec![1.0, 0.0]).unwrap(), &c).unwrap();
        let ids: Vec<&str> = r.ids().collect();
        assert_eq!(ids, ["c1", "c0"]);
    }

    #[test]
    fn dimension_mismatch() {
        let c = pool(&[&[0.0, 1.0]]);
        assert!(retrieve_reports(&Vec64::new(vec![1.0; 3]).unwrap(), &c).is_err());
        assert!(retrieve_reports(&Vec64::new(vec![1.0; 2]).unwrap(), &[]).is_err());
    }

    fn list(scores: &[(&str, f64)]) -> RankedList {
        RankedList {
            query_id: "q".into(),
            entries: scores.iter().map(|(i, s)| (i.to_string(), *s)).collect(),
        }
    }

    #[test]
    fn pessimistic_ties() {
        let l = list(&[("A", 0.9), ("B", 0.9), ("C", 0.5)]);
        assert_eq!(rank_of("B", &l).unwrap().rank, 2);
        assert_eq!(rank_of("A", &l).unwrap().rank, 2);
        assert_eq!(rank_of("C", &l).unwrap().rank, 3);
        let l = list(&[("A", 0.9), ("B", 0.2)]);
        assert_eq!(rank_of("A", &l).unwrap().rank, 1);
        let flat: Vec<(String, f64)> = (0..7).map(|i| (format!("x{i}"), 0.25)).collect();
        let l = RankedList { query_id: "q".into(), entries: flat };
        assert_eq!(rank_of("x0", &l).unwrap().rank, 7);
        assert!(matches!(rank_of("nope", &l), Err(Error::UnknownId(_))));
    }

    #[test]
    fn similarity_is_symmetric_across_directions() {
        let mut rng = Rng::new(5);
        let a: Vec<(String, Vec64)> = (0..6)
            .map(|i| (format!("s{i}"), Vec64::new((0..4).map(|_| rng.normal()).collect()).unwrap()))
            .collect();
        let b: Vec<(String, Vec64)> = (0..6)
            .map(|i| (format!("r{i}"), Vec64::new((0..4).map(|_| rng.normal()).collect()).unwrap()))
            .collect();
        let ia = ExactIndex::new(&a).unwrap();
        let ib = ExactIndex::new(&b).unwrap();
        for i in 0..6 {
            let v2r = ib.scores(a[i].1.as_slice()).unwrap();
            for j in 0..6 {
                let r2v = ia.scores(b[j].1.as_slice()).unwrap();
                assert_eq!(v2r[j].to_bits(), r2v[i].to_bits());
            }
        }
    }

    #[test]
    fn random_pool_mean_rank_is_half() {
        let (m, d) = (1000, 16);
        let mut total = 0.0;
        for seed in 0..20 {
            let mut rng = Rng::new(seed);
            let mut draw = |tag: &str| -> Vec<(String, Vec64)> {
                (0..m)
                    .map(|i| {
                        let v = (0..d).map(|_| rng.normal()).collect();
                        (format!("{tag}{i}"), Vec64::new(v).unwrap())
                    })
                    .collect()
            };
            let q = draw("s");
            let c = draw("r");
            let out = paired_outcomes(&q, &c).unwrap();
            total += out.iter().map(|o| o.rank as f64).sum::<f64>() / m as f64;
        }
        let mean = total / 20.0;
        assert!((mean - 500.5).abs() < 0.05 * 500.5, "{mean}");
    }

    fn tie_heavy(rng: &mut Rng, m: usize, d: usize) -> Vec<(String, Vec64)> {
        let protos: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..d).map(|_| rng.below(3) as f64 - 1.0).collect())
            .collect();
        (0..m)
            .map(|i| {
                let mut v = protos[rng.below(3)].clone();
                if v.iter().all(|x| *x == 0.0) {
                    v[0] = 1.0;
                }
                (format!("c{i}"), Vec64::new(v).unwrap())
            })
            .collect()
    }

    #[test]
    fn matches_naive_scan_including_ties() {
        let mut rng = Rng::new(99);
        for case in 0..100 {
            let m = 1 + rng.below(60);
            let d = 1 + rng.below(8);
            let cands = if case % 2 == 0 {
                tie_heavy(&mut rng, m, d)
            } else {
                (0..m)
                    .map(|i| {
                        let v = (0..d).map(|_| rng.normal()).collect();
                        (format!("c{i}"), Vec64::new(v).unwrap())
                    })
                    .collect()
            };
            let q: Vec<f64> = (0..d).map(|_| rng.below(3) as f64 - 1.0 + 0.5).collect();
            let fast = ExactIndex::new(&cands).unwrap().search("q", &q).unwrap();
            let slow = naive(&q, &cands);
            assert_eq!(fast.entries.len(), slow.len());
            for (a, b) in fast.entries.iter().zip(&slow) {
                assert_eq!(a.0, b.0);
                assert_eq!(a.1.to_bits(), b.1.to_bits());
            }
        }
    }

    proptest! {
        #[test]
        fn ranking_invariant_under_monotone_transform(
            scores in proptest::collection::vec(-1.0f64..1.0, 2..40),
            pick in 0usize..40,
        ) {
            let correct = pick % scores.len();
            let warped: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() + 2.0).collect();
            prop_assert_eq!(pessimistic_rank(&scores, correct), pessimistic_rank(&warped, correct));
        }

        #[test]
        fn raising_correct_never_hurts(
            scores in proptest::collection::vec(-1.0f64..1.0, 2..40),
            pick in 0usize..40,
            bump in 0.0f64..1.0,
        ) {
            let correct = pick % scores.len();
            let before = pessimistic_rank(&scores, correct);
            let mut raised = scores.clone();
            raised[correct] += bump;
            let after = pessimistic_rank(&raised, correct);
            prop_assert!(after <= before);
            prop_assert!((1..=scores.len()).contains(&after));
        }

        #[test]
        fn ranked_list_is_sorted_permutation(
            seed in 0u64..1000,
            m in 1usize..30,
        ) {
            let mut rng = Rng::new(seed);
            let cands = tie_heavy(&mut rng, m, 3);
            let r = ExactIndex::new(&cands).unwrap().search("q", &[1.0, 0.5, -0.25]).unwrap();
            prop_assert!(r.entries.windows(2).all(|w| w[0].1 >= w[1].1));
            let mut ids: Vec<&str> = r.ids().collect();
            ids.sort_unstable();
            ids.dedup();
            prop_assert_eq!(ids.len(), m);
        }
    }
}
