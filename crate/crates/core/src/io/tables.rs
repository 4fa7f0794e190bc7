//! Text, CSV and JSON renderings of results. All output is a pure function of
//! its input; nothing records wall-clock time.

use std::collections::HashSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::{Split, Study, ViewLabel};
use crate::retrieval::RankOutcome;
use crate::trainer::TrainHistory;

/// `step,lr,loss` rows. Floats use the shortest representation that parses
/// back to the same value.
pub fn history_csv(h: &TrainHistory) -> String {
    let mut s = String::from("step,lr,loss\n");
    for r in &h.steps {
        let _ = writeln!(s, "{},{},{}", r.step, r.lr, r.loss);
    }
    s
}

pub fn history_json(h: &TrainHistory) -> String {
    serde_json::to_string_pretty(h).expect("history serializes")
}

/// `query_id,correct_rank` rows, one per query.
pub fn ranks_csv(outcomes: &[RankOutcome]) -> String {
    let mut s = String::from("query_id,correct_rank\n");
    for o in outcomes {
        let _ = writeln!(s, "{},{}", csv_field(&o.query_id), o.rank);
    }
    s
}

fn csv_field(v: &str) -> String {
    if v.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", v.replace('"', "\"\""))
    } else {
        v.to_string()
    }
}

/// One JSON object per query: its id, the correct id, its rank and the top hits.
pub fn ranked_jsonl(outcomes: &[RankOutcome]) -> String {
    let mut s = String::new();
    for o in outcomes {
        s.push_str(&serde_json::to_string(o).expect("outcome serializes"));
        s.push('\n');
    }
    s
}

/// Counts for one split column.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitCounts {
    pub cases: usize,
    pub cases_with_4ch: usize,
    pub patients: usize,
    pub patients_with_4ch: usize,
    /// Clips per view in [`ViewLabel::ALL`] order.
    pub videos: [usize; 5],
    pub total_videos: usize,
    pub total_videos_in_4ch_cases: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub split_ratios: [f64; 3],
    pub train: SplitCounts,
    pub valid: SplitCounts,
    pub test: SplitCounts,
}

impl DatasetSummary {
    pub fn new(dataset: &[(Split, Study)], split_ratios: [f64; 3]) -> Self {
        let count = |split: Split| {
            let mut c = SplitCounts::default();
            let mut patients = HashSet::new();
            let mut patients_4ch = HashSet::new();
            for (_, s) in dataset.iter().filter(|(sp, _)| *sp == split) {
                let has_4ch = s.has_view(ViewLabel::Ch4);
                c.cases += 1;
                patients.insert(s.patient_id.as_str());
                for clip in &s.clips {
                    c.videos[clip.view.index()] += 1;
                }
                c.total_videos += s.clips.len();
                if has_4ch {
                    c.cases_with_4ch += 1;
                    patients_4ch.insert(s.patient_id.as_str());
                    c.total_videos_in_4ch_cases += s.clips.len();
                }
            }
            c.patients = patients.len();
            c.patients_with_4ch = patients_4ch.len();
            c
        };
        DatasetSummary {
            split_ratios,
            train: count(Split::Train),
            valid: count(Split::Valid),
            test: count(Split::Test),
        }
    }

    /// Table with Case, Patient, one row per view and Total Video. The test
    /// column shows the 4CH-filtered counts in parentheses.
    pub fn to_text(&self) -> String {
        let [a, b, c] = self.split_ratios;
        let mut s = String::new();
        let _ = writeln!(s, "Summary of the dataset (split ratio {a}:{b}:{c})");
        let _ = writeln!(s, "{:<16}{:>12}{:>12}{:>16}", "", "Train", "Valid", "Test");
        let mut row = |label: &str, f: &dyn Fn(&SplitCounts) -> usize, paren: Option<usize>| {
            let test = match paren {
                Some(p) => format!("{} ({p})", f(&self.test)),
                None => f(&self.test).to_string(),
            };
            let _ = writeln!(s, "{label:<16}{:>12}{:>12}{test:>16}", f(&self.train), f(&self.valid));
        };
        row("Case", &|c| c.cases, Some(self.test.cases_with_4ch));
        row("Patient", &|c| c.patients, Some(self.test.patients_with_4ch));
        for v in ViewLabel::ALL {
            row(&format!("{v}-view Video"), &|c| c.videos[v.index()], None);
        }
        row("Total Video", &|c| c.total_videos, Some(self.test.total_videos_in_4ch_cases));
        let _ = writeln!(s, "Values in parentheses count cases that include 4CH-view videos.");
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Report, VideoClip};
    use crate::encoders::EncodingMode;
    use crate::math::{Mat64, Vec64};
    use crate::trainer::StepRecord;

    fn study(id: &str, patient: &str, views: &[ViewLabel]) -> Study {
        Study {
            study_id: id.into(),
            patient_id: patient.into(),
            clips: views
                .iter()
                .map(|&view| VideoClip {
                    view,
                    frames: Mat64::zeros(1, 1),
                })
                .collect(),
            report: Report {
                features: Vec64::zeros(1),
                display_text: None,
            },
        }
    }

    #[test]
    fn summary_counts_and_layout() {
        use ViewLabel::*;
        let data = vec![
            (Split::Train, study("a", "p1", &[Lax, Ch4, Ch4])),
            (Split::Train, study("b", "p1", &[Sax])),
            (Split::Test, study("c", "p2", &[Ch4, Ch2])),
            (Split::Test, study("d", "p3", &[Ch3])),
        ];
        let sum = DatasetSummary::new(&data, [0.875, 0.025, 0.1]);
        assert_eq!(sum.train.cases, 2);
        assert_eq!(sum.train.patients, 1);
        assert_eq!(sum.train.videos, [1, 1, 0, 0, 2]);
        assert_eq!(sum.test.cases_with_4ch, 1);
        assert_eq!(sum.test.total_videos_in_4ch_cases, 2);
        assert_eq!(sum.valid, SplitCounts::default());

        let text = sum.to_text();
        assert!(text.contains("split ratio 0.875:0.025:0.1"), "{text}");
        let lines: Vec<&str> = text.lines().collect();
        let labels: Vec<&str> = lines[2..10].iter().map(|l| l[..16].trim()).collect();
        assert_eq!(
            labels,
            [
                "Case",
                "Patient",
                "LAX-view Video",
                "SAX-view Video",
                "2CH-view Video",
                "3CH-view Video",
                "4CH-view Video",
                "Total Video"
            ]
        );
        assert!(lines[1].contains("Train") && lines[1].contains("Valid") && lines[1].contains("Test"));
        assert!(lines[2].ends_with("2 (1)"), "{}", lines[2]);
        assert!(lines[9].ends_with("3 (2)"), "{}", lines[9]);
    }

    #[test]
    fn history_csv_round_trips_floats() {
        let h = TrainHistory {
            mode: EncodingMode::MultiVideo,
            steps: vec![
                StepRecord { step: 0, lr: 1e-3 / 3.0, loss: 4.1588830833596715 },
                StepRecord { step: 1, lr: 0.1 + 0.2, loss: 1.0 },
            ],
            evals: vec![],
        };
        let csv = history_csv(&h);
        let mut lines = csv.lines();
        assert_eq!(lines.next(), Some("step,lr,loss"));
        for (line, r) in lines.zip(&h.steps) {
            let f: Vec<&str> = line.split(',').collect();
            assert_eq!(f[0].parse::<usize>().unwrap(), r.step);
            assert_eq!(f[1].parse::<f64>().unwrap().to_bits(), r.lr.to_bits());
            assert_eq!(f[2].parse::<f64>().unwrap().to_bits(), r.loss.to_bits());
        }
        let back: TrainHistory = serde_json::from_str(&history_json(&h)).unwrap();
        assert_eq!(back, h);
    }

    #[test]
    fn rank_outputs_have_one_row_per_query() {
        let o = |q: &str, rank| RankOutcome {
            query_id: q.into(),
            correct_id: q.into(),
            rank,
            top_k_ids: vec!["x".into()],
        };
        let outcomes = vec![o("a", 1), o("b,c", 7)];
        let csv = ranks_csv(&outcomes);
        assert_eq!(csv, "query_id,correct_rank\na,1\n\"b,c\",7\n");
        let jsonl = ranked_jsonl(&outcomes);
        let back: Vec<RankOutcome> = jsonl.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(back, outcomes);
    }
}
