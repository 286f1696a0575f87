//! Per-type accuracy and the two consistency scores over a prediction log.
//!
//! C1 is the share of sub-questions answered correctly among those whose main
//! question was answered correctly. C2 is the share of main questions answered
//! correctly among those whose sub-questions were all answered correctly; a
//! main without subs satisfies that condition vacuously. Empty denominators
//! give `None`, serialized as `null`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::batching::RelationIndex;
use crate::synth::QType;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub qa_id: u64,
    pub scene_id: u64,
    pub qtype: QType,
    pub answer: usize,
    pub predicted: usize,
    pub probs: Vec<f64>,
    pub related_main: Option<u64>,
}

impl PredictionRow {
    pub fn correct(&self) -> bool {
        self.answer == self.predicted
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Ratio {
    pub num: usize,
    pub den: usize,
}

impl Ratio {
    pub fn percent(self) -> Option<f64> {
        (self.den > 0).then(|| 100.0 * self.num as f64 / self.den as f64)
    }

    fn add(&mut self, hit: bool) {
        self.den += 1;
        self.num += usize::from(hit);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TypeFilter {
    Overall,
    Grade,
    Whole,
    Macula,
    /// Sub-question and independent region questions together.
    Region,
    SubRegion,
    IndRegion,
}

impl TypeFilter {
    pub fn admits(self, qtype: QType) -> bool {
        match self {
            TypeFilter::Overall => true,
            TypeFilter::Grade => qtype == QType::Main,
            TypeFilter::Whole => qtype == QType::SubWhole,
            TypeFilter::Macula => qtype == QType::SubMacula,
            TypeFilter::Region => matches!(qtype, QType::SubRegion | QType::IndRegion),
            TypeFilter::SubRegion => qtype == QType::SubRegion,
            TypeFilter::IndRegion => qtype == QType::IndRegion,
        }
    }
}

pub fn accuracy(log: &[PredictionRow], filter: TypeFilter) -> Ratio {
    let mut r = Ratio::default();
    for row in log.iter().filter(|row| filter.admits(row.qtype)) {
        r.add(row.correct());
    }
    r
}

fn correctness(log: &[PredictionRow]) -> HashMap<u64, bool> {
    log.iter().map(|r| (r.qa_id, r.correct())).collect()
}

pub fn consistency_c1(log: &[PredictionRow], relations: &RelationIndex) -> Ratio {
    let ok = correctness(log);
    let mut r = Ratio::default();
    for row in log.iter().filter(|row| row.qtype == QType::Main && row.correct()) {
        for sub in relations.main_to_subs.get(&row.qa_id).into_iter().flatten() {
            if let Some(&hit) = ok.get(sub) {
                r.add(hit);
            }
        }
    }
    r
}

pub fn consistency_c2(log: &[PredictionRow], relations: &RelationIndex) -> Ratio {
    let ok = correctness(log);
    let mut r = Ratio::default();
    for row in log.iter().filter(|row| row.qtype == QType::Main) {
        let subs_ok = relations
            .main_to_subs
            .get(&row.qa_id)
            .into_iter()
            .flatten()
            .all(|s| ok.get(s).copied().unwrap_or(true));
        if subs_ok {
            r.add(row.correct());
        }
    }
    r
}

/// Flat metrics document written as `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy_overall: Option<f64>,
    pub accuracy_grade: Option<f64>,
    pub accuracy_whole: Option<f64>,
    pub accuracy_macula: Option<f64>,
    pub accuracy_region: Option<f64>,
    pub accuracy_sub_region: Option<f64>,
    pub accuracy_ind_region: Option<f64>,
    pub c1: Option<f64>,
    pub c2: Option<f64>,
    pub n_overall: usize,
    pub n_grade: usize,
    pub n_whole: usize,
    pub n_macula: usize,
    pub n_region: usize,
    pub n_sub_region: usize,
    pub n_ind_region: usize,
    pub n_c1: usize,
    pub n_c2: usize,
}

impl MetricsReport {
    pub fn compute(log: &[PredictionRow], relations: &RelationIndex) -> Self {
        let acc = |f| accuracy(log, f);
        let (o, g, w, m) = (
            acc(TypeFilter::Overall),
            acc(TypeFilter::Grade),
            acc(TypeFilter::Whole),
            acc(TypeFilter::Macula),
        );
        let (r, sr, ir) = (
            acc(TypeFilter::Region),
            acc(TypeFilter::SubRegion),
            acc(TypeFilter::IndRegion),
        );
        let (c1, c2) = (consistency_c1(log, relations), consistency_c2(log, relations));
        Self {
            accuracy_overall: o.percent(),
            accuracy_grade: g.percent(),
            accuracy_whole: w.percent(),
            accuracy_macula: m.percent(),
            accuracy_region: r.percent(),
            accuracy_sub_region: sr.percent(),
            accuracy_ind_region: ir.percent(),
            c1: c1.percent(),
            c2: c2.percent(),
            n_overall: o.den,
            n_grade: g.den,
            n_whole: w.den,
            n_macula: m.den,
            n_region: r.den,
            n_sub_region: sr.den,
            n_ind_region: ir.den,
            n_c1: c1.den,
            n_c2: c2.den,
        }
    }
}

/// Scenes whose main question is right while at least one related sub is
/// wrong, with the offending sub rows.
pub fn inconsistent_scenes<'a>(
    log: &'a [PredictionRow],
    relations: &RelationIndex,
) -> Vec<(&'a PredictionRow, Vec<&'a PredictionRow>)> {
    let by_id: HashMap<u64, &PredictionRow> = log.iter().map(|r| (r.qa_id, r)).collect();
    log.iter()
        .filter(|row| row.qtype == QType::Main && row.correct())
        .filter_map(|main| {
            let wrong: Vec<&PredictionRow> = relations
                .main_to_subs
                .get(&main.qa_id)
                .into_iter()
                .flatten()
                .filter_map(|s| by_id.get(s).copied())
                .filter(|s| !s.correct())
                .collect();
            (!wrong.is_empty()).then_some((main, wrong))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(qa_id: u64, scene_id: u64, qtype: QType, related_main: Option<u64>, correct: bool) -> PredictionRow {
        PredictionRow {
            qa_id,
            scene_id,
            qtype,
            answer: 1,
            predicted: if correct { 1 } else { 0 },
            probs: vec![0.0; 5],
            related_main,
        }
    }

    fn relations(log: &[PredictionRow]) -> RelationIndex {
        let mut r = RelationIndex::default();
        for row in log {
            if let Some(m) = row.related_main {
                r.main_to_subs.entry(m).or_default().push(row.qa_id);
                r.sub_to_main.insert(row.qa_id, m);
            }
        }
        r
    }

    #[test]
    fn argmax_ties_lowest() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.2; 5]), 0);
    }

    #[test]
    fn c1_example() {
        let log = vec![
            row(0, 0, QType::Main, None, true),
            row(1, 0, QType::SubWhole, Some(0), true),
            row(2, 0, QType::SubMacula, Some(0), true),
            row(10, 1, QType::Main, None, true),
            row(11, 1, QType::SubWhole, Some(10), true),
            row(12, 1, QType::SubMacula, Some(10), false),
            row(13, 1, QType::IndRegion, None, false),
        ];
        let c1 = consistency_c1(&log, &relations(&log));
        assert_eq!((c1.num, c1.den), (3, 4));
        assert_eq!(c1.percent(), Some(75.0));
    }

    #[test]
    fn c2_example() {
        let log = vec![
            row(0, 0, QType::Main, None, true),
            row(1, 0, QType::SubWhole, Some(0), true),
            row(30, 3, QType::Main, None, false),
            row(31, 3, QType::SubWhole, Some(30), true),
        ];
        assert_eq!(consistency_c2(&log, &relations(&log)).percent(), Some(50.0));
        let lone = vec![row(0, 0, QType::Main, None, false)];
        let c2 = consistency_c2(&lone, &relations(&lone));
        assert_eq!((c2.num, c2.den), (0, 1));
    }

    #[test]
    fn empty_denominators_are_null() {
        let log = vec![row(0, 0, QType::Main, None, false), row(1, 0, QType::SubWhole, Some(0), true)];
        let report = MetricsReport::compute(&log, &relations(&log));
        assert_eq!(report.c1, None);
        assert_eq!(report.n_c1, 0);
        assert_eq!(report.accuracy_region, None);
        let json = serde_json::to_string(&report).unwrap();
        assert!(json.contains("\"c1\":null"));
        assert_eq!(accuracy(&[], TypeFilter::Overall).percent(), None);
    }

    #[test]
    fn accuracy_counts() {
        let log: Vec<_> = (0..4).map(|i| row(i * 10, i, QType::Main, None, i != 2)).collect();
        assert_eq!(accuracy(&log, TypeFilter::Grade).percent(), Some(75.0));
        assert_eq!(accuracy(&log, TypeFilter::Whole).den, 0);
    }

    #[test]
    fn listing_reports_wrong_subs() {
        let log = vec![
            row(0, 0, QType::Main, None, true),
            row(1, 0, QType::SubWhole, Some(0), false),
            row(2, 0, QType::SubMacula, Some(0), true),
        ];
        let rel = relations(&log);
        let listing = inconsistent_scenes(&log, &rel);
        assert_eq!(listing.len(), 1);
        assert_eq!(listing[0].1.iter().map(|r| r.qa_id).collect::<Vec<_>>(), vec![1]);
    }
}
