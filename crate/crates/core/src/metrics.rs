//! Strict triplet-match precision, recall and F1, with per-label and
//! surface-distance breakdowns.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::conllu::LabeledTriplet;

/// Distance buckets: 0, 1, 2, 3, 4 and 5 or more tokens apart.
pub const DISTANCE_BUCKETS: usize = 6;
pub const DISTANCE_NAMES: [&str; DISTANCE_BUCKETS] = ["0", "1", "2", "3", "4", ">=5"];

pub fn distance_bucket(t: &LabeledTriplet) -> usize {
    t.predicate.abs_diff(t.argument).min(DISTANCE_BUCKETS - 1)
}

/// Counts behind one precision/recall/F1 figure.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        100.0 * a as f64 / b as f64
    }
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.correct, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.correct, self.gold)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    fn add(&mut self, other: Counts) {
        self.correct += other.correct;
        self.predicted += other.predicted;
        self.gold += other.gold;
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub overall: Counts,
    pub per_label: BTreeMap<String, Counts>,
    pub by_distance: [Counts; DISTANCE_BUCKETS],
    pub oracle_misses: usize,
}

impl MetricsReport {
    pub fn precision(&self) -> f64 {
        self.overall.precision()
    }

    pub fn recall(&self) -> f64 {
        self.overall.recall()
    }

    pub fn f1(&self) -> f64 {
        self.overall.f1()
    }

    /// Adds one sentence's predicted and gold triplet sets.
    pub fn add_sentence(&mut self, predicted: &BTreeSet<LabeledTriplet>, gold: &BTreeSet<LabeledTriplet>) {
        for t in predicted {
            let hit = gold.contains(t) as usize;
            let c = Counts {
                correct: hit,
                predicted: 1,
                gold: 0,
            };
            self.overall.add(c);
            self.per_label.entry(t.label.clone()).or_default().add(c);
            self.by_distance[distance_bucket(t)].add(c);
        }
        for t in gold {
            let c = Counts {
                correct: 0,
                predicted: 0,
                gold: 1,
            };
            self.overall.add(c);
            self.per_label.entry(t.label.clone()).or_default().add(c);
            self.by_distance[distance_bucket(t)].add(c);
        }
    }

    pub fn merge(&mut self, other: &MetricsReport) {
        self.overall.add(other.overall);
        for (l, c) in &other.per_label {
            self.per_label.entry(l.clone()).or_default().add(*c);
        }
        for (a, b) in self.by_distance.iter_mut().zip(other.by_distance) {
            a.add(b);
        }
        self.oracle_misses += other.oracle_misses;
    }

    /// Per-label and per-distance sections as TSV.
    pub fn breakdown_tsv(&self) -> String {
        let mut s = String::from("# per-label\nlabel\tP\tR\tF1\tgold\n");
        for (l, c) in &self.per_label {
            let _ = writeln!(s, "{l}\t{:.1}\t{:.1}\t{:.1}\t{}", c.precision(), c.recall(), c.f1(), c.gold);
        }
        s.push_str("# distance\nbucket\tP\tR\tF1\tgold\n");
        for (name, c) in DISTANCE_NAMES.iter().zip(&self.by_distance) {
            let _ = writeln!(s, "{name}\t{:.1}\t{:.1}\t{:.1}\t{}", c.precision(), c.recall(), c.f1(), c.gold);
        }
        let _ = writeln!(s, "# oracle-misses\t{}", self.oracle_misses);
        s
    }
}

/// Scores aligned per-sentence prediction and gold sets.
pub fn score(predicted: &[BTreeSet<LabeledTriplet>], gold: &[BTreeSet<LabeledTriplet>]) -> MetricsReport {
    let mut m = MetricsReport::default();
    for (p, g) in predicted.iter().zip(gold) {
        m.add_sentence(p, g);
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(p: usize, a: usize, l: &str) -> LabeledTriplet {
        LabeledTriplet {
            predicate: p,
            argument: a,
            label: l.into(),
        }
    }

    #[test]
    fn perfect_half_and_empty() {
        let gold: BTreeSet<_> = [t(2, 1, "A0"), t(2, 3, "A1")].into();
        let m = score(&[gold.clone()], &[gold.clone()]);
        assert_eq!((m.precision(), m.recall(), m.f1()), (100.0, 100.0, 100.0));

        let pred: BTreeSet<_> = [t(2, 1, "A0"), t(2, 3, "A2")].into();
        let m = score(&[pred], &[gold.clone()]);
        assert_eq!((m.precision(), m.recall(), m.f1()), (50.0, 50.0, 50.0));

        let m = score(&[BTreeSet::new()], &[gold]);
        assert_eq!((m.precision(), m.recall(), m.f1()), (0.0, 0.0, 0.0));
    }

    #[test]
    fn distance_buckets_partition_gold() {
        let gold: BTreeSet<_> = [t(1, 1, "A0"), t(1, 2, "A0"), t(9, 1, "A1"), t(3, 8, "A1"), t(5, 1, "A2")].into();
        let m = score(&[BTreeSet::new()], &[gold.clone()]);
        assert_eq!(m.by_distance.iter().map(|c| c.gold).sum::<usize>(), gold.len());
        assert_eq!(m.by_distance[5].gold, 2);
        assert_eq!(m.by_distance[4].gold, 1);
    }

    #[test]
    fn per_label_rows() {
        let gold: BTreeSet<_> = [t(2, 1, "A0"), t(2, 3, "A1"), t(2, 4, "AM-TMP")].into();
        let m = score(&[gold.clone()], &[gold]);
        assert_eq!(m.per_label.keys().cloned().collect::<Vec<_>>(), vec!["A0", "A1", "AM-TMP"]);
        assert!(m.breakdown_tsv().contains("AM-TMP\t100.0\t100.0\t100.0\t1"));
    }
}
