//! Confusion matrices, accuracies and the misclassified-pair report.

use std::fmt::Write;

use crate::error::{Error, Result};

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Metrics {
    /// `confusion[truth][prediction]`.
    pub confusion: Vec<Vec<u64>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PairCount {
    pub a: usize,
    pub b: usize,
    /// `confusion[a][b] + confusion[b][a]`.
    pub count: u64,
}

impl Metrics {
    pub fn new(classes: usize) -> Self {
        Metrics { confusion: vec![vec![0; classes]; classes] }
    }

    pub fn from_matrix(confusion: Vec<Vec<u64>>) -> Result<Self> {
        let n = confusion.len();
        if n == 0 || confusion.iter().any(|r| r.len() != n) {
            return Err(Error::shape("metrics", "confusion matrix must be square and non-empty"));
        }
        Ok(Metrics { confusion })
    }

    pub fn classes(&self) -> usize {
        self.confusion.len()
    }

    pub fn record(&mut self, truth: usize, prediction: usize) {
        self.confusion[truth][prediction] += 1;
    }

    pub fn total(&self) -> u64 {
        self.confusion.iter().flatten().sum()
    }

    /// `trace / total`; `NaN` when empty.
    pub fn accuracy(&self) -> f64 {
        let trace: u64 = (0..self.classes()).map(|i| self.confusion[i][i]).sum();
        trace as f64 / self.total() as f64
    }

    /// Recall per class; `None` for classes with no support.
    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        self.confusion
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let support: u64 = row.iter().sum();
                (support > 0).then(|| row[i] as f64 / support as f64)
            })
            .collect()
    }

    /// The `k` unordered class pairs with the most confusions in either
    /// direction, descending; ties keep `(a, b)` index order.
    pub fn confusion_pairs(&self, k: usize) -> Vec<PairCount> {
        let n = self.classes();
        let mut pairs = Vec::with_capacity(n * (n - 1) / 2);
        for a in 0..n {
            for b in a + 1..n {
                pairs.push(PairCount { a, b, count: self.confusion[a][b] + self.confusion[b][a] });
            }
        }
        // stable sort keeps index order among equal counts
        pairs.sort_by_key(|p| std::cmp::Reverse(p.count));
        pairs.truncate(k);
        pairs
    }

    /// Accuracy, per-class accuracy, the confusion matrix and the top-`k`
    /// misclassified pairs as tab-separated text.
    pub fn report(&self, labels: &[String], k: usize) -> String {
        let name = |i: usize| labels.get(i).cloned().unwrap_or_else(|| i.to_string());
        let mut s = String::new();
        writeln!(s, "accuracy\t{:.4}\t({} clips)", self.accuracy(), self.total()).unwrap();
        writeln!(s, "\nclass\taccuracy").unwrap();
        for (i, acc) in self.per_class_accuracy().iter().enumerate() {
            match acc {
                Some(a) => writeln!(s, "{}\t{a:.4}", name(i)).unwrap(),
                None => writeln!(s, "{}\t-", name(i)).unwrap(),
            }
        }
        writeln!(s, "\nconfusion (rows: truth, columns: prediction)").unwrap();
        let header: Vec<String> = (0..self.classes()).map(name).collect();
        writeln!(s, "\t{}", header.join("\t")).unwrap();
        for (i, row) in self.confusion.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
            writeln!(s, "{}\t{}", name(i), cells.join("\t")).unwrap();
        }
        writeln!(s, "\ntop-{k} misclassified pairs").unwrap();
        writeln!(s, "pair\tcount").unwrap();
        for p in self.confusion_pairs(k) {
            writeln!(s, "{} - {}\t{}", name(p.a), name(p.b), p.count).unwrap();
        }
        s
    }
}
