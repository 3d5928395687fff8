//! Confusion matrix and (macro) F1.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Counts with rows indexed by the true class and columns by the prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        Self {
            n: n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::dim("confusion matrix", "rows must form a square matrix"));
        }
        Ok(Self {
            n,
            counts: rows.concat(),
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<()> {
        for c in [truth, predicted] {
            if c >= self.n {
                return Err(Error::Index {
                    what: "class",
                    index: c,
                    len: self.n,
                });
            }
        }
        self.counts[truth * self.n + predicted] += 1;
        Ok(())
    }

    pub fn get(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.n + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Examples whose true class is `c`.
    pub fn support(&self, c: usize) -> u64 {
        (0..self.n).map(|j| self.get(c, j)).sum()
    }

    pub fn predicted(&self, c: usize) -> u64 {
        (0..self.n).map(|i| self.get(i, c)).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        (0..self.n).map(|c| self.get(c, c)).sum::<u64>() as f64 / total as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct F1Report {
    pub per_class: Vec<ClassScore>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Per-class F1 and their unweighted mean. Any zero denominator gives 0.
pub fn macro_f1(conf: &ConfusionMatrix) -> F1Report {
    let per_class: Vec<ClassScore> = (0..conf.n)
        .map(|c| {
            let tp = conf.get(c, c);
            let precision = ratio(tp, conf.predicted(c));
            let recall = ratio(tp, conf.support(c));
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassScore {
                precision,
                recall,
                f1,
                support: conf.support(c),
            }
        })
        .collect();
    let mean = |f: fn(&ClassScore) -> f64| per_class.iter().map(f).sum::<f64>() / conf.n.max(1) as f64;
    F1Report {
        macro_precision: mean(|s| s.precision),
        macro_recall: mean(|s| s.recall),
        macro_f1: mean(|s| s.f1),
        per_class,
    }
}

impl F1Report {
    /// `class,precision,recall,f1` rows plus an `overall` row of macro averages.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,precision,recall,f1\n");
        for (c, s) in self.per_class.iter().enumerate() {
            let _ = writeln!(out, "{c},{},{},{}", s.precision, s.recall, s.f1);
        }
        let _ = writeln!(out, "overall,{},{},{}", self.macro_precision, self.macro_recall, self.macro_f1);
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Aligned text table.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<10}{:>10}{:>10}{:>10}{:>9}\n", "class", "precision", "recall", "F1", "support");
        for (c, s) in self.per_class.iter().enumerate() {
            let _ = writeln!(
                out,
                "{:<10}{:>10.3}{:>10.3}{:>10.3}{:>9}",
                c, s.precision, s.recall, s.f1, s.support
            );
        }
        let total: u64 = self.per_class.iter().map(|s| s.support).sum();
        let _ = writeln!(
            out,
            "{:<10}{:>10.3}{:>10.3}{:>10.3}{:>9}",
            "overall", self.macro_precision, self.macro_recall, self.macro_f1, total
        );
        out
    }
}
