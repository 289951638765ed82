//! Confusion matrices and the scores derived from them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `K x K` counts; rows are true classes, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

/// Precision, recall and F1 of one class. Zero denominators give 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("confusion matrix needs at least one class"));
        }
        Ok(ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        })
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        let mut m = ConfusionMatrix::new(k)?;
        for (i, row) in rows.iter().enumerate() {
            if row.len() != k {
                return Err(Error::invalid(format!(
                    "row {i} has {} entries, expected {k}",
                    row.len()
                )));
            }
            m.counts[i * k..(i + 1) * k].copy_from_slice(row);
        }
        Ok(m)
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.k).map(<[u64]>::to_vec).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn update(&mut self, truth: &[usize], pred: &[usize]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::ShapeMismatch {
                op: "confusion_update",
                lhs: vec![truth.len()],
                rhs: vec![pred.len()],
            });
        }
        if let Some(&label) = truth.iter().chain(pred).find(|&&l| l >= self.k) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: self.k,
            });
        }
        for (&t, &p) in truth.iter().zip(pred) {
            self.counts[t * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::ShapeMismatch {
                op: "confusion_merge",
                lhs: vec![self.k, self.k],
                rhs: vec![other.k, other.k],
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Trace over total. An empty matrix has no accuracy.
    pub fn accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::invalid("accuracy of an empty confusion matrix"));
        }
        let trace: u64 = (0..self.k).map(|i| self.get(i, i)).sum();
        Ok(trace as f64 / total as f64)
    }

    pub fn per_class(&self) -> Vec<ClassScores> {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        (0..self.k)
            .map(|c| {
                let tp = self.get(c, c);
                let support: u64 = (0..self.k).map(|j| self.get(c, j)).sum();
                let predicted: u64 = (0..self.k).map(|i| self.get(i, c)).sum();
                let precision = ratio(tp, predicted);
                let recall = ratio(tp, support);
                let f1 = if precision + recall == 0.0 {
                    0.0
                } else {
                    2.0 * precision * recall / (precision + recall)
                };
                ClassScores {
                    precision,
                    recall,
                    f1,
                    support,
                }
            })
            .collect()
    }

    /// Unweighted mean of per-class F1.
    pub fn macro_f1(&self) -> f64 {
        self.per_class().iter().map(|s| s.f1).sum::<f64>() / self.k as f64
    }
}

/// Summary of one evaluation, printable and parseable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub class_names: Vec<String>,
    pub per_class: Vec<ClassScores>,
    pub confusion: ConfusionMatrix,
}

impl MetricsReport {
    pub fn new(confusion: ConfusionMatrix, class_names: &[String]) -> Result<Self> {
        if class_names.len() != confusion.num_classes() {
            return Err(Error::invalid(format!(
                "{} class names for {} classes",
                class_names.len(),
                confusion.num_classes()
            )));
        }
        Ok(MetricsReport {
            accuracy: confusion.accuracy()?,
            macro_f1: confusion.macro_f1(),
            class_names: class_names.to_vec(),
            per_class: confusion.per_class(),
            confusion,
        })
    }
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "accuracy: {:.4}", self.accuracy)?;
        writeln!(f, "macro_f1: {:.4}", self.macro_f1)?;
        writeln!(f, "per_class: index precision recall f1 support name")?;
        for (c, (s, name)) in self.per_class.iter().zip(&self.class_names).enumerate() {
            writeln!(
                f,
                "{c} {:.4} {:.4} {:.4} {} {name}",
                s.precision, s.recall, s.f1, s.support
            )?;
        }
        writeln!(f, "confusion: rows=true cols=pred")?;
        for row in self.confusion.rows() {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            writeln!(f, "{}", cells.join(" "))?;
        }
        Ok(())
    }
}

/// Recovers class names and the confusion matrix from the text form; the
/// scores are recomputed from the counts.
impl FromStr for MetricsReport {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut names = Vec::new();
        let mut rows = Vec::new();
        let mut section = "";
        for line in s.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if line.starts_with("per_class:") {
                section = "per_class";
            } else if line.starts_with("confusion:") {
                section = "confusion";
            } else if section == "per_class" {
                let name = line.splitn(6, ' ').nth(5).unwrap_or("").to_string();
                names.push(name);
            } else if section == "confusion" {
                let row = line
                    .split_whitespace()
                    .map(|v| {
                        v.parse::<u64>()
                            .map_err(|e| Error::invalid(format!("bad count `{v}`: {e}")))
                    })
                    .collect::<Result<Vec<u64>>>()?;
                rows.push(row);
            }
        }
        if rows.is_empty() {
            return Err(Error::invalid("report has no confusion block"));
        }
        MetricsReport::new(ConfusionMatrix::from_rows(&rows)?, &names)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_and_empty() {
        let mut m = ConfusionMatrix::new(3).unwrap();
        assert!(m.accuracy().is_err());
        assert_eq!(m.macro_f1(), 0.0);
        m.update(&[0, 1, 2], &[0, 1, 2]).unwrap();
        assert_eq!(m.accuracy().unwrap(), 1.0);
        assert_eq!(m.macro_f1(), 1.0);
    }

    #[test]
    fn hand_computed_binary() {
        // tp0 = 3, fn0 = 1, fp0 = 2; tp1 = 4
        let m = ConfusionMatrix::from_rows(&[vec![3, 1], vec![2, 4]]).unwrap();
        assert_eq!(m.accuracy().unwrap(), 0.7);
        let s = m.per_class();
        assert_eq!(s[0].precision, 0.6);
        assert_eq!(s[0].recall, 0.75);
        assert!((s[0].f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((s[1].f1 - 8.0 / 11.0).abs() < 1e-15);
    }

    #[test]
    fn unpredicted_class_scores_zero() {
        let m = ConfusionMatrix::from_rows(&[vec![2, 0], vec![1, 0]]).unwrap();
        let s = m.per_class();
        assert_eq!((s[1].precision, s[1].recall, s[1].f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn update_validates() {
        let mut m = ConfusionMatrix::new(2).unwrap();
        assert!(m.update(&[0], &[0, 1]).is_err());
        assert!(matches!(
            m.update(&[2], &[0]),
            Err(Error::LabelOutOfRange { label: 2, .. })
        ));
        assert_eq!(m.total(), 0);
    }

    #[test]
    fn merge_adds() {
        let mut a = ConfusionMatrix::from_rows(&[vec![1, 0], vec![0, 1]]).unwrap();
        let b = ConfusionMatrix::from_rows(&[vec![0, 2], vec![3, 0]]).unwrap();
        a.merge(&b).unwrap();
        assert_eq!(a.rows(), vec![vec![1, 2], vec![3, 1]]);
        assert!(a.merge(&ConfusionMatrix::new(3).unwrap()).is_err());
    }

    #[test]
    fn report_round_trip() {
        let m = ConfusionMatrix::from_rows(&[vec![5, 1, 0], vec![2, 7, 1], vec![0, 0, 4]]).unwrap();
        let names = ["a".to_string(), "b c".into(), "d".into()];
        let r = MetricsReport::new(m.clone(), &names).unwrap();
        let text = r.to_string();
        assert!(text.starts_with("accuracy: 0.8000\n"));
        assert_eq!(text.parse::<MetricsReport>().unwrap(), r);
        assert!(MetricsReport::new(m, &names[..2]).is_err());
    }
}
