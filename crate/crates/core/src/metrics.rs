//! Confusion matrices and classification scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are true classes, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let classes = rows.len();
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::invalid("confusion matrix must be square"));
        }
        Ok(ConfusionMatrix {
            classes,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            return Err(Error::invalid(format!(
                "class id out of range: truth {truth}, prediction {pred}, {} classes",
                self.classes
            )));
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn support(&self, c: usize) -> u64 {
        (0..self.classes).map(|p| self.get(c, p)).sum()
    }

    pub fn predicted(&self, c: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, c)).sum()
    }

    /// CSV with a header row of predicted class names and one row per true class.
    pub fn to_csv(&self, class_names: &[String]) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["truth\\predicted".to_string()];
        header.extend(class_names.iter().cloned());
        w.write_record(&header).map_err(csv_err)?;
        for (t, row) in self.rows().iter().enumerate() {
            let mut rec = vec![class_names.get(t).cloned().unwrap_or_else(|| t.to_string())];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec).map_err(csv_err)?;
        }
        String::from_utf8(w.into_inner().map_err(|e| Error::invalid(e.to_string()))?)
            .map_err(|e| Error::invalid(e.to_string()))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::invalid(e.to_string())
}

pub fn confusion(predictions: &[usize], truths: &[usize], classes: usize) -> Result<ConfusionMatrix> {
    if predictions.len() != truths.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} targets",
            predictions.len(),
            truths.len()
        )));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (&p, &t) in predictions.iter().zip(truths) {
        cm.add(t, p)?;
    }
    Ok(cm)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub name: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

/// Per-class precision, recall and F1; undefined ratios are 0.
pub fn per_class(cm: &ConfusionMatrix, class_names: &[String]) -> Vec<ClassScore> {
    (0..cm.classes())
        .map(|c| {
            let tp = cm.get(c, c) as f64;
            let (pred, sup) = (cm.predicted(c), cm.support(c));
            let precision = if pred > 0 { tp / pred as f64 } else { 0.0 };
            let recall = if sup > 0 { tp / sup as f64 } else { 0.0 };
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassScore {
                name: class_names.get(c).cloned().unwrap_or_else(|| c.to_string()),
                precision,
                recall,
                f1,
                support: sup,
            }
        })
        .collect()
}

/// Support-weighted F1 over classes.
pub fn weighted_f1(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::invalid("weighted F1 of an empty confusion matrix"));
    }
    let mut f1 = 0.0;
    for c in 0..cm.classes() {
        let tp = cm.get(c, c) as f64;
        let (pred, sup) = (cm.predicted(c), cm.support(c));
        if pred == 0 || sup == 0 || tp == 0.0 {
            continue;
        }
        let (p, r) = (tp / pred as f64, tp / sup as f64);
        f1 += (sup as f64 / total as f64) * p * r / (p + r);
    }
    Ok(2.0 * f1)
}

pub fn accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::invalid("accuracy of an empty confusion matrix"));
    }
    let correct: u64 = (0..cm.classes()).map(|c| cm.get(c, c)).sum();
    Ok(correct as f64 / total as f64)
}

/// Everything `eval` reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub weighted_f1: f64,
    pub accuracy: f64,
    pub samples: u64,
    pub per_class: Vec<ClassScore>,
}

impl EvalReport {
    pub fn from_confusion(cm: &ConfusionMatrix, class_names: &[String]) -> Result<Self> {
        Ok(EvalReport {
            weighted_f1: weighted_f1(cm)?,
            accuracy: accuracy(cm)?,
            samples: cm.total(),
            per_class: per_class(cm, class_names),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(c: usize) -> Vec<String> {
        (0..c).map(|i| format!("c{i}")).collect()
    }

    #[test]
    fn perfect_matrix_scores_one() {
        let cm = ConfusionMatrix::from_counts(&[vec![5, 0, 0], vec![0, 3, 0], vec![0, 0, 9]]).unwrap();
        assert_eq!(weighted_f1(&cm).unwrap(), 1.0);
        assert_eq!(accuracy(&cm).unwrap(), 1.0);
    }

    #[test]
    fn two_class_example() {
        let cm = ConfusionMatrix::from_counts(&[vec![8, 2], vec![3, 7]]).unwrap();
        let (p0, p1, r0, r1) = (8.0 / 11.0, 7.0 / 9.0, 0.8, 0.7);
        let f0 = 2.0 * p0 * r0 / (p0 + r0);
        let f1 = 2.0 * p1 * r1 / (p1 + r1);
        let expected = 0.5 * f0 + 0.5 * f1;
        assert!((weighted_f1(&cm).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn single_class_predictions_score_a_third() {
        let cm = ConfusionMatrix::from_counts(&[vec![10, 0], vec![10, 0]]).unwrap();
        assert!((weighted_f1(&cm).unwrap() - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_matrix_rejected() {
        assert!(weighted_f1(&ConfusionMatrix::new(3)).is_err());
    }

    #[test]
    fn confusion_tallies() {
        let cm = confusion(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!(cm.rows(), vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 1]]);
        assert_eq!(confusion(&[], &[], 2).unwrap().total(), 0);
        assert!(confusion(&[3], &[0], 3).is_err());
        let cm = confusion(&[1, 1, 0, 1], &[0, 1, 0, 0], 2).unwrap();
        assert_eq!(cm.rows(), vec![vec![1, 2], vec![0, 1]]);
    }

    #[test]
    fn csv_layout() {
        let cm = ConfusionMatrix::from_counts(&[vec![1, 2], vec![0, 3]]).unwrap();
        let csv = cm.to_csv(&names(2)).unwrap();
        assert_eq!(csv, "truth\\predicted,c0,c1\nc0,1,2\nc1,0,3\n");
    }

    proptest! {
        #[test]
        fn f1_is_bounded_and_one_only_on_diagonal(
            counts in proptest::collection::vec(0u64..20, 16)
        ) {
            let rows: Vec<Vec<u64>> = counts.chunks(4).map(<[u64]>::to_vec).collect();
            let cm = ConfusionMatrix::from_counts(&rows).unwrap();
            prop_assume!(cm.total() > 0);
            let f = weighted_f1(&cm).unwrap();
            prop_assert!((0.0..=1.0 + 1e-12).contains(&f));
            let diagonal = (0..4).all(|t| (0..4).all(|p| t == p || cm.get(t, p) == 0));
            prop_assert_eq!((f - 1.0).abs() < 1e-12, diagonal);
        }
    }
}
