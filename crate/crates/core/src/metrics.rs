//! Classification metrics with macro averaging, and confusion-matrix output.

use serde::{Deserialize, Serialize};

use crate::error::{MavrError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Set when a rate had a zero denominator and was defined as 0.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Rows are true classes, columns predicted classes.
    pub confusion: Vec<Vec<u64>>,
    pub accuracy: f64,
    pub precision_macro: f64,
    pub recall_macro: f64,
    pub f1_macro: f64,
    pub per_class: Vec<ClassMetrics>,
}

fn ratio(num: u64, den: u64) -> (f64, bool) {
    if den == 0 {
        (0.0, true)
    } else {
        (num as f64 / den as f64, false)
    }
}

pub fn compute_metrics(truths: &[usize], predictions: &[usize], classes: usize) -> Result<MetricsReport> {
    if truths.len() != predictions.len() {
        return Err(MavrError::shape(
            "compute_metrics",
            "N",
            format!("{} truths vs {} predictions", truths.len(), predictions.len()),
        ));
    }
    let mut confusion = vec![vec![0u64; classes]; classes];
    for (&t, &p) in truths.iter().zip(predictions) {
        for label in [t, p] {
            if label >= classes {
                return Err(MavrError::LabelOutOfRange { label, classes });
            }
        }
        confusion[t][p] += 1;
    }
    let n = truths.len() as u64;
    let mut per_class = Vec::with_capacity(classes);
    for i in 0..classes {
        let tp = confusion[i][i];
        let support: u64 = confusion[i].iter().sum();
        let predicted: u64 = confusion.iter().map(|row| row[i]).sum();
        let (precision, dp) = ratio(tp, predicted);
        let (recall, dr) = ratio(tp, support);
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            support,
            degenerate: dp || dr,
        });
    }
    let macro_of = |f: fn(&ClassMetrics) -> f64| {
        if classes == 0 {
            0.0
        } else {
            per_class.iter().map(f).sum::<f64>() / classes as f64
        }
    };
    let trace: u64 = (0..classes).map(|i| confusion[i][i]).sum();
    Ok(MetricsReport {
        accuracy: ratio(trace, n).0,
        precision_macro: macro_of(|c| c.precision),
        recall_macro: macro_of(|c| c.recall),
        f1_macro: macro_of(|c| c.f1),
        confusion,
        per_class,
    })
}

/// CSV with class names heading rows and columns. `normalize` divides each
/// row by its sum; empty rows stay zero.
pub fn render_confusion(report: &MetricsReport, class_names: &[&str], normalize: bool) -> String {
    let mut out = String::from("true\\pred");
    for name in class_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (i, row) in report.confusion.iter().enumerate() {
        out.push_str(class_names.get(i).copied().unwrap_or("?"));
        let total: u64 = row.iter().sum();
        for &v in row {
            out.push(',');
            if normalize {
                let x = if total == 0 { 0.0 } else { v as f64 / total as f64 };
                out.push_str(&format!("{x}"));
            } else {
                out.push_str(&v.to_string());
            }
        }
        out.push('\n');
    }
    out
}

/// Reads the matrix back out of [`render_confusion`] output.
pub fn parse_confusion(csv: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let bad = |m: String| MavrError::Format {
        path: "confusion.csv".into(),
        message: m,
    };
    let mut lines = csv.lines();
    let header = lines.next().ok_or_else(|| bad("empty".into()))?;
    let names: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
    let mut rows = Vec::new();
    for line in lines {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != names.len() + 1 {
            return Err(bad(format!("row has {} cells, expected {}", cells.len(), names.len() + 1)));
        }
        let row = cells[1..]
            .iter()
            .map(|c| c.parse::<f64>().map_err(|e| bad(format!("{c}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok((names, rows))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_two_class_example() {
        let r = compute_metrics(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert_eq!(r.confusion, vec![vec![1, 1], vec![0, 2]]);
        assert_eq!(r.accuracy, 0.75);
        assert!((r.precision_macro - 0.8333).abs() < 5e-5);
        assert!((r.recall_macro - 0.75).abs() < 5e-5);
        assert!((r.f1_macro - 0.7333).abs() < 5e-5);
    }

    #[test]
    fn constant_predictor_on_balanced_data() {
        let truths: Vec<usize> = (0..40).map(|i| i % 4).collect();
        let r = compute_metrics(&truths, &[0; 40], 4).unwrap();
        assert_eq!(r.accuracy, 0.25);
        assert_eq!(r.recall_macro, 0.25);
        assert_eq!(r.per_class[0].precision, 0.25);
        assert!((r.precision_macro - 0.0625).abs() < 1e-15);
        assert!(r.per_class[1].degenerate && !r.per_class[0].degenerate);
    }

    #[test]
    fn out_of_range_label() {
        assert!(matches!(
            compute_metrics(&[0, 2], &[0, 1], 2),
            Err(MavrError::LabelOutOfRange { label: 2, classes: 2 })
        ));
    }

    #[test]
    fn confusion_csv() {
        let r = MetricsReport {
            confusion: vec![vec![9, 1, 0, 0], vec![0; 4], vec![0, 0, 3, 0], vec![0, 0, 0, 1]],
            ..compute_metrics(&[], &[], 4).unwrap()
        };
        let names = ["a", "b", "c", "d"];
        let (_, rows) = parse_confusion(&render_confusion(&r, &names, true)).unwrap();
        assert_eq!(rows[0], vec![0.9, 0.1, 0.0, 0.0]);
        assert_eq!(rows[1], vec![0.0; 4]);
        let (parsed_names, raw) = parse_confusion(&render_confusion(&r, &names, false)).unwrap();
        assert_eq!(parsed_names, names);
        let back: Vec<Vec<u64>> = raw.iter().map(|row| row.iter().map(|&v| v as u64).collect()).collect();
        assert_eq!(back, r.confusion);
    }
}
