use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Classification metrics. `f1` is the positive-class F1 for two classes and
/// the macro average otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub n: usize,
    pub num_classes: usize,
    pub accuracy: f64,
    pub f1: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub per_class_f1: Vec<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn confusion_matrix(truth: &[usize], predicted: &[usize], num_classes: usize) -> Result<Vec<Vec<usize>>> {
    if truth.len() != predicted.len() {
        return Err(Error::Validation(format!(
            "{} labels but {} predictions",
            truth.len(),
            predicted.len()
        )));
    }
    let mut m = vec![vec![0usize; num_classes]; num_classes];
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= num_classes || p >= num_classes {
            return Err(Error::Validation(format!("class ({t}, {p}) outside 0..{num_classes}")));
        }
        m[t][p] += 1;
    }
    Ok(m)
}

impl Metrics {
    pub fn from_predictions(truth: &[usize], predicted: &[usize], num_classes: usize) -> Result<Self> {
        if truth.is_empty() {
            return Err(Error::Validation("metrics of an empty dataset".into()));
        }
        let confusion = confusion_matrix(truth, predicted, num_classes)?;
        Ok(Self::from_confusion(confusion))
    }

    pub fn from_confusion(confusion: Vec<Vec<usize>>) -> Self {
        let k = confusion.len();
        let n: usize = confusion.iter().flatten().sum();
        let correct: usize = (0..k).map(|c| confusion[c][c]).sum();
        let mut precision = Vec::with_capacity(k);
        let mut recall = Vec::with_capacity(k);
        let mut per_class_f1 = Vec::with_capacity(k);
        let mut support = Vec::with_capacity(k);
        for c in 0..k {
            let tp = confusion[c][c];
            let row: usize = confusion[c].iter().sum();
            let col: usize = confusion.iter().map(|r| r[c]).sum();
            precision.push(ratio(tp, col));
            recall.push(ratio(tp, row));
            per_class_f1.push(ratio(2 * tp, row + col));
            support.push(row);
        }
        let macro_f1 = per_class_f1.iter().sum::<f64>() / k as f64;
        let weighted_f1 = per_class_f1
            .iter()
            .zip(&support)
            .map(|(f, &s)| f * s as f64)
            .sum::<f64>()
            / n.max(1) as f64;
        let f1 = if k == 2 { per_class_f1[1] } else { macro_f1 };
        Metrics {
            n,
            num_classes: k,
            accuracy: ratio(correct, n),
            f1,
            macro_f1,
            weighted_f1,
            precision,
            recall,
            per_class_f1,
            confusion,
        }
    }

    /// The confusion matrix as integer CSV, one row per true class.
    pub fn confusion_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.confusion {
            let cells: Vec<String> = row.iter().map(ToString::to_string).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// `metric,value` rows for the scalar metrics and each class.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        out.push_str(&format!("n,{}\n", self.n));
        out.push_str(&format!("accuracy,{}\n", self.accuracy));
        out.push_str(&format!("f1,{}\n", self.f1));
        out.push_str(&format!("macro_f1,{}\n", self.macro_f1));
        out.push_str(&format!("weighted_f1,{}\n", self.weighted_f1));
        for c in 0..self.num_classes {
            out.push_str(&format!("precision_{c},{}\n", self.precision[c]));
            out.push_str(&format!("recall_{c},{}\n", self.recall[c]));
            out.push_str(&format!("f1_{c},{}\n", self.per_class_f1[c]));
        }
        out
    }
}

/// Mean and sample standard deviation of per-run values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub runs: Vec<Metrics>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_f1: f64,
    pub std_f1: f64,
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl RunSummary {
    pub fn new(runs: Vec<Metrics>) -> Result<Self> {
        if runs.is_empty() {
            return Err(Error::Validation("run summary needs at least one run".into()));
        }
        let acc: Vec<f64> = runs.iter().map(|m| m.accuracy).collect();
        let f1: Vec<f64> = runs.iter().map(|m| m.f1).collect();
        let (mean_accuracy, std_accuracy) = mean_std(&acc);
        let (mean_f1, std_f1) = mean_std(&f1);
        Ok(RunSummary {
            runs,
            mean_accuracy,
            std_accuracy,
            mean_f1,
            std_f1,
        })
    }
}
