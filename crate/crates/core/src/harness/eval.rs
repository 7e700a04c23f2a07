//! Repeated-split evaluation of pooled representations and its report files.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use super::split::{split, SplitSpec};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::features::{extract_features, FeatureVector};
use crate::network::Network;
use crate::seed;
use crate::svm::{SvmModel, SvmParams};

/// Anything that can be trained on one split and label the other.
pub trait Classifier: Sync {
    fn fit_predict(&self, train: &[&[f32]], labels: &[usize], test: &[&[f32]], repeat: usize) -> Result<Vec<usize>>;
}

/// One-vs-rest linear SVM; the coordinate-order seed is derived per repeat.
#[derive(Clone, Debug, Default)]
pub struct SvmClassifier {
    pub params: SvmParams,
}

impl Classifier for SvmClassifier {
    fn fit_predict(&self, train: &[&[f32]], labels: &[usize], test: &[&[f32]], repeat: usize) -> Result<Vec<usize>> {
        let params = SvmParams {
            seed: seed::derive(self.params.seed, repeat as u64),
            ..self.params.clone()
        };
        SvmModel::train(train, labels, &params)?.predict_batch(test)
    }
}

/// Counts indexed `[true][predicted]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn add(&mut self, truth: usize, predicted: usize) -> Result<()> {
        let n = self.classes();
        if truth >= n || predicted >= n {
            return Err(Error::Domain(format!("class pair ({truth}, {predicted}) outside a {n}-class matrix")));
        }
        self.counts[truth][predicted] += 1;
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> usize {
        (0..self.classes()).map(|k| self.counts[k][k]).sum()
    }

    pub fn row_sums(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    /// Percentage of correct predictions.
    pub fn accuracy(&self) -> f64 {
        100.0 * self.trace() as f64 / self.total().max(1) as f64
    }

    /// Per-class recall in percent; `None` for classes absent from the test set.
    pub fn class_accuracies(&self) -> Vec<Option<f64>> {
        self.counts
            .iter()
            .enumerate()
            .map(|(k, row)| {
                let n: usize = row.iter().sum();
                (n > 0).then(|| 100.0 * row[k] as f64 / n as f64)
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("true");
        for k in 0..self.classes() {
            let _ = write!(s, ",pred_{k}");
        }
        s.push('\n');
        for (k, row) in self.counts.iter().enumerate() {
            let _ = write!(s, "{k}");
            for c in row {
                let _ = write!(s, ",{c}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |m: String| Error::Format(format!("confusion matrix: {m}"));
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty".into()))?;
        let n = header.split(',').count() - 1;
        let mut counts = Vec::with_capacity(n);
        for (k, line) in lines.enumerate() {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != n + 1 || fields[0] != k.to_string() {
                return Err(bad(format!("malformed row {k}")));
            }
            let row = fields[1..]
                .iter()
                .map(|f| f.parse().map_err(|_| bad(format!("bad count '{f}'"))))
                .collect::<Result<Vec<usize>>>()?;
            counts.push(row);
        }
        if counts.len() != n {
            return Err(bad(format!("expected {n} rows, got {}", counts.len())));
        }
        Ok(ConfusionMatrix { counts })
    }
}

/// Mean and sample (n-1) standard deviation; the deviation of fewer than two values is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// `"MEAN±STD"` with two decimals.
pub fn format_mean_std(mean: f64, std: f64) -> String {
    format!("{mean:.2}±{std:.2}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub class_names: Vec<String>,
    /// Accuracy of each repeat, in percent.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
    /// Per-class accuracy averaged over the repeats in which the class was tested.
    pub per_class: Vec<f64>,
    pub confusions: Vec<ConfusionMatrix>,
}

impl EvalReport {
    pub fn from_confusions(class_names: Vec<String>, confusions: Vec<ConfusionMatrix>) -> Self {
        let accuracies: Vec<f64> = confusions.iter().map(ConfusionMatrix::accuracy).collect();
        let (mean, std) = mean_std(&accuracies);
        let per_class = (0..class_names.len())
            .map(|k| {
                let seen: Vec<f64> = confusions.iter().filter_map(|c| c.class_accuracies()[k]).collect();
                mean_std(&seen).0
            })
            .collect();
        EvalReport {
            class_names,
            accuracies,
            mean,
            std,
            per_class,
            confusions,
        }
    }

    pub fn summary(&self) -> String {
        format_mean_std(self.mean, self.std)
    }
}

/// Runs every repeat of `spec` on precomputed labeled features.
pub fn evaluate_features(
    features: &[FeatureVector],
    class_names: &[String],
    spec: &SplitSpec,
    classifier: &dyn Classifier,
) -> Result<EvalReport> {
    spec.validate()?;
    let labels = features
        .iter()
        .enumerate()
        .map(|(i, f)| f.label.ok_or_else(|| Error::Domain(format!("feature {i} has no label"))))
        .collect::<Result<Vec<usize>>>()?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= class_names.len()) {
        return Err(Error::Domain(format!("label {bad} outside {} classes", class_names.len())));
    }
    let confusions = (0..spec.repeats)
        .into_par_iter()
        .map(|r| {
            let (train, test) = split(&labels, spec, r)?;
            let xs = |ids: &[usize]| ids.iter().map(|&i| features[i].values.as_slice()).collect::<Vec<_>>();
            let train_labels: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
            let predicted = classifier.fit_predict(&xs(&train), &train_labels, &xs(&test), r)?;
            if predicted.len() != test.len() {
                return Err(Error::dim("classifier output", "n", test.len(), predicted.len()));
            }
            let mut cm = ConfusionMatrix::new(class_names.len());
            for (&i, &p) in test.iter().zip(&predicted) {
                cm.add(labels[i], p)?;
            }
            Ok(cm)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport::from_confusions(class_names.to_vec(), confusions))
}

/// Extracts representations once, then evaluates every repeat on them.
pub fn evaluate(
    net: &mut Network<f32>,
    data: &Dataset,
    spec: &SplitSpec,
    classifier: &dyn Classifier,
    batch: usize,
) -> Result<EvalReport> {
    let features = extract_features(net, data, batch)?;
    evaluate_features(&features, &data.class_names, spec, classifier)
}

/// Writes `accuracy.csv`, `summary.txt`, `per_class.csv` and one
/// `confusion_<r>.csv` per repeat into `dir`, creating it if needed.
pub fn report_emit(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let put = |name: &str, text: String| {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    let mut acc = String::from("repeat,acc\n");
    for (r, a) in report.accuracies.iter().enumerate() {
        let _ = writeln!(acc, "{r},{a:.4}");
    }
    put("accuracy.csv", acc)?;
    put("summary.txt", format!("{}\n", report.summary()))?;
    let mut per_class = String::from("class,acc\n");
    for (name, a) in report.class_names.iter().zip(&report.per_class) {
        let _ = writeln!(per_class, "{name},{a:.4}");
    }
    put("per_class.csv", per_class)?;
    for (r, cm) in report.confusions.iter().enumerate() {
        put(&format!("confusion_{r}.csv"), cm.to_csv())?;
    }
    Ok(())
}
