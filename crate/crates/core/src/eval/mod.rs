//! Classification metrics, cross-validation and Grad-CAM.

pub mod gradcam;

use serde::{Deserialize, Serialize};

use crate::data::split::{fold_pairs, stratified_kfold};
use crate::error::{Error, Result};
use crate::rng::derive_seed;

/// Per-sample class probabilities and true labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSet {
    probs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl PredictionSet {
    /// Rows must have `num_classes` entries in `[0, 1]` summing to 1 within
    /// 1e-9; labels must be in range.
    pub fn new(probs: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if probs.len() != labels.len() {
            return Err(Error::Argument(format!(
                "{} probability rows for {} labels",
                probs.len(),
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::Argument("need at least 2 classes".into()));
        }
        for (i, (row, &l)) in probs.iter().zip(&labels).enumerate() {
            if row.len() != num_classes {
                return Err(Error::Argument(format!("row {i} has {} entries", row.len())));
            }
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Argument(format!("row {i} is not a probability vector")));
            }
            if l >= num_classes {
                return Err(Error::Argument(format!("label {l} out of range")));
            }
        }
        Ok(Self {
            probs,
            labels,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn probs(&self) -> &[Vec<f64>] {
        &self.probs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Argmax of each row; ties go to the lowest class index.
    pub fn predicted(&self) -> Vec<usize> {
        self.probs
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (c, &p)| if p > best.1 { (c, p) } else { best })
                    .0
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub weighted_f1: f64,
    pub auc: f64,
    pub kappa: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasicMetrics {
    pub accuracy: f64,
    pub weighted_f1: f64,
}

fn check_pairs(labels: &[usize], preds: &[usize], k: usize) -> Result<()> {
    if labels.is_empty() {
        return Err(Error::Argument("no samples".into()));
    }
    if labels.len() != preds.len() {
        return Err(Error::Argument(format!(
            "{} labels but {} predictions",
            labels.len(),
            preds.len()
        )));
    }
    if labels.iter().chain(preds).any(|&c| c >= k) {
        return Err(Error::Argument(format!("class index out of range for {k} classes")));
    }
    Ok(())
}

/// `k x k` counts, rows indexed by label and columns by prediction.
pub fn confusion_matrix(labels: &[usize], preds: &[usize], k: usize) -> Result<Vec<Vec<usize>>> {
    check_pairs(labels, preds, k)?;
    let mut m = vec![vec![0usize; k]; k];
    for (&l, &p) in labels.iter().zip(preds) {
        m[l][p] += 1;
    }
    Ok(m)
}

/// Accuracy and support-weighted F1. A class never predicted has precision
/// and F1 zero.
pub fn classification_metrics(labels: &[usize], preds: &[usize], k: usize) -> Result<BasicMetrics> {
    let m = confusion_matrix(labels, preds, k)?;
    let n = labels.len() as f64;
    let correct: usize = (0..k).map(|c| m[c][c]).sum();
    let mut wf1 = 0.0;
    for c in 0..k {
        let tp = m[c][c] as f64;
        let support: usize = m[c].iter().sum();
        let predicted: usize = (0..k).map(|r| m[r][c]).sum();
        if support == 0 || tp == 0.0 {
            continue;
        }
        let precision = tp / predicted as f64;
        let recall = tp / support as f64;
        wf1 += support as f64 * 2.0 * precision * recall / (precision + recall);
    }
    Ok(BasicMetrics {
        accuracy: correct as f64 / n,
        weighted_f1: wf1 / n,
    })
}

/// Accuracy and weighted F1 of the argmax predictions.
pub fn compute_metrics(preds: &PredictionSet) -> Result<BasicMetrics> {
    classification_metrics(preds.labels(), &preds.predicted(), preds.num_classes())
}

/// Quadratic-weighted Cohen's kappa with weights `(i - j)^2 / (k - 1)^2`.
pub fn quadratic_kappa(labels: &[usize], preds: &[usize], k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::Argument("kappa needs at least 2 classes".into()));
    }
    let o = confusion_matrix(labels, preds, k)?;
    let n = labels.len() as f64;
    let rows: Vec<f64> = o.iter().map(|r| r.iter().sum::<usize>() as f64).collect();
    let cols: Vec<f64> = (0..k).map(|j| o.iter().map(|r| r[j]).sum::<usize>() as f64).collect();
    let denom_w = ((k - 1) * (k - 1)) as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..k {
        for j in 0..k {
            let w = ((i as f64 - j as f64).powi(2)) / denom_w;
            num += w * o[i][j] as f64;
            den += w * rows[i] * cols[j] / n;
        }
    }
    if den == 0.0 {
        return Err(Error::UndefinedKappa(
            "labels and predictions both concentrate on a single class".into(),
        ));
    }
    Ok(1.0 - num / den)
}

/// Mann-Whitney AUC: `P(s_pos > s_neg) + 0.5 P(s_pos == s_neg)`.
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Result<f64> {
    if scores.len() != positive.len() {
        return Err(Error::Argument("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Argument("NaN score".into()));
    }
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Argument("AUC needs both positive and negative samples".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of midranks (doubled, to stay in integers) of the positives.
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let mid2 = (i + j + 2) as u64;
        rank_sum2 += mid2 * order[i..=j].iter().filter(|&&o| positive[o]).count() as u64;
        i = j + 1;
    }
    let u2 = rank_sum2 - (n_pos * (n_pos + 1)) as u64;
    Ok(u2 as f64 / (2 * n_pos * n_neg) as f64)
}

/// One-vs-rest macro AUC over the classes that have both positives and
/// negatives among the labels.
pub fn auc_ovr_macro(preds: &PredictionSet) -> Result<f64> {
    let mut total = 0.0;
    let mut used = 0;
    for c in 0..preds.num_classes() {
        let positive: Vec<bool> = preds.labels().iter().map(|&l| l == c).collect();
        if positive.iter().all(|&p| p) || !positive.iter().any(|&p| p) {
            continue;
        }
        let scores: Vec<f64> = preds.probs().iter().map(|r| r[c]).collect();
        total += auc_binary(&scores, &positive)?;
        used += 1;
    }
    if used == 0 {
        return Err(Error::Argument("AUC needs at least two label classes".into()));
    }
    Ok(total / used as f64)
}

/// AUC of the positive class for two classes, one-vs-rest macro otherwise.
pub fn auc(preds: &PredictionSet) -> Result<f64> {
    if preds.num_classes() == 2 {
        let scores: Vec<f64> = preds.probs().iter().map(|r| r[1]).collect();
        let positive: Vec<bool> = preds.labels().iter().map(|&l| l == 1).collect();
        auc_binary(&scores, &positive)
    } else {
        auc_ovr_macro(preds)
    }
}

/// All four metrics of a prediction set.
pub fn evaluate(preds: &PredictionSet) -> Result<Metrics> {
    if preds.is_empty() {
        return Err(Error::Argument("empty prediction set".into()));
    }
    let basic = compute_metrics(preds)?;
    Ok(Metrics {
        accuracy: basic.accuracy,
        weighted_f1: basic.weighted_f1,
        auc: auc(preds)?,
        kappa: quadratic_kappa(preds.labels(), &preds.predicted(), preds.num_classes())?,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub folds: Vec<Metrics>,
    pub mean: Metrics,
    /// Sample standard deviation across folds.
    pub std: Metrics,
}

fn aggregate(folds: &[Metrics]) -> (Metrics, Metrics) {
    let n = folds.len() as f64;
    let pick = |f: fn(&Metrics) -> f64| -> (f64, f64) {
        let mean = folds.iter().map(f).sum::<f64>() / n;
        let var = if folds.len() > 1 {
            folds.iter().map(|m| (f(m) - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        (mean, var.sqrt())
    };
    let a = pick(|m| m.accuracy);
    let f = pick(|m| m.weighted_f1);
    let u = pick(|m| m.auc);
    let k = pick(|m| m.kappa);
    (
        Metrics { accuracy: a.0, weighted_f1: f.0, auc: u.0, kappa: k.0 },
        Metrics { accuracy: a.1, weighted_f1: f.1, auc: u.1, kappa: k.1 },
    )
}

/// Stratified k-fold cross-validation. `train_fn(train, validation,
/// fold_seed)` trains on the `train` indices and returns predictions for the
/// `validation` indices, in that order; labels in the returned set are
/// checked against `labels`.
pub fn cross_validate<F>(labels: &[usize], k: usize, seed: u64, mut train_fn: F) -> Result<CvReport>
where
    F: FnMut(&[usize], &[usize], u64) -> Result<PredictionSet>,
{
    let folds = stratified_kfold(labels, k, seed)?;
    let mut rows = Vec::with_capacity(k);
    for (f, pair) in fold_pairs(&folds).into_iter().enumerate() {
        let preds = train_fn(&pair.train, &pair.validation, derive_seed(seed, &[f as u64]))?;
        let expected: Vec<usize> = pair.validation.iter().map(|&i| labels[i]).collect();
        if preds.labels() != expected.as_slice() {
            return Err(Error::State(format!(
                "fold {f}: predictions do not follow the validation order"
            )));
        }
        rows.push(evaluate(&preds)?);
    }
    let (mean, std) = aggregate(&rows);
    Ok(CvReport { folds: rows, mean, std })
}
