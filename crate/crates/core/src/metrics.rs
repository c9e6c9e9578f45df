//! Per-model and pairwise measures placed on the model-space axes.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::library::ModelLibrary;
use crate::linalg::top_eigenpairs;
use crate::matrix::{argmax, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("evaluation set is empty")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("instance id {id} out of range (n = {n})")]
    OutOfRange { id: usize, n: usize },
    #[error("AUC needs at least two instances")]
    TooFewInstances,
    #[error("unknown metric {0:?}")]
    UnknownMetric(String),
    #[error("acc_local needs a non-empty selection")]
    NoSelection,
}

/// Fraction of correct predictions, optionally restricted to `subset`.
pub fn accuracy(pred: &[usize], truth: &[usize], subset: Option<&[usize]>) -> Result<f64, MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::LengthMismatch(pred.len(), truth.len()));
    }
    match subset {
        None => {
            if pred.is_empty() {
                return Err(MetricError::Empty);
            }
            let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
            Ok(hits as f64 / pred.len() as f64)
        }
        Some(ids) => {
            if ids.is_empty() {
                return Err(MetricError::Empty);
            }
            let mut hits = 0usize;
            for &i in ids {
                if i >= pred.len() {
                    return Err(MetricError::OutOfRange { id: i, n: pred.len() });
                }
                hits += usize::from(pred[i] == truth[i]);
            }
            Ok(hits as f64 / ids.len() as f64)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FMeasure {
    pub value: f64,
    /// Class neither present nor predicted; value is 1 by convention.
    pub vacuous: bool,
}

pub fn f_measure(pred: &[usize], truth: &[usize], class: usize) -> Result<FMeasure, MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::LengthMismatch(pred.len(), truth.len()));
    }
    if pred.is_empty() {
        return Err(MetricError::Empty);
    }
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(truth) {
        match (p == class, t == class) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    if tp + fp + fneg == 0 {
        return Ok(FMeasure { value: 1.0, vacuous: true });
    }
    let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let recall = if tp + fneg == 0 { 0.0 } else { tp as f64 / (tp + fneg) as f64 };
    let value = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(FMeasure { value, vacuous: false })
}

/// Rank-statistic AUC with midranks for ties. `None` when either side is empty.
pub fn auc_binary(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if positive[k] {
                rank_sum += mid;
            }
        }
        i = j + 1;
    }
    let np = n_pos as f64;
    Some((rank_sum - np * (np + 1.0) / 2.0) / (np * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Auc {
    pub value: f64,
    /// Classes whose one-vs-rest problem had no positives or no negatives.
    pub degenerate: Vec<usize>,
}

/// Prevalence-weighted one-vs-rest AUC. For two classes this is the plain
/// AUC of the second column.
pub fn auc_weighted(probs: &Matrix, truth: &[usize]) -> Result<Auc, MetricError> {
    if probs.rows() != truth.len() {
        return Err(MetricError::LengthMismatch(probs.rows(), truth.len()));
    }
    if truth.len() < 2 {
        return Err(MetricError::TooFewInstances);
    }
    let k = probs.cols();
    let n = truth.len() as f64;
    let column = |c: usize| -> Vec<f64> { probs.iter_rows().map(|r| r[c]).collect() };
    if k == 2 {
        let pos: Vec<bool> = truth.iter().map(|&t| t == 1).collect();
        return Ok(match auc_binary(&column(1), &pos) {
            Some(v) => Auc {
                value: v,
                degenerate: vec![],
            },
            None => Auc {
                value: 0.5,
                degenerate: vec![0, 1],
            },
        });
    }
    let mut value = 0.0;
    let mut degenerate = Vec::new();
    for c in 0..k {
        let pos: Vec<bool> = truth.iter().map(|&t| t == c).collect();
        let weight = pos.iter().filter(|&&p| p).count() as f64 / n;
        let a = auc_binary(&column(c), &pos).unwrap_or_else(|| {
            degenerate.push(c);
            0.5
        });
        value += weight * a;
    }
    Ok(Auc { value, degenerate })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QValue {
    pub value: f64,
    /// Zero denominator; value forced to 0.
    pub degenerate: bool,
}

pub fn q_statistic(a: &[bool], b: &[bool]) -> Result<QValue, MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::LengthMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut n = [[0u64; 2]; 2];
    for (&x, &y) in a.iter().zip(b) {
        n[x as usize][y as usize] += 1;
    }
    Ok(q_from_counts(n[1][1], n[0][0], n[0][1], n[1][0]))
}

/// Q from contingency counts (both correct, both wrong, only b, only a).
pub fn q_from_counts(n11: u64, n00: u64, n01: u64, n10: u64) -> QValue {
    let agree = n11 as f64 * n00 as f64;
    let disagree = n01 as f64 * n10 as f64;
    let denom = agree + disagree;
    if denom == 0.0 {
        QValue {
            value: 0.0,
            degenerate: true,
        }
    } else {
        QValue {
            value: (agree - disagree) / denom,
            degenerate: false,
        }
    }
}

/// Symmetric matrix of pairwise Q-statistics with a unit diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct QMatrix {
    pub values: Matrix,
    pub degenerate_pairs: usize,
}

impl QMatrix {
    pub fn size(&self) -> usize {
        self.values.rows()
    }

    pub fn get(&self, a: usize, b: usize) -> f64 {
        self.values.get(a, b)
    }
}

pub fn q_matrix(correct: &[Vec<bool>]) -> Result<QMatrix, MetricError> {
    let m = correct.len();
    if let Some(first) = correct.first() {
        for c in correct {
            if c.len() != first.len() {
                return Err(MetricError::LengthMismatch(first.len(), c.len()));
            }
        }
        if first.is_empty() {
            return Err(MetricError::Empty);
        }
    }
    let pairs: Vec<(usize, usize)> = (0..m).flat_map(|a| (a + 1..m).map(move |b| (a, b))).collect();
    let qs: Vec<QValue> = pairs
        .par_iter()
        .map(|&(a, b)| q_statistic(&correct[a], &correct[b]).expect("lengths checked"))
        .collect();
    let mut values = Matrix::zeros(m, m);
    for i in 0..m {
        values.set(i, i, 1.0);
    }
    let mut degenerate_pairs = 0;
    for (&(a, b), q) in pairs.iter().zip(&qs) {
        values.set(a, b, q.value);
        values.set(b, a, q.value);
        degenerate_pairs += usize::from(q.degenerate);
    }
    Ok(QMatrix { values, degenerate_pairs })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diversity {
    pub coords: Vec<f64>,
    /// Total variance below 1e-12; coordinates are all zero.
    pub degenerate: bool,
}

/// First principal component score of each row of `q` after centering
/// the columns, oriented to correlate non-negatively with the row means.
pub fn diversity_coordinates(q: &QMatrix) -> Diversity {
    let m = q.size();
    let mut x = q.values.clone();
    for j in 0..m {
        let mean = (0..m).map(|i| x.get(i, j)).sum::<f64>() / m as f64;
        for i in 0..m {
            x.set(i, j, x.get(i, j) - mean);
        }
    }
    let total: f64 = x.as_slice().iter().map(|v| v * v).sum::<f64>() / m.max(1) as f64;
    if m < 2 || total < 1e-12 {
        return Diversity {
            coords: vec![0.0; m],
            degenerate: true,
        };
    }
    let mut cov = Matrix::zeros(m, m);
    for a in 0..m {
        for b in a..m {
            let s: f64 = (0..m).map(|i| x.get(i, a) * x.get(i, b)).sum::<f64>() / m as f64;
            cov.set(a, b, s);
            cov.set(b, a, s);
        }
    }
    let pc = top_eigenpairs(&cov, 1).remove(0).vector;
    let mut coords: Vec<f64> = x.iter_rows().map(|r| r.iter().zip(&pc).map(|(a, b)| a * b).sum()).collect();

    let row_means: Vec<f64> = q.values.iter_rows().map(|r| r.iter().sum::<f64>() / m as f64).collect();
    let rm_mean = row_means.iter().sum::<f64>() / m as f64;
    let c_mean = coords.iter().sum::<f64>() / m as f64;
    let cov_sign: f64 = coords.iter().zip(&row_means).map(|(c, r)| (c - c_mean) * (r - rm_mean)).sum();
    let flip = if cov_sign.abs() > 1e-12 {
        cov_sign < 0.0
    } else {
        // no correlation to orient by: make the first nonzero score positive
        coords.iter().find(|c| c.abs() > 1e-12).is_some_and(|&c| c < 0.0)
    };
    if flip {
        coords.iter_mut().for_each(|c| *c = -*c);
    }
    Diversity { coords, degenerate: false }
}

/// Per-model accuracy on the selected test instances.
pub fn local_accuracy_all_models(lib: &ModelLibrary, selection: &[usize]) -> Result<Vec<f64>, MetricError> {
    let truth = lib.test_labels();
    (0..lib.len()).map(|m| accuracy(lib.test_pred(m), truth, Some(selection))).collect()
}

/// Precomputed measures for one library model. `auc_weighted` and the
/// F-measures are taken on the out-of-fold block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub model_id: usize,
    pub accuracy_test: f64,
    pub auc_weighted: f64,
    pub f_measure_per_class: Vec<f64>,
    pub accuracy_cv: f64,
    pub diversity_coord: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<String>,
}

/// Inputs for one model: predicted labels and probabilities on both blocks.
pub struct ModelOutputs<'a> {
    pub test_probs: &'a Matrix,
    pub test_pred: &'a [usize],
    pub cv_probs: &'a Matrix,
    pub cv_pred: &'a [usize],
}

pub fn compute_records(
    outputs: &[ModelOutputs<'_>],
    test_truth: &[usize],
    cv_truth: &[usize],
    n_classes: usize,
) -> Result<Vec<MetricRecord>, MetricError> {
    let correct: Vec<Vec<bool>> = outputs
        .iter()
        .map(|o| o.cv_pred.iter().zip(cv_truth).map(|(p, t)| p == t).collect())
        .collect();
    let q = q_matrix(&correct)?;
    let diversity = diversity_coordinates(&q);
    outputs
        .iter()
        .enumerate()
        .map(|(id, o)| {
            let mut flags = Vec::new();
            let auc = auc_weighted(o.cv_probs, cv_truth)?;
            if !auc.degenerate.is_empty() {
                flags.push("auc_degenerate".to_string());
            }
            let mut f = Vec::with_capacity(n_classes);
            for c in 0..n_classes {
                let fm = f_measure(o.cv_pred, cv_truth, c)?;
                if fm.vacuous {
                    flags.push(format!("f1_vacuous:{c}"));
                }
                f.push(fm.value);
            }
            if diversity.degenerate {
                flags.push("div_degenerate".to_string());
            }
            Ok(MetricRecord {
                model_id: id,
                accuracy_test: accuracy(o.test_pred, test_truth, None)?,
                auc_weighted: auc.value,
                f_measure_per_class: f,
                accuracy_cv: accuracy(o.cv_pred, cv_truth, None)?,
                diversity_coord: diversity.coords[id],
                flags,
            })
        })
        .collect()
}

/// Argmax label of each row.
pub fn predicted_labels(probs: &Matrix) -> Vec<usize> {
    probs.iter_rows().map(argmax).collect()
}

/// Metric names as exposed on the model-space axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MetricName {
    Acc,
    AucW,
    F1(usize),
    AccCv,
    DivQ,
    AccLocal,
}

impl MetricName {
    /// Parses `acc`, `auc_w`, `f1:<class>`, `acc_cv`, `div_q`, `acc_local`.
    /// The class in `f1:` may be a class name or an index.
    pub fn parse(s: &str, classes: &[String]) -> Result<Self, MetricError> {
        Ok(match s {
            "acc" => Self::Acc,
            "auc_w" => Self::AucW,
            "acc_cv" => Self::AccCv,
            "div_q" => Self::DivQ,
            "acc_local" => Self::AccLocal,
            _ => {
                let class = s
                    .strip_prefix("f1:")
                    .and_then(|c| {
                        classes
                            .iter()
                            .position(|n| n == c)
                            .or_else(|| c.parse::<usize>().ok().filter(|&i| i < classes.len()))
                    })
                    .ok_or_else(|| MetricError::UnknownMetric(s.to_string()))?;
                Self::F1(class)
            }
        })
    }

    pub fn display(&self, classes: &[String]) -> String {
        match self {
            Self::F1(c) => format!("f1:{}", classes.get(*c).map_or_else(|| c.to_string(), Clone::clone)),
            other => other.to_string(),
        }
    }

    pub fn from_record(&self, r: &MetricRecord) -> Option<f64> {
        match self {
            Self::Acc => Some(r.accuracy_test),
            Self::AucW => Some(r.auc_weighted),
            Self::F1(c) => r.f_measure_per_class.get(*c).copied(),
            Self::AccCv => Some(r.accuracy_cv),
            Self::DivQ => Some(r.diversity_coord),
            Self::AccLocal => None,
        }
    }
}

impl fmt::Display for MetricName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Acc => f.write_str("acc"),
            Self::AucW => f.write_str("auc_w"),
            Self::F1(c) => write!(f, "f1:{c}"),
            Self::AccCv => f.write_str("acc_cv"),
            Self::DivQ => f.write_str("div_q"),
            Self::AccLocal => f.write_str("acc_local"),
        }
    }
}
