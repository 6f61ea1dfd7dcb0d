//! Quadratic weighted kappa, Mann-Whitney ROC-AUC and macro one-vs-rest AUC.

use serde::{Deserialize, Serialize};

use crate::data::Domain;
use crate::error::{FcclError, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub metric: String,
    pub value: f64,
    pub domain: Domain,
    /// Per-class values; `None` for classes excluded from a macro average.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub per_class: Vec<Option<f64>>,
}

fn check_classes(labels: &[usize], k: usize, what: &str) -> Result<()> {
    match labels.iter().find(|&&l| l >= k) {
        Some(l) => Err(FcclError::invalid(format!("{what} {l} outside [0, {k})"))),
        None => Ok(()),
    }
}

/// `1 - sum(w O) / sum(w E)` with `w_ij = (i-j)^2 / (K-1)^2`.
///
/// Both sums are accumulated as exact integers (`E` scaled by `N`, weights
/// by `(K-1)^2`, which cancel), leaving a single floating-point division.
pub fn quadratic_weighted_kappa(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<f64> {
    if y_true.len() != y_pred.len() {
        return Err(FcclError::invalid(format!(
            "{} true labels but {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    if y_true.is_empty() {
        return Err(FcclError::invalid("kappa needs at least one sample"));
    }
    if k < 2 {
        return Err(FcclError::invalid("kappa needs at least 2 classes"));
    }
    check_classes(y_true, k, "true label")?;
    check_classes(y_pred, k, "predicted label")?;

    let mut observed = vec![0u64; k * k];
    let mut hist_true = vec![0u64; k];
    let mut hist_pred = vec![0u64; k];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        observed[t * k + p] += 1;
        hist_true[t] += 1;
        hist_pred[p] += 1;
    }
    let n = y_true.len() as u128;
    let mut num: u128 = 0;
    let mut den: u128 = 0;
    for i in 0..k {
        for j in 0..k {
            let w = (i.abs_diff(j) as u128).pow(2);
            num += w * observed[i * k + j] as u128;
            den += w * hist_true[i] as u128 * hist_pred[j] as u128;
        }
    }
    if den == 0 {
        return Err(FcclError::UndefinedMetric(
            "kappa expected disagreement is zero (degenerate marginals)".into(),
        ));
    }
    Ok(1.0 - (n * num) as f64 / den as f64)
}

/// Probability that a random positive outranks a random negative, ties 1/2.
pub fn auc_binary(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(FcclError::invalid(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(FcclError::invalid("NaN score"));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(FcclError::UndefinedMetric(
            "AUC needs at least one positive and one negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // twice the rank sum of positives, with tied groups sharing their mid-rank
    let mut rank_sum_x2: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        // ranks start+1 ..= end, midrank*2 = start + 1 + end
        let mid_x2 = (start + 1 + end) as u128;
        let pos_in_group = order[start..end].iter().filter(|&&i| labels[i]).count() as u128;
        rank_sum_x2 += mid_x2 * pos_in_group;
        start = end;
    }
    let (np, nn) = (n_pos as u128, n_neg as u128);
    // U*2 = 2R - np(np+1)
    let u_x2 = rank_sum_x2 - np * (np + 1);
    Ok(u_x2 as f64 / (2 * np * nn) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroAuc {
    pub macro_auc: f64,
    pub per_class: Vec<Option<f64>>,
    /// Classes with no positives or no negatives; left out of the average.
    pub excluded: Vec<usize>,
}

/// One-vs-rest AUC per class and their unweighted mean.
pub fn auc_macro_ovr(probabilities: &Matrix, labels: &[usize]) -> Result<MacroAuc> {
    if probabilities.rows() != labels.len() {
        return Err(FcclError::invalid(format!(
            "{} probability rows but {} labels",
            probabilities.rows(),
            labels.len()
        )));
    }
    let k = probabilities.cols();
    check_classes(labels, k, "label")?;
    let mut per_class = Vec::with_capacity(k);
    let mut excluded = Vec::new();
    for class in 0..k {
        let scores: Vec<f64> = probabilities.iter_rows().map(|r| r[class]).collect();
        let indicator: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        match auc_binary(&scores, &indicator) {
            Ok(v) => per_class.push(Some(v)),
            Err(FcclError::UndefinedMetric(_)) => {
                per_class.push(None);
                excluded.push(class);
            }
            Err(e) => return Err(e),
        }
    }
    let usable: Vec<f64> = per_class.iter().flatten().copied().collect();
    if usable.len() < 2 {
        return Err(FcclError::UndefinedMetric(format!(
            "only {} class(es) usable for macro AUC",
            usable.len()
        )));
    }
    Ok(MacroAuc {
        macro_auc: usable.iter().sum::<f64>() / usable.len() as f64,
        per_class,
        excluded,
    })
}

pub fn accuracy(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    if y_true.len() != y_pred.len() || y_true.is_empty() {
        return Err(FcclError::invalid("accuracy needs equal, non-empty label lists"));
    }
    let hits = y_true.iter().zip(y_pred).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / y_true.len() as f64)
}
