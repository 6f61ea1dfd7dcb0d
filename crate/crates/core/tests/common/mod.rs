//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use fccl::centroid_bank::CentroidBank;
use fccl::linalg::Matrix;
use fccl::losses::combined_loss;
use fccl::model::{ModelDims, ModelParams};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return v.iter().map(|x| x / n).collect();
        }
    }
}

/// Bank whose seen classes hold random unit centroids. Each class is seen with
/// probability `seen_prob`.
pub fn random_bank(rng: &mut ChaCha8Rng, k: usize, f: usize, seen_prob: f64) -> CentroidBank {
    let mut bank = CentroidBank::new(k, f, 0.0).unwrap();
    let mut means = Matrix::zeros(k, f);
    let mut mask = vec![false; k];
    for class in 0..k {
        means.row_mut(class).copy_from_slice(&unit_vector(rng, f));
        mask[class] = rng.random_bool(seen_prob);
    }
    bank.ema_update(&means, &mask).unwrap();
    bank
}

/// `-log( exp(f.c_y/tau) / sum_{seen k} exp(f.c_k/tau) )`, or `None` when the
/// own class or every negative is unseen.
pub fn brute_contrastive(f: &[f64], bank: &CentroidBank, y: usize, tau: f64) -> Option<f64> {
    let seen: Vec<usize> = (0..bank.num_classes()).filter(|&k| bank.is_seen(k)).collect();
    if !seen.contains(&y) || seen.len() < 2 {
        return None;
    }
    let sim = |k: usize| -> f64 {
        let c = bank.centroids().row(k);
        f.iter().zip(c).map(|(a, b)| a * b).sum::<f64>() / tau
    };
    let denom: f64 = seen.iter().map(|&k| sim(k).exp()).sum();
    Some(-(sim(y).exp() / denom).ln())
}

pub fn brute_cross_entropy(logits: &[f64], y: usize) -> f64 {
    let denom: f64 = logits.iter().map(|z| z.exp()).sum();
    -(logits[y].exp() / denom).ln()
}

/// `(ce, cont, total)` batch means; cold-start samples add 0 to `cont`.
pub fn brute_combined(
    features: &Matrix,
    logits: &Matrix,
    labels: &[usize],
    bank: &CentroidBank,
    alpha: f64,
    tau: f64,
) -> (f64, f64, f64) {
    let n = labels.len() as f64;
    let mut ce = 0.0;
    let mut cont = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        ce += brute_cross_entropy(logits.row(i), y);
        cont += brute_contrastive(features.row(i), bank, y, tau).unwrap_or(0.0);
    }
    (ce / n, cont / n, ce / n + alpha * cont / n)
}

/// Full combined objective of a model on a batch.
pub fn objective(
    model: &ModelParams,
    x: &Matrix,
    labels: &[usize],
    bank: &CentroidBank,
    alpha: f64,
    tau: f64,
) -> f64 {
    let out = model.forward(x).unwrap();
    combined_loss(&out.features, &out.logits, labels, bank, alpha, tau)
        .unwrap()
        .total
}

/// Central finite-difference gradient of [`objective`] over every parameter,
/// in [`ModelParams::values`] order.
pub fn finite_difference(
    model: &ModelParams,
    x: &Matrix,
    labels: &[usize],
    bank: &CentroidBank,
    alpha: f64,
    tau: f64,
    h: f64,
) -> Vec<f64> {
    let n = model.num_params();
    let mut grad = Vec::with_capacity(n);
    for i in 0..n {
        let mut plus = model.clone();
        *plus.values_mut().nth(i).unwrap() += h;
        let mut minus = model.clone();
        *minus.values_mut().nth(i).unwrap() -= h;
        let fp = objective(&plus, x, labels, bank, alpha, tau);
        let fm = objective(&minus, x, labels, bank, alpha, tau);
        grad.push((fp - fm) / (2.0 * h));
    }
    grad
}

/// `|a - b| / max(|a|, |b|)` on the whole gradient vector.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

pub fn random_dims(rng: &mut ChaCha8Rng, max: usize) -> ModelDims {
    let layers = rng.random_range(0..=2);
    ModelDims {
        input: rng.random_range(1..=max),
        hidden: (0..layers).map(|_| rng.random_range(4..=max)).collect(),
        feature: rng.random_range(1..=max),
        classes: rng.random_range(2..=max),
    }
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Exhaustive `1 - N sum_i (t_i-p_i)^2 / sum_{a,b} (t_a-p_b)^2`; `None` when the
/// denominator vanishes.
pub fn kappa_pairs(t: &[usize], p: &[usize]) -> Option<f64> {
    let sq = |a: usize, b: usize| (a.abs_diff(b) as u64).pow(2);
    let num: u64 = t.iter().zip(p).map(|(&a, &b)| sq(a, b)).sum();
    let mut den = 0u64;
    for &a in t {
        for &b in p {
            den += sq(a, b);
        }
    }
    (den > 0).then(|| 1.0 - (t.len() as u64 * num) as f64 / den as f64)
}

/// Pair-counting AUC: wins plus half ties over positive/negative pairs.
pub fn auc_pairs(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut twice = 0u64;
    let mut pairs = 0u64;
    for (i, &li) in labels.iter().enumerate() {
        if !li {
            continue;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if lj {
                continue;
            }
            pairs += 1;
            twice += if scores[i] > scores[j] {
                2
            } else if scores[i] == scores[j] {
                1
            } else {
                0
            };
        }
    }
    (pairs > 0).then(|| twice as f64 / (2 * pairs) as f64)
}

/// Per-class OvR pair-counting AUC and the mean over defined classes.
pub fn macro_auc_pairs(probs: &Matrix, labels: &[usize]) -> (Vec<Option<f64>>, Option<f64>) {
    let per: Vec<Option<f64>> = (0..probs.cols())
        .map(|k| {
            let s: Vec<f64> = probs.iter_rows().map(|r| r[k]).collect();
            let l: Vec<bool> = labels.iter().map(|&y| y == k).collect();
            auc_pairs(&s, &l)
        })
        .collect();
    let usable: Vec<f64> = per.iter().flatten().copied().collect();
    let mean = (usable.len() >= 2).then(|| usable.iter().sum::<f64>() / usable.len() as f64);
    (per, mean)
}

/// Calls `f` with every vector in `{0..base}^len`.
pub fn for_each_tuple(len: usize, base: usize, f: &mut dyn FnMut(&[usize])) {
    let mut v = vec![0usize; len];
    loop {
        f(&v);
        let mut i = 0;
        loop {
            if i == len {
                return;
            }
            v[i] += 1;
            if v[i] < base {
                break;
            }
            v[i] = 0;
            i += 1;
        }
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}
