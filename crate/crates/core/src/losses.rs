//! Feature-centroid contrastive loss, cross-entropy and the combined objective.
//!
//! For a unit feature `f` with own-class centroid `c+` and the other seen
//! centroids `c-`:
//!
//! ```text
//! L_cont = -log( exp(f.c+/tau) / (exp(f.c+/tau) + sum exp(f.c-/tau)) )
//! L      = mean(L_ce) + alpha * mean(L_cont)
//! ```
//!
//! Only seen classes take part in the softmax. A sample whose class is not
//! seen yet, or that has no seen negative, contributes cross-entropy only.

use serde::{Deserialize, Serialize};

use crate::centroid_bank::CentroidBank;
use crate::error::{FcclError, Result};
use crate::linalg::{dot, log_sum_exp, softmax, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce: f64,
    pub cont: f64,
    pub total: f64,
    pub alpha: f64,
    pub tau: f64,
}

/// Seen classes as `(class, similarity / tau)`, with the own class first.
fn scaled_similarities(
    f: &[f64],
    bank: &CentroidBank,
    own_class: usize,
    tau: f64,
) -> Result<Vec<(usize, f64)>> {
    if !(tau > 0.0) {
        return Err(FcclError::invalid(format!("tau must be positive, got {tau}")));
    }
    if f.len() != bank.feature_dim() {
        return Err(FcclError::invalid(format!(
            "feature has {} dims, bank has {}",
            f.len(),
            bank.feature_dim()
        )));
    }
    let own = bank.centroid(own_class).ok_or_else(|| {
        FcclError::State(format!("class {own_class} has no centroid yet"))
    })?;
    let mut sims = vec![(own_class, dot(f, own) / tau)];
    for class in (0..bank.num_classes()).filter(|&c| c != own_class) {
        if let Some(c) = bank.centroid(class) {
            sims.push((class, dot(f, c) / tau));
        }
    }
    if sims.len() < 2 {
        return Err(FcclError::State(format!(
            "no seen negative centroid for class {own_class}"
        )));
    }
    Ok(sims)
}

/// True when the bank can score a sample of this class (own and one negative seen).
pub fn contrast_ready(bank: &CentroidBank, own_class: usize) -> bool {
    bank.is_seen(own_class) && bank.seen_count() >= 2
}

pub fn contrastive_loss(f: &[f64], bank: &CentroidBank, own_class: usize, tau: f64) -> Result<f64> {
    let sims = scaled_similarities(f, bank, own_class, tau)?;
    let logits: Vec<f64> = sims.iter().map(|s| s.1).collect();
    Ok(log_sum_exp(&logits) - logits[0])
}

/// Gradient of [`contrastive_loss`] with respect to the unit feature:
/// `(sum_k p_k c_k - c+) / tau`, with `p` the softmax over seen similarities.
pub fn contrastive_loss_grad(
    f: &[f64],
    bank: &CentroidBank,
    own_class: usize,
    tau: f64,
) -> Result<Vec<f64>> {
    let sims = scaled_similarities(f, bank, own_class, tau)?;
    let logits: Vec<f64> = sims.iter().map(|s| s.1).collect();
    let p = softmax(&logits);
    let mut grad = vec![0.0; f.len()];
    for ((class, _), pk) in sims.iter().zip(&p) {
        let c = bank.centroids().row(*class);
        // own class carries the -1 of the positive term
        let w = if *class == own_class { pk - 1.0 } else { *pk };
        for (g, ci) in grad.iter_mut().zip(c) {
            *g += w * ci;
        }
    }
    grad.iter_mut().for_each(|g| *g /= tau);
    Ok(grad)
}

fn check_logits(logits: &[f64], label: usize) -> Result<()> {
    if label >= logits.len() {
        return Err(FcclError::invalid(format!(
            "label {label} outside [0, {})",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(FcclError::invalid("non-finite logit"));
    }
    Ok(())
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    check_logits(logits, label)?;
    Ok(log_sum_exp(logits) - logits[label])
}

/// `softmax(logits) - onehot(label)`.
pub fn cross_entropy_grad(logits: &[f64], label: usize) -> Result<Vec<f64>> {
    check_logits(logits, label)?;
    let mut p = softmax(logits);
    p[label] -= 1.0;
    Ok(p)
}

/// Batch objective together with the upstream gradients the model needs.
#[derive(Debug, Clone)]
pub struct ObjectiveGrads {
    pub loss: LossBreakdown,
    /// d total / d normalized features, `B x F`.
    pub d_features: Matrix,
    /// d total / d logits, `B x K`.
    pub d_logits: Matrix,
    /// Samples that contributed a contrastive term.
    pub contrast_samples: usize,
}

fn check_batch(features: &Matrix, logits: &Matrix, labels: &[usize], alpha: f64) -> Result<()> {
    if !(alpha >= 0.0) {
        return Err(FcclError::invalid(format!("alpha must be >= 0, got {alpha}")));
    }
    if labels.is_empty() {
        return Err(FcclError::invalid("empty batch"));
    }
    if features.rows() != labels.len() || logits.rows() != labels.len() {
        return Err(FcclError::invalid(format!(
            "batch size mismatch: {} features, {} logits, {} labels",
            features.rows(),
            logits.rows(),
            labels.len()
        )));
    }
    Ok(())
}

/// `ce = mean L_ce`, `cont = mean L_cont` (cold-start samples count as 0),
/// `total = ce + alpha * cont`.
pub fn combined_loss(
    features: &Matrix,
    logits: &Matrix,
    labels: &[usize],
    bank: &CentroidBank,
    alpha: f64,
    tau: f64,
) -> Result<LossBreakdown> {
    check_batch(features, logits, labels, alpha)?;
    let n = labels.len() as f64;
    let mut ce = 0.0;
    let mut cont = 0.0;
    for (i, &label) in labels.iter().enumerate() {
        ce += cross_entropy(logits.row(i), label)?;
        if contrast_ready(bank, label) {
            cont += contrastive_loss(features.row(i), bank, label, tau)?;
        }
    }
    let (ce, cont) = (ce / n, cont / n);
    Ok(LossBreakdown {
        ce,
        cont,
        total: ce + alpha * cont,
        alpha,
        tau,
    })
}

/// Cross-entropy only; the bank is never consulted.
pub fn cross_entropy_objective(logits: &Matrix, labels: &[usize]) -> Result<ObjectiveGrads> {
    let n = labels.len();
    let placeholder = Matrix::zeros(n, 0);
    check_batch(&placeholder, logits, labels, 0.0)?;
    let inv_n = 1.0 / n as f64;
    let mut ce = 0.0;
    let mut d_logits = Matrix::zeros(n, logits.cols());
    for (i, &label) in labels.iter().enumerate() {
        ce += cross_entropy(logits.row(i), label)?;
        let g = cross_entropy_grad(logits.row(i), label)?;
        for (d, gi) in d_logits.row_mut(i).iter_mut().zip(g) {
            *d = gi * inv_n;
        }
    }
    let ce = ce / n as f64;
    Ok(ObjectiveGrads {
        loss: LossBreakdown {
            ce,
            cont: 0.0,
            total: ce,
            alpha: 0.0,
            tau: 1.0,
        },
        d_features: Matrix::zeros(n, 0),
        d_logits,
        contrast_samples: 0,
    })
}

/// [`combined_loss`] plus its gradients. The contrastive gradient is only
/// formed when `alpha > 0`, so an `alpha = 0` step is exactly a CE step.
pub fn combined_objective(
    features: &Matrix,
    logits: &Matrix,
    labels: &[usize],
    bank: &CentroidBank,
    alpha: f64,
    tau: f64,
) -> Result<ObjectiveGrads> {
    let loss = combined_loss(features, logits, labels, bank, alpha, tau)?;
    let mut out = cross_entropy_objective(logits, labels)?;
    let n = labels.len();
    let scale = alpha / n as f64;
    let mut d_features = Matrix::zeros(n, features.cols());
    let mut contrast_samples = 0;
    for (i, &label) in labels.iter().enumerate() {
        if !contrast_ready(bank, label) {
            continue;
        }
        contrast_samples += 1;
        if alpha > 0.0 {
            let g = contrastive_loss_grad(features.row(i), bank, label, tau)?;
            for (d, gi) in d_features.row_mut(i).iter_mut().zip(g) {
                *d = gi * scale;
            }
        }
    }
    out.loss = loss;
    out.d_features = d_features;
    out.contrast_samples = contrast_samples;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::E;

    fn bank_with(rows: &[&[f64]]) -> CentroidBank {
        let k = rows.len();
        let f = rows[0].len();
        let mut bank = CentroidBank::new(k, f, 0.0).unwrap();
        let means = Matrix::from_rows(rows).unwrap();
        bank.ema_update(&means, &vec![true; k]).unwrap();
        bank
    }

    #[test]
    fn contrastive_examples() {
        let bank = bank_with(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let l = contrastive_loss(&[1.0, 0.0], &bank, 0, 1.0).unwrap();
        assert!((l - 0.3132616875182228).abs() < 1e-12);
        assert!((l + (E / (E + 1.0)).ln()).abs() < 1e-14);

        let h = std::f64::consts::FRAC_1_SQRT_2;
        let l = contrastive_loss(&[h, h], &bank, 1, 1.0).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-14);

        // f.c+ = 1, both negatives at -1
        let bank = bank_with(&[&[1.0, 0.0], &[-1.0, 0.0], &[-1.0, 0.0]]);
        let l = contrastive_loss(&[1.0, 0.0], &bank, 0, 1.0).unwrap();
        assert!((l - 0.2395447662218845).abs() < 1e-12);
    }

    #[test]
    fn contrastive_state_errors() {
        let mut bank = CentroidBank::new(3, 2, 0.0).unwrap();
        let means = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0], [0.0, 0.0]]).unwrap();
        assert!(matches!(
            contrastive_loss(&[1.0, 0.0], &bank, 0, 1.0),
            Err(FcclError::State(_))
        ));
        bank.ema_update(&means, &[true, false, false]).unwrap();
        assert!(matches!(
            contrastive_loss(&[1.0, 0.0], &bank, 0, 1.0),
            Err(FcclError::State(_))
        ));
        assert!(!contrast_ready(&bank, 0));
        assert!(contrastive_loss(&[1.0, 0.0], &bank, 0, 0.0).is_err());
    }

    #[test]
    fn contrastive_grad_examples() {
        let bank = bank_with(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let g = contrastive_loss_grad(&[h, h], &bank, 0, 1.0).unwrap();
        assert!((g[0] + 0.5).abs() < 1e-14 && (g[1] - 0.5).abs() < 1e-14);

        // tiny tau saturates p on the own class
        let g = contrastive_loss_grad(&[1.0, 0.0], &bank, 0, 1e-3).unwrap();
        assert!(g.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((cross_entropy(&[0.3; 4], 2).unwrap() - 4f64.ln()).abs() < 1e-14);
        let l = cross_entropy(&[1000.0, 0.0], 0).unwrap();
        assert!(l.abs() < 1e-300 || l == 0.0);
        let l = cross_entropy(&[2.0, 1.0, 0.0], 0).unwrap();
        assert!((l - 0.4076059644443803).abs() < 1e-12);
        assert!(cross_entropy(&[1.0, 2.0], 2).is_err());
        assert!(cross_entropy(&[f64::INFINITY, 0.0], 0).is_err());
    }

    #[test]
    fn combined_examples() {
        let bank = bank_with(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let feats = Matrix::from_rows(&[[0.6, 0.8], [1.0, 0.0]]).unwrap();
        let logits = Matrix::from_rows(&[[0.2, -0.1], [1.5, 0.5]]).unwrap();
        let labels = [0, 1];

        let zero = combined_loss(&feats, &logits, &labels, &bank, 0.0, 1.0).unwrap();
        let ce = (cross_entropy(logits.row(0), 0).unwrap() + cross_entropy(logits.row(1), 1).unwrap()) / 2.0;
        assert_eq!(zero.total, zero.ce);
        assert!((zero.ce - ce).abs() < 1e-15);

        let one = combined_loss(&feats.select_rows(&[0]), &logits.select_rows(&[0]), &[0], &bank, 1.0, 1.0).unwrap();
        let expect = cross_entropy(logits.row(0), 0).unwrap()
            + contrastive_loss(feats.row(0), &bank, 0, 1.0).unwrap();
        assert!((one.total - expect).abs() < 1e-14);

        let alpha = 0.7;
        let two = combined_loss(&feats, &logits, &labels, &bank, alpha, 1.0).unwrap();
        let (a1, a2) = (cross_entropy(logits.row(0), 0).unwrap(), cross_entropy(logits.row(1), 1).unwrap());
        let (b1, b2) = (
            contrastive_loss(feats.row(0), &bank, 0, 1.0).unwrap(),
            contrastive_loss(feats.row(1), &bank, 1, 1.0).unwrap(),
        );
        assert!((two.total - ((a1 + a2) / 2.0 + alpha * (b1 + b2) / 2.0)).abs() < 1e-14);
        assert!(combined_loss(&feats, &logits, &labels, &bank, -1.0, 1.0).is_err());
    }

    #[test]
    fn cold_start_samples_contribute_ce_only() {
        let bank = CentroidBank::new(2, 2, 0.9).unwrap();
        let feats = Matrix::from_rows(&[[0.6, 0.8]]).unwrap();
        let logits = Matrix::from_rows(&[[0.2, -0.1]]).unwrap();
        let out = combined_objective(&feats, &logits, &[0], &bank, 1.0, 1.0).unwrap();
        assert_eq!(out.loss.cont, 0.0);
        assert_eq!(out.loss.total, out.loss.ce);
        assert_eq!(out.contrast_samples, 0);
        assert!(out.d_features.as_slice().iter().all(|v| *v == 0.0));
    }
}
