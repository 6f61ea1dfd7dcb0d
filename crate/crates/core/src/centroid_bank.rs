//! Per-class unit-norm centroids maintained by an exponential moving average.
//!
//! A class row becomes valid ("seen") the first time a batch contains that
//! class: the normalized batch mean is copied in as the initial centroid.
//! Later batches blend in with `c <- m*c + (1-m)*mean` followed by
//! renormalization. The smoothing coefficient `m` follows
//! `m = m0 + (1 - m0) * e / A` and is set once at the start of every epoch.
//!
//! Centroids are constants for differentiation; the EMA is their only update path.
//!
//! # Checkpoint layout
//!
//! Plain UTF-8 text, whitespace separated, one record per line:
//!
//! ```text
//! fccl-bank 1
//! <K> <F>
//! <m0>
//! <m>
//! <seen_0> ... <seen_{K-1}>          (0 or 1)
//! <c_00> ... <c_0(F-1)>              (K rows, row-major)
//! ...
//! ```
//!
//! Reals use the shortest representation that parses back to the same `f64`.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{FcclError, Result};
use crate::linalg::{norm, Matrix};

/// Norms below this are treated as zero.
pub const MIN_NORM: f64 = 1e-12;

const BANK_MAGIC: &str = "fccl-bank 1";

/// Returns `v / ||v||`.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if !(n >= MIN_NORM) {
        return Err(FcclError::DegenerateVector { norm: n });
    }
    Ok(v.iter().map(|x| x / n).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentroidBank {
    centroids: Matrix,
    seen: Vec<bool>,
    m0: f64,
    m: f64,
}

impl CentroidBank {
    /// Empty bank: zero placeholder rows, nothing seen, `m = m0`.
    pub fn new(num_classes: usize, feature_dim: usize, m0: f64) -> Result<Self> {
        if num_classes < 2 {
            return Err(FcclError::invalid(format!(
                "centroid bank needs at least 2 classes, got {num_classes}"
            )));
        }
        if feature_dim < 1 {
            return Err(FcclError::invalid("feature dimension must be at least 1"));
        }
        if !(0.0..1.0).contains(&m0) {
            return Err(FcclError::invalid(format!("m0 must lie in [0, 1), got {m0}")));
        }
        Ok(CentroidBank {
            centroids: Matrix::zeros(num_classes, feature_dim),
            seen: vec![false; num_classes],
            m0,
            m: m0,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.centroids.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn m0(&self) -> f64 {
        self.m0
    }

    pub fn smoothing(&self) -> f64 {
        self.m
    }

    pub fn is_seen(&self, class: usize) -> bool {
        self.seen.get(class).copied().unwrap_or(false)
    }

    pub fn seen(&self) -> &[bool] {
        &self.seen
    }

    pub fn seen_count(&self) -> usize {
        self.seen.iter().filter(|s| **s).count()
    }

    /// Centroid of a seen class.
    pub fn centroid(&self, class: usize) -> Option<&[f64]> {
        if self.is_seen(class) {
            Some(self.centroids.row(class))
        } else {
            None
        }
    }

    /// Raw centroid matrix, including zero rows for unseen classes.
    pub fn centroids(&self) -> &Matrix {
        &self.centroids
    }

    /// Sets `m = m0 + (1 - m0) * epoch / total_epochs` and returns it.
    pub fn update_smoothing(&mut self, epoch: usize, total_epochs: usize) -> Result<f64> {
        self.m = smoothing_at(self.m0, epoch, total_epochs)?;
        Ok(self.m)
    }

    /// Overrides the smoothing coefficient; must stay within `[m0, 1]`.
    pub fn set_smoothing(&mut self, m: f64) -> Result<()> {
        if !(self.m0..=1.0).contains(&m) {
            return Err(FcclError::invalid(format!(
                "smoothing {m} outside [{}, 1]",
                self.m0
            )));
        }
        self.m = m;
        Ok(())
    }

    /// Blend per-class batch means into the bank. Rows with `mask[k] == false`
    /// are ignored. All rows are validated before any centroid changes.
    pub fn ema_update(&mut self, means: &Matrix, mask: &[bool]) -> Result<()> {
        let k = self.num_classes();
        if means.rows() != k || means.cols() != self.feature_dim() || mask.len() != k {
            return Err(FcclError::invalid(format!(
                "EMA input is {}x{} with {} mask entries, bank is {}x{}",
                means.rows(),
                means.cols(),
                mask.len(),
                k,
                self.feature_dim()
            )));
        }
        let mut updated = Vec::new();
        for class in (0..k).filter(|&c| mask[c]) {
            let mean = means.row(class);
            if !(norm(mean) >= MIN_NORM) {
                return Err(FcclError::DegenerateVector { norm: norm(mean) });
            }
            let row = if self.seen[class] {
                let m = self.m;
                let blended: Vec<f64> = self
                    .centroids
                    .row(class)
                    .iter()
                    .zip(mean)
                    .map(|(c, f)| m * c + (1.0 - m) * f)
                    .collect();
                l2_normalize(&blended)?
            } else {
                l2_normalize(mean)?
            };
            updated.push((class, row));
        }
        for (class, row) in updated {
            self.centroids.row_mut(class).copy_from_slice(&row);
            self.seen[class] = true;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{BANK_MAGIC}");
        let _ = writeln!(s, "{} {}", self.num_classes(), self.feature_dim());
        let _ = writeln!(s, "{}", self.m0);
        let _ = writeln!(s, "{}", self.m);
        let flags: Vec<&str> = self.seen.iter().map(|&b| if b { "1" } else { "0" }).collect();
        let _ = writeln!(s, "{}", flags.join(" "));
        for row in self.centroids.iter_rows() {
            let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{}", vals.join(" "));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i as u64 + 1, l));
        let mut next = |what: &str| {
            lines.next().ok_or_else(|| FcclError::Parse {
                line: 0,
                message: format!("bank file ended before {what}"),
            })
        };
        let (ln, magic) = next("header")?;
        if magic.trim() != BANK_MAGIC {
            return Err(parse_err(ln, format!("expected '{BANK_MAGIC}'")));
        }
        let (ln, dims) = next("dimensions")?;
        let dims: Vec<usize> = parse_tokens(ln, dims)?;
        if dims.len() != 2 {
            return Err(parse_err(ln, "expected '<K> <F>'"));
        }
        let (k, f) = (dims[0], dims[1]);
        let (ln, m0) = next("m0")?;
        let m0: f64 = parse_one(ln, m0)?;
        let (ln, m) = next("m")?;
        let m: f64 = parse_one(ln, m)?;
        let mut bank = CentroidBank::new(k, f, m0).map_err(|e| parse_err(ln, e.to_string()))?;
        if !(m0..=1.0).contains(&m) {
            return Err(parse_err(ln, format!("m = {m} outside [m0, 1]")));
        }
        bank.m = m;
        let (ln, flags) = next("seen flags")?;
        let flags: Vec<u8> = parse_tokens(ln, flags)?;
        if flags.len() != k || flags.iter().any(|&b| b > 1) {
            return Err(parse_err(ln, format!("expected {k} seen flags of 0 or 1")));
        }
        bank.seen = flags.iter().map(|&b| b == 1).collect();
        for class in 0..k {
            let (ln, row) = next("centroid rows")?;
            let row: Vec<f64> = parse_tokens(ln, row)?;
            if row.len() != f {
                return Err(parse_err(ln, format!("expected {f} centroid values")));
            }
            if bank.seen[class] && (norm(&row) - 1.0).abs() > 1e-9 {
                return Err(parse_err(ln, "seen centroid is not unit norm"));
            }
            bank.centroids.row_mut(class).copy_from_slice(&row);
        }
        Ok(bank)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| FcclError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| FcclError::io(path, e))?;
        Self::from_text(&text)
    }
}

/// `m0 + (1 - m0) * epoch / total_epochs`, exactly 1 at the last epoch.
pub fn smoothing_at(m0: f64, epoch: usize, total_epochs: usize) -> Result<f64> {
    if total_epochs == 0 {
        return Err(FcclError::invalid("total epochs must be positive"));
    }
    if epoch > total_epochs {
        return Err(FcclError::invalid(format!(
            "epoch {epoch} exceeds total epochs {total_epochs}"
        )));
    }
    if epoch == total_epochs {
        return Ok(1.0);
    }
    let m = m0 + (1.0 - m0) * (epoch as f64 / total_epochs as f64);
    Ok(m.clamp(m0, 1.0))
}

/// Per-class mean of feature rows. Classes absent from the batch are masked out
/// and left as zero rows.
pub fn batch_class_means(
    features: &Matrix,
    labels: &[usize],
    num_classes: usize,
) -> Result<(Matrix, Vec<bool>)> {
    if features.rows() != labels.len() {
        return Err(FcclError::invalid(format!(
            "{} feature rows but {} labels",
            features.rows(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(FcclError::invalid("empty batch"));
    }
    let mut sums = Matrix::zeros(num_classes, features.cols());
    let mut counts = vec![0usize; num_classes];
    for (row, &label) in features.iter_rows().zip(labels) {
        if label >= num_classes {
            return Err(FcclError::invalid(format!(
                "label {label} outside [0, {num_classes})"
            )));
        }
        counts[label] += 1;
        for (s, v) in sums.row_mut(label).iter_mut().zip(row) {
            *s += v;
        }
    }
    for (class, &count) in counts.iter().enumerate() {
        if count > 0 {
            let inv = count as f64;
            sums.row_mut(class).iter_mut().for_each(|s| *s /= inv);
        }
    }
    Ok((sums, counts.iter().map(|&c| c > 0).collect()))
}

fn parse_err(line: u64, message: impl Into<String>) -> FcclError {
    FcclError::Parse {
        line,
        message: message.into(),
    }
}

pub(crate) fn parse_one<T: std::str::FromStr>(line: u64, text: &str) -> Result<T> {
    text.trim()
        .parse()
        .map_err(|_| parse_err(line, format!("cannot parse '{}'", text.trim())))
}

pub(crate) fn parse_tokens<T: std::str::FromStr>(line: u64, text: &str) -> Result<Vec<T>> {
    text.split_whitespace().map(|t| parse_one(line, t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn init_bank_cases() {
        let bank = CentroidBank::new(3, 4, 0.999).unwrap();
        assert_eq!(bank.centroids().as_slice(), &[0.0; 12]);
        assert_eq!(bank.seen(), &[false, false, false]);
        assert_eq!(bank.smoothing(), 0.999);

        let b = CentroidBank::new(2, 1, 0.0).unwrap();
        assert_eq!(b.smoothing(), 0.0);

        assert!(matches!(
            CentroidBank::new(1, 4, 0.9),
            Err(FcclError::InvalidArgument(_))
        ));
        assert!(CentroidBank::new(2, 0, 0.9).is_err());
        assert!(CentroidBank::new(2, 2, 1.0).is_err());
    }

    #[test]
    fn normalize_cases() {
        assert!(close(&l2_normalize(&[3.0, 4.0]).unwrap(), &[0.6, 0.8], 1e-15));
        assert_eq!(l2_normalize(&[0.0, 0.0, 5.0]).unwrap(), vec![0.0, 0.0, 1.0]);
        assert!(matches!(
            l2_normalize(&[0.0, 0.0]),
            Err(FcclError::DegenerateVector { .. })
        ));
        assert!(l2_normalize(&[f64::NAN, 1.0]).is_err());
    }

    #[test]
    fn smoothing_schedule() {
        let mut bank = CentroidBank::new(2, 2, 0.999).unwrap();
        assert_eq!(bank.update_smoothing(0, 200).unwrap(), 0.999);
        assert_eq!(bank.update_smoothing(200, 200).unwrap(), 1.0);
        assert_eq!(bank.smoothing(), 1.0);
        let mut bank = CentroidBank::new(2, 2, 0.8).unwrap();
        assert!((bank.update_smoothing(100, 200).unwrap() - 0.9).abs() < 1e-15);
        assert!(bank.update_smoothing(201, 200).is_err());
        assert!(bank.update_smoothing(0, 0).is_err());
    }

    #[test]
    fn class_means_cases() {
        let f = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let (means, mask) = batch_class_means(&f, &[0, 0], 2).unwrap();
        assert_eq!(means.row(0), &[0.5, 0.5]);
        assert_eq!(mask, vec![true, false]);

        let f = Matrix::from_rows(&[[1.0, 0.0]]).unwrap();
        let (means, mask) = batch_class_means(&f, &[1], 2).unwrap();
        assert_eq!(means.row(1), &[1.0, 0.0]);
        assert_eq!(mask, vec![false, true]);

        let f = Matrix::from_rows(&[[0.6, 0.8], [0.6, 0.8]]).unwrap();
        let (means, _) = batch_class_means(&f, &[0, 0], 2).unwrap();
        assert_eq!(means.row(0), &[0.6, 0.8]);

        assert!(batch_class_means(&f, &[0, 2], 2).is_err());
    }

    fn seeded(m: f64, c: [f64; 2]) -> CentroidBank {
        let mut bank = CentroidBank::new(2, 2, 0.0).unwrap();
        let means = Matrix::from_rows(&[c, [0.0, 1.0]]).unwrap();
        bank.ema_update(&means, &[true, false]).unwrap();
        bank.m = m;
        bank
    }

    #[test]
    fn ema_cases() {
        let means = Matrix::from_rows(&[[0.0, 1.0], [0.0, 0.0]]).unwrap();

        let mut bank = seeded(1.0, [0.6, 0.8]);
        bank.ema_update(&means, &[true, false]).unwrap();
        assert!(close(bank.centroid(0).unwrap(), &[0.6, 0.8], 1e-12));

        let mut bank = seeded(0.0, [1.0, 0.0]);
        bank.ema_update(&means, &[true, false]).unwrap();
        assert_eq!(bank.centroid(0).unwrap(), &[0.0, 1.0]);

        let mut bank = seeded(0.5, [1.0, 0.0]);
        bank.ema_update(&means, &[true, false]).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!(close(bank.centroid(0).unwrap(), &[h, h], 1e-12));
        assert!(!bank.is_seen(1));
    }

    #[test]
    fn ema_first_observation_normalizes() {
        let mut bank = CentroidBank::new(2, 2, 0.999).unwrap();
        let means = Matrix::from_rows(&[[0.5, 0.5], [0.0, 0.0]]).unwrap();
        bank.ema_update(&means, &[true, false]).unwrap();
        let h = std::f64::consts::FRAC_1_SQRT_2;
        assert!(close(bank.centroid(0).unwrap(), &[h, h], 1e-15));
        assert_eq!(bank.centroid(1), None);
    }

    #[test]
    fn ema_rejects_zero_mean_without_partial_update() {
        let mut bank = CentroidBank::new(2, 2, 0.5).unwrap();
        let means = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]).unwrap();
        let err = bank.ema_update(&means, &[true, true]).unwrap_err();
        assert!(matches!(err, FcclError::DegenerateVector { .. }));
        assert_eq!(bank.seen_count(), 0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut bank = CentroidBank::new(3, 2, 0.999).unwrap();
        let means = Matrix::from_rows(&[[0.3, 0.1], [0.0, 0.0], [-1.0, 0.7]]).unwrap();
        bank.ema_update(&means, &[true, false, true]).unwrap();
        bank.update_smoothing(3, 7).unwrap();
        let back = CentroidBank::from_text(&bank.to_text()).unwrap();
        assert_eq!(back, bank);
        assert!(CentroidBank::from_text("fccl-bank 1\n3 2\n").is_err());
        assert!(CentroidBank::from_text("nope").is_err());
    }
}
