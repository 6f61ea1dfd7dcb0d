//! Feature-space diagnostics: class-vs-centroid cosine heatmap, 2-D PCA and spread.
//!
//! Covariances use the `N` denominator throughout.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::centroid_bank::CentroidBank;
use crate::data::Domain;
use crate::error::{FcclError, Result};
use crate::linalg::{dot, Matrix};

/// `cells[i][j]`: mean cosine similarity between class-`i` features and the
/// centroid of class `j`. `None` where class `i` has no samples or centroid
/// `j` is unseen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeatmapMatrix {
    pub cells: Vec<Vec<Option<f64>>>,
    pub class_counts: Vec<usize>,
    pub domain: Domain,
}

impl HeatmapMatrix {
    pub fn num_classes(&self) -> usize {
        self.cells.len()
    }

    pub fn missing_rows(&self) -> Vec<usize> {
        (0..self.num_classes()).filter(|&i| self.class_counts[i] == 0).collect()
    }

    pub fn mean_diagonal(&self) -> Option<f64> {
        mean((0..self.num_classes()).filter_map(|i| self.cells[i][i]))
    }

    pub fn mean_off_diagonal(&self) -> Option<f64> {
        let k = self.num_classes();
        mean((0..k).flat_map(|i| (0..k).filter(move |&j| j != i).map(move |j| (i, j)))
            .filter_map(|(i, j)| self.cells[i][j]))
    }

    /// Header `class,c0,...,c{K-1}`; one row per sample class, empty cells for missing.
    pub fn to_csv(&self) -> String {
        let k = self.num_classes();
        let mut s = String::from("class");
        for j in 0..k {
            let _ = write!(s, ",c{j}");
        }
        s.push('\n');
        for (i, row) in self.cells.iter().enumerate() {
            let _ = write!(s, "{i}");
            for cell in row {
                match cell {
                    Some(v) => {
                        let _ = write!(s, ",{v}");
                    }
                    None => s.push(','),
                }
            }
            s.push('\n');
        }
        s
    }
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Mean dot product of each class's unit features with every centroid.
pub fn class_centroid_heatmap(
    features: &Matrix,
    labels: &[usize],
    bank: &CentroidBank,
    domain: Domain,
) -> Result<HeatmapMatrix> {
    let k = bank.num_classes();
    if features.rows() != labels.len() {
        return Err(FcclError::invalid(format!(
            "{} feature rows but {} labels",
            features.rows(),
            labels.len()
        )));
    }
    if features.cols() != bank.feature_dim() {
        return Err(FcclError::invalid(format!(
            "features have {} dims, bank has {}",
            features.cols(),
            bank.feature_dim()
        )));
    }
    let mut sums = vec![vec![0.0; k]; k];
    let mut counts = vec![0usize; k];
    for (row, &label) in features.iter_rows().zip(labels) {
        if label >= k {
            return Err(FcclError::invalid(format!("label {label} outside [0, {k})")));
        }
        if !bank.is_seen(label) {
            return Err(FcclError::State(format!("class {label} has no centroid")));
        }
        counts[label] += 1;
        for (j, s) in sums[label].iter_mut().enumerate() {
            if let Some(c) = bank.centroid(j) {
                *s += dot(row, c);
            }
        }
    }
    let cells = (0..k)
        .map(|i| {
            (0..k)
                .map(|j| (counts[i] > 0 && bank.is_seen(j)).then(|| sums[i][j] / counts[i] as f64))
                .collect()
        })
        .collect();
    Ok(HeatmapMatrix {
        cells,
        class_counts: counts,
        domain,
    })
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations. Returns
/// eigenvalues in descending order and the matching eigenvectors as rows.
pub fn symmetric_eigen(a: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let n = a.rows();
    if a.cols() != n {
        return Err(FcclError::invalid("eigendecomposition needs a square matrix"));
    }
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let scale: f64 = m.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|p| (0..n).filter(move |&q| q != p).map(move |q| (p, q)))
            .map(|(p, q)| m.get(p, q).powi(2))
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (m.get(q, q) - m.get(p, p)) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (mkp, mkq) = (m.get(k, p), m.get(k, q));
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let (mpk, mqk) = (m.get(p, k), m.get(q, k));
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let (vkp, vkq) = (v.get(k, p), v.get(k, q));
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(j, j).total_cmp(&m.get(i, i)));
    let values = order.iter().map(|&i| m.get(i, i)).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (r, &i) in order.iter().enumerate() {
        for k in 0..n {
            vectors.set(r, k, v.get(k, i));
        }
    }
    Ok((values, vectors))
}

/// Column means and the `N`-denominator covariance.
pub fn covariance(features: &Matrix) -> (Vec<f64>, Matrix) {
    let (n, f) = (features.rows(), features.cols());
    let mut mean = vec![0.0; f];
    for row in features.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = Matrix::zeros(f, f);
    for row in features.iter_rows() {
        let c: Vec<f64> = row.iter().zip(&mean).map(|(v, m)| v - m).collect();
        for i in 0..f {
            for j in i..f {
                let v = cov.get(i, j) + c[i] * c[j];
                cov.set(i, j, v);
            }
        }
    }
    for i in 0..f {
        for j in i..f {
            let v = cov.get(i, j) / n as f64;
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }
    (mean, cov)
}

/// Top-two principal axes of a feature set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaFit {
    pub mean: Vec<f64>,
    /// Two unit loading vectors, first nonzero entry positive.
    pub components: [Vec<f64>; 2],
    pub eigenvalues: [f64; 2],
    pub total_variance: f64,
    pub explained: [f64; 2],
}

impl PcaFit {
    pub fn fit(features: &Matrix) -> Result<Self> {
        if features.rows() < 3 || features.cols() < 2 {
            return Err(FcclError::invalid(format!(
                "PCA needs at least 3 rows and 2 columns, got {}x{}",
                features.rows(),
                features.cols()
            )));
        }
        let (mean, cov) = covariance(features);
        let total: f64 = (0..cov.rows()).map(|i| cov.get(i, i)).sum();
        let scale = mean.iter().map(|m| m * m).sum::<f64>().sqrt().max(1.0);
        if !(total > 1e-24 * scale * scale) {
            return Err(FcclError::UndefinedProjection(
                "all rows are identical (rank 0)".into(),
            ));
        }
        let (values, vectors) = symmetric_eigen(&cov)?;
        let mut components = [vectors.row(0).to_vec(), vectors.row(1).to_vec()];
        for c in &mut components {
            let pivot = c.iter().copied().find(|v| v.abs() > 1e-12).unwrap_or(0.0);
            if pivot < 0.0 {
                c.iter_mut().for_each(|v| *v = -*v);
            }
        }
        let eigenvalues = [values[0].max(0.0), values[1].max(0.0)];
        Ok(PcaFit {
            mean,
            components,
            eigenvalues,
            total_variance: total,
            explained: [eigenvalues[0] / total, eigenvalues[1] / total],
        })
    }

    /// `N x 2` coordinates of `features` in this basis.
    pub fn project(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.mean.len() {
            return Err(FcclError::invalid(format!(
                "features have {} dims, PCA basis has {}",
                features.cols(),
                self.mean.len()
            )));
        }
        let mut out = Matrix::zeros(features.rows(), 2);
        for (r, row) in features.iter_rows().enumerate() {
            let c: Vec<f64> = row.iter().zip(&self.mean).map(|(v, m)| v - m).collect();
            out.set(r, 0, dot(&c, &self.components[0]));
            out.set(r, 1, dot(&c, &self.components[1]));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaProjection {
    pub coords: Matrix,
    pub explained: [f64; 2],
    pub labels: Vec<usize>,
    pub domains: Vec<Domain>,
}

impl PcaProjection {
    /// Header `pc1,pc2,label,domain`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("pc1,pc2,label,domain\n");
        for (r, row) in self.coords.iter_rows().enumerate() {
            let label = self.labels.get(r).map_or(String::new(), |l| l.to_string());
            let domain = self.domains.get(r).map_or(String::new(), |d| d.to_string());
            let _ = writeln!(s, "{},{},{label},{domain}", row[0], row[1]);
        }
        s
    }
}

/// Fits PCA on `features` and projects them onto the first two components.
pub fn pca_2d(features: &Matrix) -> Result<PcaProjection> {
    let fit = PcaFit::fit(features)?;
    Ok(PcaProjection {
        coords: fit.project(features)?,
        explained: fit.explained,
        labels: Vec::new(),
        domains: Vec::new(),
    })
}

/// Trace of the covariance matrix.
pub fn feature_spread(features: &Matrix) -> Result<f64> {
    if features.rows() < 2 {
        return Err(FcclError::invalid("spread needs at least 2 rows"));
    }
    let (_, cov) = covariance(features);
    Ok((0..cov.rows()).map(|i| cov.get(i, i)).sum())
}
