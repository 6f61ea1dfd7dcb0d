use fccl::diagnostics::{covariance, symmetric_eigen, PcaFit};
use fccl::linalg::Matrix;
use fccl::FcclError;
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_data(rng: &mut ChaCha8Rng, n: usize, f: usize) -> Matrix {
    // anisotropic so the leading eigenvalues are well separated
    let data = (0..n * f)
        .map(|i| rng.random_range(-1.0..1.0) * (1.0 + (i % f) as f64 * 1.5))
        .collect();
    Matrix::from_vec(n, f, data).unwrap()
}

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

#[test]
fn eigenvalues_match_nalgebra() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for trial in 0..40 {
        let f = rng.random_range(2..=10);
        let x = random_data(&mut rng, 30, f);
        let (_, cov) = covariance(&x);
        let (values, vectors) = symmetric_eigen(&cov).unwrap();
        let mut want: Vec<f64> = nalgebra::SymmetricEigen::new(to_na(&cov)).eigenvalues.iter().copied().collect();
        want.sort_by(|a, b| b.total_cmp(a));
        for (g, w) in values.iter().zip(&want) {
            assert!((g - w).abs() < 1e-9, "trial {trial}: {values:?} vs {want:?}");
        }
        // A v = lambda v for every returned pair
        for (i, lambda) in values.iter().enumerate() {
            let v = vectors.row(i);
            for r in 0..f {
                let av: f64 = (0..f).map(|c| cov.get(r, c) * v[c]).sum();
                assert!((av - lambda * v[r]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn components_match_nalgebra_up_to_sign() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..20 {
        let f = rng.random_range(2..=8);
        let x = random_data(&mut rng, 50, f);
        let fit = PcaFit::fit(&x).unwrap();
        let (_, cov) = covariance(&x);
        let eig = nalgebra::SymmetricEigen::new(to_na(&cov));
        let mut order: Vec<usize> = (0..f).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for (i, comp) in fit.components.iter().enumerate() {
            let col = eig.eigenvectors.column(order[i]);
            let dot: f64 = comp.iter().zip(col.iter()).map(|(a, b)| a * b).sum();
            assert!((dot.abs() - 1.0).abs() < 1e-8);
            let pivot = comp.iter().find(|v| v.abs() > 1e-12).unwrap();
            assert!(*pivot > 0.0);
        }
    }
}

#[test]
fn reconstruction_error_is_discarded_variance() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = random_data(&mut rng, 80, 6);
    let fit = PcaFit::fit(&x).unwrap();
    let p = fit.project(&x).unwrap();
    let mut err = 0.0;
    for r in 0..x.rows() {
        for c in 0..6 {
            let rec = fit.mean[c] + p.get(r, 0) * fit.components[0][c] + p.get(r, 1) * fit.components[1][c];
            err += (x.get(r, c) - rec).powi(2);
        }
    }
    err /= x.rows() as f64;
    let discarded = fit.total_variance - fit.eigenvalues[0] - fit.eigenvalues[1];
    assert!((err - discarded).abs() < 1e-9, "{err} vs {discarded}");
}

#[test]
fn constant_rows_are_rank_zero() {
    let x = Matrix::from_rows(&[[1.0, 2.0, 3.0]; 5]).unwrap();
    assert!(matches!(PcaFit::fit(&x), Err(FcclError::UndefinedProjection(_))));
}
