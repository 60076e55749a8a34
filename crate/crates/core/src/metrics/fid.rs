use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{arg_err, Error, Result};

/// Diagonal regularizer added to both covariances.
pub const FID_EPS: f64 = 1e-6;

fn moments(features: &[Vec<f64>], dim: usize) -> (DVector<f64>, DMatrix<f64>) {
    let n = features.len();
    let x = DMatrix::from_fn(n, dim, |i, j| features[i][j]);
    let mean = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, dim, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n as f64 - 1.0);
    (mean, cov + DMatrix::identity(dim, dim) * FID_EPS)
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let d = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussian fits of two feature sets (rows are samples).
///
/// `Tr((Σ₁Σ₂)^{1/2})` is taken as the sum of square roots of the (clamped)
/// eigenvalues of the symmetric matrix `Σ₁^{1/2} Σ₂ Σ₁^{1/2}`.
pub fn fid(real: &[Vec<f64>], generated: &[Vec<f64>]) -> Result<f64> {
    if real.len() < 2 || generated.len() < 2 {
        return Err(arg_err!("FID needs at least two samples per set"));
    }
    let dim = real[0].len();
    if dim == 0 || real.iter().chain(generated).any(|r| r.len() != dim) {
        return Err(arg_err!("feature dimensions differ or are zero"));
    }
    let (m1, s1) = moments(real, dim);
    let (m2, s2) = moments(generated, dim);
    let r1 = sym_sqrt(&s1);
    let mid = &r1 * &s2 * &r1;
    let mid = (&mid + mid.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(mid)
        .eigenvalues
        .iter()
        .map(|v| v.max(0.0).sqrt())
        .sum();
    let value = (m1 - m2).norm_squared() + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    if !value.is_finite() {
        return Err(Error::Numeric("FID is not finite".into()));
    }
    Ok(value.max(0.0))
}
