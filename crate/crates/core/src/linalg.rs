//! Dense complex linear algebra helpers.
//!
//! Complex products are routed through real `f64` GEMM (four real products per
//! complex product) because nalgebra only dispatches the blocked kernel for
//! real scalars.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CVector = DVector<C64>;
pub type CMatrix = DMatrix<C64>;

pub(crate) fn split(m: &CMatrix) -> (DMatrix<f64>, DMatrix<f64>) {
    (m.map(|c| c.re), m.map(|c| c.im))
}

pub(crate) fn join(re: &DMatrix<f64>, im: &DMatrix<f64>) -> CMatrix {
    CMatrix::from_fn(re.nrows(), re.ncols(), |i, j| C64::new(re[(i, j)], im[(i, j)]))
}

/// `a * b`.
pub fn mul(a: &CMatrix, b: &CMatrix) -> CMatrix {
    assert_eq!(a.ncols(), b.nrows(), "inner dimensions differ");
    let (ar, ai) = split(a);
    let (br, bi) = split(b);
    let re = &ar * &br - &ai * &bi;
    let im = &ar * &bi + &ai * &br;
    join(&re, &im)
}

/// `a * a^H`.
pub fn gram_outer(a: &CMatrix) -> CMatrix {
    let (ar, ai) = split(a);
    let re = &ar * ar.transpose() + &ai * ai.transpose();
    let im = &ai * ar.transpose() - &ar * ai.transpose();
    let mut out = join(&re, &im);
    hermitize(&mut out);
    out
}

/// Replaces `m` with `(m + m^H) / 2`.
pub fn hermitize(m: &mut CMatrix) {
    let n = m.nrows();
    for i in 0..n {
        m[(i, i)].im = 0.0;
        for j in (i + 1)..n {
            let avg = (m[(i, j)] + m[(j, i)].conj()) * 0.5;
            m[(i, j)] = avg;
            m[(j, i)] = avg.conj();
        }
    }
}

/// `x^H y`.
pub fn dot(x: &CVector, y: &CVector) -> C64 {
    x.iter().zip(y.iter()).map(|(a, b)| a.conj() * b).sum()
}

pub fn norm_sqr(x: &CVector) -> f64 {
    x.iter().map(|c| c.norm_sqr()).sum()
}

pub fn frobenius_sqr(m: &CMatrix) -> f64 {
    m.iter().map(|c| c.norm_sqr()).sum()
}

/// `‖a − b‖_F / ‖b‖_F`.
pub fn frobenius_rel_error(a: &CMatrix, b: &CMatrix) -> f64 {
    frobenius_sqr(&(a - b)).sqrt() / frobenius_sqr(b).sqrt()
}

pub fn trace_re(m: &CMatrix) -> f64 {
    (0..m.nrows()).map(|i| m[(i, i)].re).sum()
}

/// Eigen-decomposition of a Hermitian matrix, eigenvalues unsorted.
pub fn hermitian_eigen(m: &CMatrix) -> (Vec<f64>, CMatrix) {
    let eig = SymmetricEigen::new(m.clone());
    (eig.eigenvalues.iter().copied().collect(), eig.eigenvectors)
}

fn spectral_map(values: &[f64], vectors: &CMatrix, f: impl Fn(f64) -> f64) -> CMatrix {
    let mut scaled = vectors.clone();
    for (j, &lambda) in values.iter().enumerate() {
        let s = f(lambda);
        scaled.column_mut(j).scale_mut(s);
    }
    let mut out = mul(&scaled, &vectors.adjoint());
    hermitize(&mut out);
    out
}

/// Principal square root of a Hermitian PSD matrix. Slightly negative
/// eigenvalues from rounding are clamped to zero.
pub fn psd_sqrt(m: &CMatrix) -> CMatrix {
    let (values, vectors) = hermitian_eigen(m);
    spectral_map(&values, &vectors, |l| l.max(0.0).sqrt())
}

/// Inverse principal square root `m^{-1/2}` of a Hermitian positive definite matrix.
pub fn inv_sqrt(m: &CMatrix) -> Result<CMatrix> {
    let (values, vectors) = hermitian_eigen(m);
    let max = values.iter().cloned().fold(0.0_f64, f64::max);
    let min = values.iter().cloned().fold(f64::INFINITY, f64::min);
    if !(min > max * 1e-14) || !(max > 0.0) {
        return Err(Error::NotPositiveDefinite(format!(
            "eigenvalue range [{min:e}, {max:e}]"
        )));
    }
    Ok(spectral_map(&values, &vectors, |l| 1.0 / l.sqrt()))
}

/// Inverse of a Hermitian positive definite matrix via Cholesky.
pub fn hpd_inverse(m: &CMatrix) -> Result<CMatrix> {
    let chol = Cholesky::new(m.clone())
        .ok_or_else(|| Error::NotPositiveDefinite("Cholesky factorization failed".into()))?;
    let mut inv = chol.inverse();
    hermitize(&mut inv);
    Ok(inv)
}

/// `Re(x^H m y)`.
pub fn quad_form_re(x: &CVector, m: &CMatrix, y: &CVector) -> f64 {
    dot(x, &(m * y)).re
}

/// Centres each row: subtracts the mean column from every column.
pub fn mean_center(m: &mut CMatrix) {
    let k = m.ncols() as f64;
    for mut row in m.row_iter_mut() {
        let mean = row.iter().sum::<C64>() / k;
        for c in row.iter_mut() {
            *c -= mean;
        }
    }
}

/// Mean of the columns of `m`.
pub fn mean_column(m: &CMatrix) -> CVector {
    let k = m.ncols() as f64;
    CVector::from_iterator(m.nrows(), m.row_iter().map(|r| r.iter().sum::<C64>() / k))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_matrix(r: usize, c: usize, seed: u64) -> CMatrix {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        CMatrix::from_fn(r, c, |_, _| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5))
    }

    #[test]
    fn split_gemm_matches_naive_product() {
        let a = random_matrix(7, 5, 1);
        let b = random_matrix(5, 9, 2);
        let fast = mul(&a, &b);
        let naive = &a * &b;
        assert!(frobenius_rel_error(&fast, &naive) < 1e-14);
        let g = gram_outer(&a);
        assert!(frobenius_rel_error(&g, &(&a * a.adjoint())) < 1e-14);
    }

    #[test]
    fn inverse_square_root_whitens() {
        let a = random_matrix(6, 20, 3);
        let m = gram_outer(&a);
        let w = inv_sqrt(&m).unwrap();
        let eye = mul(&mul(&w, &m), &w);
        assert!(frobenius_rel_error(&eye, &CMatrix::identity(6, 6)) < 1e-10);
        let s = psd_sqrt(&m);
        assert!(frobenius_rel_error(&mul(&s, &s), &m) < 1e-12);
    }

    #[test]
    fn singular_matrix_is_rejected() {
        let a = random_matrix(6, 2, 4);
        assert!(inv_sqrt(&gram_outer(&a)).is_err());
        assert!(inv_sqrt(&CMatrix::zeros(3, 3)).is_err());
    }

    #[test]
    fn centering_zeroes_the_mean_column() {
        let mut a = random_matrix(4, 11, 5);
        mean_center(&mut a);
        assert!(mean_column(&a).norm() < 1e-15);
    }
}
