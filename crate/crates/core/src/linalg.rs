//! Small dense linear-algebra helpers built on `nalgebra`.
//!
//! Covariance-like inputs are symmetrized before eigendecomposition; all
//! square roots returned here are principal (symmetric) roots.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative asymmetry tolerated before a matrix is rejected as non-symmetric.
pub const SYMMETRY_TOL: f64 = 1e-9;

/// Eigenvalues above `-PSD_TOL * max(1, scale)` are clamped to zero.
pub const PSD_TOL: f64 = 1e-12;

pub fn require_square(m: &DMatrix<f64>, name: &str) -> Result<usize> {
    if m.nrows() != m.ncols() {
        return Err(Error::dims(
            name,
            (m.nrows(), m.nrows()),
            (m.nrows(), m.ncols()),
        ));
    }
    Ok(m.nrows())
}

pub fn require_shape(m: &DMatrix<f64>, rows: usize, cols: usize, name: &str) -> Result<()> {
    if m.shape() != (rows, cols) {
        return Err(Error::dims(name, (rows, cols), m.shape()));
    }
    Ok(())
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()))
}

fn scale_of(m: &DMatrix<f64>) -> f64 {
    max_abs(m).max(1.0)
}

/// Checks symmetry and returns the exactly symmetrized matrix.
pub fn symmetrized(m: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    require_square(m, name)?;
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            what: name.to_string(),
        });
    }
    let asym = max_abs(&(m - m.transpose()));
    if asym > SYMMETRY_TOL * scale_of(m) {
        return Err(Error::NotSymmetric {
            name: name.to_string(),
            asymmetry: asym,
        });
    }
    Ok((m + m.transpose()) * 0.5)
}

fn eigen(m: &DMatrix<f64>, name: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = symmetrized(m, name)?;
    Ok(SymmetricEigen::new(sym))
}

fn rebuild(
    eig: &SymmetricEigen<f64, nalgebra::Dyn>,
    f: impl Fn(f64) -> f64,
) -> DMatrix<f64> {
    let u = &eig.eigenvectors;
    let mut scaled = u.clone();
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        let s = f(*lambda);
        scaled.column_mut(j).scale_mut(s);
    }
    let out = scaled * u.transpose();
    (&out + out.transpose()) * 0.5
}

/// Principal square root of a symmetric positive semidefinite matrix.
///
/// Slightly negative eigenvalues (round-off) are clamped to zero; anything
/// below `-PSD_TOL * scale` is an error.
pub fn psd_sqrt(m: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    let eig = eigen(m, name)?;
    let min = eig.eigenvalues.min();
    if min < -PSD_TOL * scale_of(m) {
        return Err(Error::NotPositiveSemidefinite {
            name: name.to_string(),
            min_eigenvalue: min,
        });
    }
    Ok(rebuild(&eig, |l| l.max(0.0).sqrt()))
}

/// Principal inverse square root of a symmetric positive definite matrix.
pub fn spd_inv_sqrt(m: &DMatrix<f64>, name: &str) -> Result<DMatrix<f64>> {
    let eig = eigen(m, name)?;
    let min = eig.eigenvalues.min();
    if min.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::NotPositiveDefinite {
            name: name.to_string(),
            min_eigenvalue: min,
        });
    }
    Ok(rebuild(&eig, |l| 1.0 / l.sqrt()))
}

pub fn require_spd(m: &DMatrix<f64>, name: &str) -> Result<()> {
    let eig = eigen(m, name)?;
    let min = eig.eigenvalues.min();
    if min <= 0.0 {
        return Err(Error::NotPositiveDefinite {
            name: name.to_string(),
            min_eigenvalue: min,
        });
    }
    Ok(())
}

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.singular_values().max()
}

/// `log|M|` for a symmetric matrix, with eigenvalues floored at `1e-300`.
///
/// The flag is true when any eigenvalue had to be floored.
pub fn log_det_floored(m: &DMatrix<f64>) -> (f64, bool) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut clamped = false;
    let mut acc = 0.0;
    for &l in eig.eigenvalues.iter() {
        if l <= 1e-300 {
            clamped = true;
            acc += 1e-300_f64.ln();
        } else {
            acc += l.ln();
        }
    }
    (acc, clamped)
}

pub fn try_inverse(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let inv = m.clone().try_inverse().ok_or_else(|| Error::Singular {
        what: what.to_string(),
    })?;
    if !inv.iter().all(|v| v.is_finite()) {
        return Err(Error::Singular {
            what: what.to_string(),
        });
    }
    Ok(inv)
}

/// Block-diagonal `diag(a, b)`.
pub fn block_diag(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ra, ca) = a.shape();
    let (rb, cb) = b.shape();
    let mut out = DMatrix::zeros(ra + rb, ca + cb);
    out.view_mut((0, 0), (ra, ca)).copy_from(a);
    out.view_mut((ra, ca), (rb, cb)).copy_from(b);
    out
}
