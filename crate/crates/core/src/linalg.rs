//! Dense linear-algebra helpers layered over `nalgebra`.
//!
//! nalgebra covers SVD, symmetric eigendecomposition and the complex Schur
//! form; general (non-symmetric) eigenvectors are recovered here from the
//! Schur factors by triangular back-substitution.

use nalgebra::{Complex, DMatrix, DVector, Schur, SymmetricEigen};

use crate::error::{Error, Result};

pub type C64 = Complex<f64>;

/// Truncated-SVD pseudoinverse together with its rank diagnostics.
#[derive(Debug, Clone)]
pub struct PseudoInverse {
    pub matrix: DMatrix<f64>,
    pub rank: usize,
    pub singular_values: Vec<f64>,
    /// Singular values below the cutoff, i.e. the directions discarded.
    pub truncated: Vec<f64>,
}

/// Pseudoinverse discarding singular values `σ < rtol · σ_max`.
pub fn pinv(a: &DMatrix<f64>, rtol: f64) -> PseudoInverse {
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("requested U");
    let v_t = svd.v_t.as_ref().expect("requested V^T");
    let sigma = &svd.singular_values;
    let smax = sigma.iter().cloned().fold(0.0_f64, f64::max);
    let cutoff = rtol * smax;

    let mut matrix = DMatrix::zeros(a.ncols(), a.nrows());
    let mut rank = 0;
    let mut truncated = Vec::new();
    for (i, &s) in sigma.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            rank += 1;
            // V Σ⁺ Uᵀ accumulated one rank-one term at a time
            let vi = v_t.row(i).transpose();
            let ui = u.column(i);
            matrix += (vi * ui.transpose()) / s;
        } else {
            truncated.push(s);
        }
    }
    let mut singular_values: Vec<f64> = sigma.iter().cloned().collect();
    singular_values.sort_by(|a, b| b.total_cmp(a));
    truncated.sort_by(|a, b| b.total_cmp(a));
    PseudoInverse {
        matrix,
        rank,
        singular_values,
        truncated,
    }
}

pub fn spectral_norm(a: &DMatrix<f64>) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.clone()
        .singular_values()
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Largest eigenvalue of a symmetric matrix and a unit eigenvector for it.
pub fn sym_max_eig(s: &DMatrix<f64>) -> (f64, DVector<f64>) {
    let eig = SymmetricEigen::new(s.clone());
    let (idx, &val) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("non-empty matrix");
    (val, eig.eigenvectors.column(idx).into_owned())
}

pub fn sym_eigenvalues(s: &DMatrix<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = SymmetricEigen::new(s.clone())
        .eigenvalues
        .iter()
        .cloned()
        .collect();
    v.sort_by(f64::total_cmp);
    v
}

/// Eigenvalues and right eigenvectors of a real square matrix.
///
/// Eigenvectors are returned as columns with unit 2-norm. No ordering or
/// phase convention is applied here.
pub fn eig(a: &DMatrix<f64>) -> Result<(Vec<C64>, DMatrix<C64>)> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::DimensionMismatch {
            what: "eigendecomposition (square matrix)",
            expected: n,
            found: a.ncols(),
        });
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidArgument(
            "eigendecomposition of a matrix with non-finite entries".into(),
        ));
    }
    if n == 0 {
        return Ok((Vec::new(), DMatrix::zeros(0, 0)));
    }
    let ac = a.map(|x| C64::new(x, 0.0));
    let schur = Schur::try_new(ac, f64::EPSILON, 0)
        .ok_or_else(|| Error::InvalidArgument("Schur iteration did not converge".into()))?;
    let (q, t) = schur.unpack();
    let values: Vec<C64> = (0..n).map(|i| t[(i, i)]).collect();

    let tnorm = t.iter().map(|z| z.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let small = f64::EPSILON * tnorm;
    let mut y = DMatrix::<C64>::zeros(n, n);
    for k in 0..n {
        let lam = values[k];
        y[(k, k)] = C64::new(1.0, 0.0);
        for j in (0..k).rev() {
            let mut s = C64::new(0.0, 0.0);
            for l in (j + 1)..=k {
                s += t[(j, l)] * y[(l, k)];
            }
            let mut d = t[(j, j)] - lam;
            if d.norm() < small {
                d = C64::new(small, 0.0);
            }
            y[(j, k)] = -s / d;
        }
    }
    let mut vecs = q * y;
    for k in 0..n {
        let nrm = vecs.column(k).norm();
        if nrm > 0.0 {
            vecs.column_mut(k).unscale_mut(nrm);
        }
    }
    Ok((values, vecs))
}

/// 2-norm condition number of a complex matrix.
pub fn cond_complex(v: &DMatrix<C64>) -> f64 {
    let s = v.clone().singular_values();
    let max = s.iter().cloned().fold(0.0, f64::max);
    let min = s.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub fn quad_form(m: &DMatrix<f64>, z: &DVector<f64>) -> f64 {
    z.dot(&(m * z))
}
