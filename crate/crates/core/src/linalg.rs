//! Small dense linear-algebra helpers: symmetric eigensolver, numerical rank,
//! null spaces.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};

/// Relative singular-value cutoff used for every rank decision.
pub const RANK_TOL: f64 = 1e-9;

/// Largest matrix accepted by [`jacobi_eigen`].
pub const MAX_JACOBI_DIM: usize = 100;

/// Spectrum of a symmetric matrix, eigenvalues ascending.
#[derive(Clone, Debug, Serialize)]
pub struct SymSpectrum {
    pub eigenvalues: Vec<f64>,
    pub min_eig: f64,
    /// Unit eigenvectors as columns, in eigenvalue order.
    #[serde(skip)]
    pub eigenvectors: DMatrix<f64>,
}

impl SymSpectrum {
    pub fn max_eig(&self) -> f64 {
        *self.eigenvalues.last().unwrap_or(&f64::NAN)
    }

    /// Smallest eigenvalue magnitude.
    pub fn min_abs(&self) -> f64 {
        self.eigenvalues.iter().fold(f64::INFINITY, |m, v| m.min(v.abs()))
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
pub fn jacobi_eigen(a: &DMatrix<f64>) -> Result<SymSpectrum> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(Error::config("eigensolver needs a square matrix"));
    }
    if n > MAX_JACOBI_DIM {
        return Err(Error::Resource {
            what: format!("Jacobi eigensolver on a {n}×{n} matrix"),
            cap: MAX_JACOBI_DIM,
        });
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(Error::numeric("non-finite entry in symmetric matrix"));
    }
    let mut m = (a + a.transpose()) * 0.5;
    let mut v = DMatrix::<f64>::identity(n, n);
    let scale = m.iter().fold(0.0f64, |s, x| s.max(x.abs())).max(f64::MIN_POSITIVE);

    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += m[(p, q)] * m[(p, q)];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].total_cmp(&m[(j, j)]));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| m[(i, i)]).collect();
    let eigenvectors = DMatrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymSpectrum {
        min_eig: *eigenvalues.first().unwrap_or(&f64::NAN),
        eigenvalues,
        eigenvectors,
    })
}

pub fn spectrum(a: &DMatrix<f64>) -> Result<SymSpectrum> {
    jacobi_eigen(a)
}

/// Numerical rank with singular values cut at `RANK_TOL` relative to the largest.
pub fn rank(a: &DMatrix<f64>) -> usize {
    if a.is_empty() {
        return 0;
    }
    let sv = a.clone().svd(false, false).singular_values;
    let max = sv.iter().fold(0.0f64, |m, &s| m.max(s));
    if max == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > RANK_TOL * max).count()
}

/// Orthonormal basis (columns) of the null space of `a`.
pub fn null_space(a: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.ncols();
    // pad to at least n rows so the thin SVD exposes all right singular vectors
    let rows = a.nrows().max(n);
    let mut padded = DMatrix::zeros(rows, n);
    padded.view_mut((0, 0), (a.nrows(), n)).copy_from(a);
    let svd = padded.svd(false, true);
    let vt = svd.v_t.expect("requested V^T");
    let max = svd.singular_values.iter().fold(0.0f64, |m, &s| m.max(s));
    let cols: Vec<usize> = (0..svd.singular_values.len())
        .filter(|&i| max == 0.0 || svd.singular_values[i] <= RANK_TOL * max)
        .collect();
    DMatrix::from_fn(n, cols.len(), |r, c| vt[(cols[c], r)])
}

pub fn frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::PortableRng;

    fn random_symmetric(n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = PortableRng::new(seed);
        let a = DMatrix::from_fn(n, n, |_, _| rng.normal());
        (&a + a.transpose()) * 0.5
    }

    #[test]
    fn reconstructs_matrix() {
        let a = random_symmetric(12, 5);
        let s = jacobi_eigen(&a).unwrap();
        let d = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(s.eigenvalues.clone()));
        let rec = &s.eigenvectors * d * s.eigenvectors.transpose();
        assert!((rec - a).abs().max() < 1e-12);
        assert!(s.eigenvalues.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn rejects_oversized() {
        let a = DMatrix::<f64>::zeros(101, 101);
        assert!(matches!(jacobi_eigen(&a), Err(Error::Resource { .. })));
    }

    #[test]
    fn rank_and_null_space() {
        let a = DMatrix::from_row_slice(3, 3, &[1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 0.0, 1.0, 1.0]);
        assert_eq!(rank(&a), 2);
        let ns = null_space(&a);
        assert_eq!(ns.ncols(), 1);
        assert!((&a * &ns).abs().max() < 1e-12);
        let wide = DMatrix::from_row_slice(1, 3, &[1.0, 1.0, 0.0]);
        assert_eq!(null_space(&wide).ncols(), 2);
    }
}
