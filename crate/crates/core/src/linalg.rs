//! Small dense helpers shared by the solver, the moment flow and the simulator.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

/// Largest absolute entry of `m - m^T`.
pub fn asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

pub fn symmetrized(mut m: DMatrix<f64>) -> DMatrix<f64> {
    symmetrize(&mut m);
    m
}

/// Smallest eigenvalue of a symmetric matrix.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 {
        return m[(0, 0)];
    }
    SymmetricEigen::new(m.clone()).eigenvalues.min()
}

pub fn max_eigenvalue(m: &DMatrix<f64>) -> f64 {
    if m.nrows() == 1 {
        return m[(0, 0)];
    }
    SymmetricEigen::new(m.clone()).eigenvalues.max()
}

/// Replaces negative eigenvalues by zero. Returns the smallest eigenvalue
/// seen before clipping.
pub fn clip_psd(m: &mut DMatrix<f64>) -> f64 {
    if m.nrows() == 1 {
        let v = m[(0, 0)];
        if v < 0.0 {
            m[(0, 0)] = 0.0;
        }
        return v;
    }
    let eig = SymmetricEigen::new(m.clone());
    let lowest = eig.eigenvalues.min();
    if lowest < 0.0 {
        let clipped = eig.eigenvalues.map(|v| v.max(0.0));
        *m = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
        symmetrize(m);
    }
    lowest
}

/// Symmetric square root of a PSD matrix (used to sample Gaussians with
/// possibly singular covariance).
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

pub fn trace_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    // tr(A B) without forming the product
    let mut acc = 0.0;
    for i in 0..a.nrows() {
        for k in 0..a.ncols() {
            acc += a[(i, k)] * b[(k, i)];
        }
    }
    acc
}

pub fn quad_form(m: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    x.dot(&(m * x))
}

/// Cholesky factor of a symmetric matrix that passed an eigenvalue floor and a
/// conditioning check.
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
}

/// Why a matrix was rejected by [`SpdFactor::new`].
#[derive(Debug, Clone, Copy)]
pub struct NotPositive {
    pub min_eigenvalue: f64,
}

pub const MAX_CONDITION: f64 = 1e12;

impl SpdFactor {
    pub fn new(m: &DMatrix<f64>, floor: f64) -> Result<Self, NotPositive> {
        let sym = symmetrized(m.clone());
        let (lo, hi) = if sym.nrows() == 1 {
            (sym[(0, 0)], sym[(0, 0)])
        } else {
            let eig = SymmetricEigen::new(sym.clone()).eigenvalues;
            (eig.min(), eig.max())
        };
        if !(lo >= floor) || hi / lo > MAX_CONDITION {
            return Err(NotPositive { min_eigenvalue: lo });
        }
        let chol = Cholesky::new(sym).ok_or(NotPositive { min_eigenvalue: lo })?;
        Ok(SpdFactor { chol })
    }

    pub fn solve(&self, rhs: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(rhs)
    }

    pub fn solve_vec(&self, rhs: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(rhs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_restores_psd() {
        let mut m = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1e-8]);
        let lo = clip_psd(&mut m);
        assert!(lo < 0.0);
        assert!(min_eigenvalue(&m) >= -1e-15);
        assert!((m[(0, 0)] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn spd_factor_rejects_indefinite_and_ill_conditioned() {
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(SpdFactor::new(&indefinite, 1e-10).is_err());
        let ill = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1e-13]);
        assert!(SpdFactor::new(&ill, 1e-14).is_err());
        let good = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let f = SpdFactor::new(&good, 1e-10).unwrap();
        let x = f.solve_vec(&DVector::from_vec(vec![3.0, 3.0]));
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn trace_product_matches_product_trace() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = DMatrix::from_row_slice(3, 2, &[0.5, -1.0, 2.0, 0.0, 1.0, 3.0]);
        assert!((trace_product(&a, &b) - (&a * &b).trace()).abs() < 1e-14);
    }
}
