//! Dense Lyapunov solvers for the controllability and observability
//! Gramians, and the Cholesky factor of the controllability Gramian.

use nalgebra::{Cholesky, DMatrix};

use crate::error::{Error, Result};
use crate::linalg;
use crate::scalar::Real;

/// Controllability Gramian `P` together with its lower Cholesky factor `R`.
#[derive(Clone, Debug)]
pub struct GramianPair<T: Real> {
    pub p: DMatrix<T>,
    pub r: DMatrix<T>,
}

fn check_shapes<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>, what: &str) -> Result<()> {
    if !a.is_square() {
        return Err(Error::Dimension(format!(
            "A must be square, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if b.nrows() != a.nrows() {
        return Err(Error::Dimension(format!(
            "{what} has {} rows, A is {}x{}",
            b.nrows(),
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(())
}

/// Solves `A X + X A^T + C = 0` for a stable `A` and symmetric `C`.
/// The returned solution is explicitly symmetrized.
pub fn solve_lyapunov_general<T: Real>(a: &DMatrix<T>, c: &DMatrix<T>) -> Result<DMatrix<T>> {
    check_shapes(a, c, "C")?;
    let (u, t) = linalg::real_schur(a)?;
    linalg::ensure_stable(&linalg::quasi_triangular_eigenvalues(&t))?;
    let x = linalg::solve_lyapunov_schur(&u, &t, c)?;
    Ok(linalg::symmetric_part(&x))
}

/// Gramian of `A P + P A^T + B B^T = 0` plus its Cholesky factor.
pub fn solve_lyapunov<T: Real>(a: &DMatrix<T>, b: &DMatrix<T>) -> Result<GramianPair<T>> {
    check_shapes(a, b, "B")?;
    let p = solve_lyapunov_general(a, &(b * b.transpose()))?;
    let r = cholesky_spd(&p)?;
    Ok(GramianPair { p, r })
}

/// Observability Gramian: solves `A^T W + W A + C C^T = 0`.
pub fn solve_lyapunov_dual<T: Real>(a: &DMatrix<T>, c: &DMatrix<T>) -> Result<DMatrix<T>> {
    check_shapes(a, c, "C")?;
    solve_lyapunov_general(&a.transpose(), &(c * c.transpose()))
}

/// Lower-triangular `R` with positive diagonal and `R R^T = P`.
pub fn cholesky_spd<T: Real>(p: &DMatrix<T>) -> Result<DMatrix<T>> {
    if !p.is_square() {
        return Err(Error::Dimension(format!(
            "expected a square matrix, got {}x{}",
            p.nrows(),
            p.ncols()
        )));
    }
    if !linalg::is_symmetric(p, T::tol(1e-10)) {
        return Err(Error::NotPositiveDefinite);
    }
    let chol = Cholesky::new(linalg::symmetric_part(p)).ok_or(Error::NotPositiveDefinite)?;
    let r = chol.l();
    // reject factors whose pivots collapsed to roundoff
    let dmax = r.diagonal().iter().fold(T::zero(), |m, &v| m.max(v));
    let dmin = r.diagonal().iter().fold(dmax, |m, &v| m.min(v));
    if !(dmin > dmax * T::default_epsilon()) {
        return Err(Error::NotPositiveDefinite);
    }
    Ok(r)
}

/// `||A X + X A^T + C||_F / ||C||_F`.
pub fn lyapunov_residual<T: Real>(a: &DMatrix<T>, x: &DMatrix<T>, c: &DMatrix<T>) -> T {
    let res = a * x + x * a.transpose() + c;
    let scale = c.norm();
    if scale > T::zero() {
        res.norm() / scale
    } else {
        res.norm()
    }
}
