//! Linear dynamics with a polynomial output:
//! `x' = A x + B u`, `y = sum_k c_k^T x^{⊗k}`.

use nalgebra::{Complex, DMatrix, DVector};

use crate::cp_tensor::CpVector;
use crate::error::{Error, Result};
use crate::linalg::{self, CMatrix};
use crate::scalar::Real;

#[derive(Clone, Debug, PartialEq)]
pub struct LpoSystem<T: Real> {
    a: DMatrix<T>,
    b: DMatrix<T>,
    /// `outputs[k - 1]` has order `k`.
    outputs: Vec<CpVector<T>>,
}

impl<T: Real> LpoSystem<T> {
    /// Validates shapes and asymptotic stability of `A`.
    pub fn new(a: DMatrix<T>, b: DMatrix<T>, outputs: Vec<CpVector<T>>) -> Result<Self> {
        let sys = Self::new_unchecked(a, b, outputs)?;
        linalg::ensure_stable(&linalg::eigenvalues(&sys.a)?)?;
        Ok(sys)
    }

    /// Validates shapes only.
    pub fn new_unchecked(a: DMatrix<T>, b: DMatrix<T>, outputs: Vec<CpVector<T>>) -> Result<Self> {
        let n = a.nrows();
        if !a.is_square() || n == 0 {
            return Err(Error::Dimension(format!(
                "A must be square and non-empty, got {}x{}",
                a.nrows(),
                a.ncols()
            )));
        }
        if b.nrows() != n || b.ncols() == 0 {
            return Err(Error::Dimension(format!(
                "B is {}x{}, expected {n} rows and at least one column",
                b.nrows(),
                b.ncols()
            )));
        }
        if outputs.is_empty() {
            return Err(Error::InvalidArgument("at least one output coefficient is required".into()));
        }
        for (i, c) in outputs.iter().enumerate() {
            if c.order() != i + 1 || c.dim() != n {
                return Err(Error::Dimension(format!(
                    "output coefficient {} has order {} and dimension {}, expected {} and {n}",
                    i + 1,
                    c.order(),
                    c.dim(),
                    i + 1
                )));
            }
        }
        if a.iter().chain(b.iter()).any(|v| !v.is_finite_value()) {
            return Err(Error::InvalidArgument("system matrices contain non-finite entries".into()));
        }
        Ok(Self { a, b, outputs })
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn inputs(&self) -> usize {
        self.b.ncols()
    }

    /// Polynomial degree `d` of the output.
    pub fn degree(&self) -> usize {
        self.outputs.len()
    }

    pub fn a(&self) -> &DMatrix<T> {
        &self.a
    }

    pub fn b(&self) -> &DMatrix<T> {
        &self.b
    }

    pub fn outputs(&self) -> &[CpVector<T>] {
        &self.outputs
    }

    pub fn output_coefficient(&self, k: usize) -> Option<&CpVector<T>> {
        k.checked_sub(1).and_then(|i| self.outputs.get(i))
    }

    /// Whether any output coefficient beyond degree one is nonzero.
    pub fn has_nonlinear_output(&self) -> bool {
        self.outputs.iter().skip(1).any(|c| !c.is_zero_rank())
    }

    pub fn output(&self, x: &DVector<T>) -> Result<T> {
        let mut y = T::zero();
        for c in &self.outputs {
            y += c.eval(x)?;
        }
        Ok(y)
    }

    pub fn rhs(&self, x: &DVector<T>, u: &DVector<T>) -> DVector<T> {
        &self.a * x + &self.b * u
    }

    pub fn eigenvalues(&self) -> Result<Vec<Complex<T>>> {
        linalg::eigenvalues(&self.a)
    }

    pub fn spectral_abscissa(&self) -> Result<T> {
        linalg::spectral_abscissa(&self.a)
    }

    pub fn is_stable(&self) -> Result<bool> {
        Ok(self.spectral_abscissa()? < T::zero())
    }

    /// Dense `c_1` as a row vector.
    pub fn linear_output_row(&self) -> Result<DMatrix<T>> {
        let c1 = self.outputs[0].densify()?;
        Ok(DMatrix::from_row_slice(1, c1.len(), c1.as_slice()))
    }

    /// `c_1^T (s I - A)^{-1} B`, the transfer function of the linear output.
    pub fn transfer_function(&self, s: Complex<T>) -> Result<CMatrix<T>> {
        let n = self.dim();
        let shifted = CMatrix::<T>::identity(n, n) * s - linalg::to_complex(&self.a);
        let lu = shifted.lu();
        let x = lu
            .solve(&linalg::to_complex(&self.b))
            .ok_or_else(|| Error::Numerical("s I - A is singular".into()))?;
        Ok(linalg::to_complex(&self.linear_output_row()?) * x)
    }

    /// Transfer function samples at `s = i omega`.
    pub fn frequency_response(&self, omegas: &[T]) -> Result<Vec<CMatrix<T>>> {
        omegas
            .iter()
            .map(|&w| self.transfer_function(Complex::new(T::zero(), w)))
            .collect()
    }
}

/// `count` logarithmically spaced points between `lo` and `hi`.
pub fn logspace<T: Real>(lo: T, hi: T, count: usize) -> Vec<T> {
    let (l0, l1) = (lo.ln(), hi.ln());
    if count == 1 {
        return vec![lo];
    }
    (0..count)
        .map(|i| (l0 + (l1 - l0) * T::from_count(i) / T::from_count(count - 1)).exp())
        .collect()
}

/// Largest relative deviation `max_i ||H1_i - H2_i|| / max_i ||H1_i||`.
pub fn frequency_response_error<T: Real>(h1: &[CMatrix<T>], h2: &[CMatrix<T>]) -> T {
    let norm = |m: &CMatrix<T>| m.iter().map(|z| z.norm_sqr()).fold(T::zero(), |a, b| a + b).sqrt();
    let scale = h1.iter().map(norm).fold(T::zero(), |a, b| a.max(b));
    let err = h1
        .iter()
        .zip(h2)
        .map(|(a, b)| norm(&(a - b)))
        .fold(T::zero(), |a, b| a.max(b));
    if scale > T::zero() {
        err / scale
    } else {
        err
    }
}
